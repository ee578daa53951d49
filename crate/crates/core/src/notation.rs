//! Event-based notations over the semiquaver grid.
//!
//! Two encodings are supported: a flat REMI-style token stream and compound
//! words (one word per bar plus one per note). Both decode to the same
//! per-bar event view, [`EventBar`], which the fragmentation stage consumes.
//!
//! Text form is one item per line. Tokens are `KIND:VALUE` (e.g. `PITCH:60`),
//! compound words are `BAR:chord` or `NOTE:position,pitch,duration,velocity,chord`.
//! Binary form is little-endian: tokens are `u32` words `(kind << 16) | value`,
//! compound words are 6 bytes `family, position, pitch, duration, velocity, chord`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fragmentation::SectionAnnotation;
use crate::midi::{Bar, GridNote, QuantizedScore, TimeSignature};

pub const NO_CHORD: u8 = 48;
pub const NUM_CHORDS: usize = 48;
pub const NUM_SECTIONS: usize = 10;
pub const MAX_DURATION: u32 = 64;
pub const MAX_POSITIONS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Bar,
    Position,
    Pitch,
    Duration,
    Velocity,
    Chord,
}

impl TokenKind {
    const ALL: [TokenKind; 6] =
        [TokenKind::Bar, TokenKind::Position, TokenKind::Pitch, TokenKind::Duration, TokenKind::Velocity, TokenKind::Chord];

    fn range(self) -> (u16, u16) {
        match self {
            TokenKind::Bar => (0, 0),
            TokenKind::Position => (0, 15),
            TokenKind::Pitch => (0, 127),
            TokenKind::Duration => (1, 64),
            TokenKind::Velocity => (1, 127),
            TokenKind::Chord => (0, 48),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TokenKind::Bar => "BAR",
            TokenKind::Position => "POSITION",
            TokenKind::Pitch => "PITCH",
            TokenKind::Duration => "DURATION",
            TokenKind::Velocity => "VELOCITY",
            TokenKind::Chord => "CHORD",
        }
    }

    fn code(self) -> u32 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventToken {
    pub kind: TokenKind,
    pub value: u16,
}

impl EventToken {
    pub fn new(kind: TokenKind, value: u16) -> Result<Self> {
        let (lo, hi) = kind.range();
        if value < lo || value > hi {
            return Err(Error::TokenOutOfRange(format!("{}:{value}", kind.name())));
        }
        Ok(EventToken { kind, value })
    }

    fn raw(kind: TokenKind, value: u32) -> Self {
        EventToken { kind, value: value as u16 }
    }
}

impl fmt::Display for EventToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.value)
    }
}

impl FromStr for EventToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s.trim().split_once(':').ok_or_else(|| Error::TokenOutOfRange(format!("malformed token '{s}'")))?;
        let kind = TokenKind::ALL
            .into_iter()
            .find(|kind| kind.name() == k)
            .ok_or_else(|| Error::TokenOutOfRange(format!("unknown kind '{k}'")))?;
        let value = v.parse::<u16>().map_err(|_| Error::TokenOutOfRange(format!("bad value '{v}'")))?;
        EventToken::new(kind, value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    Major,
    Minor,
    Diminished,
    Augmented,
}

impl Quality {
    pub const ALL: [Quality; 4] = [Quality::Major, Quality::Minor, Quality::Diminished, Quality::Augmented];

    /// Semitone offsets of the triad above its root.
    pub fn intervals(self) -> [u8; 3] {
        match self {
            Quality::Major => [0, 4, 7],
            Quality::Minor => [0, 3, 7],
            Quality::Diminished => [0, 3, 6],
            Quality::Augmented => [0, 4, 8],
        }
    }
}

/// One of the 48 triad profiles: 12 roots × 4 qualities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChordLabel {
    pub root: u8,
    pub quality: Quality,
}

impl ChordLabel {
    pub fn new(root: u8, quality: Quality) -> Self {
        assert!(root < 12, "root pitch class {root} out of range");
        ChordLabel { root, quality }
    }

    pub fn index(&self) -> u8 {
        self.root * 4 + self.quality as u8
    }

    pub fn from_index(index: u8) -> Option<Self> {
        (index < NUM_CHORDS as u8).then(|| ChordLabel::new(index / 4, Quality::ALL[(index % 4) as usize]))
    }

    /// Token value for an optional chord (48 means no chord).
    pub fn token_value(chord: Option<ChordLabel>) -> u8 {
        chord.map_or(NO_CHORD, |c| c.index())
    }

    pub fn pitch_classes(&self) -> [u8; 3] {
        self.quality.intervals().map(|i| (self.root + i) % 12)
    }
}

/// Onset count per pitch class.
pub fn pitch_class_histogram(bar: &Bar) -> [f64; 12] {
    let mut h = [0.0; 12];
    for (_, p) in bar.onsets() {
        h[(p % 12) as usize] += 1.0;
    }
    h
}

/// Template score: chord-tone mass minus half the non-chord-tone mass.
pub fn chord_template_score(hist: &[f64; 12], chord: ChordLabel) -> f64 {
    let tones = chord.pitch_classes();
    hist.iter().enumerate().map(|(pc, &m)| if tones.contains(&(pc as u8)) { m } else { -0.5 * m }).sum()
}

/// Best-matching triad for the bar's onsets, or `None` when the bar is empty
/// or no template scores above zero. Ties go to the lower chord index.
pub fn recognize_chord(bar: &Bar) -> Option<ChordLabel> {
    recognize_from_histogram(&pitch_class_histogram(bar))
}

pub fn recognize_from_histogram(hist: &[f64; 12]) -> Option<ChordLabel> {
    if hist.iter().all(|&m| m == 0.0) {
        return None;
    }
    let mut best: Option<(f64, ChordLabel)> = None;
    for index in 0..NUM_CHORDS as u8 {
        let chord = ChordLabel::from_index(index).unwrap();
        let score = chord_template_score(hist, chord);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, chord));
        }
    }
    best.filter(|&(s, _)| s > 0.0).map(|(_, c)| c)
}

pub fn recognize_chords(q: &QuantizedScore) -> Vec<Option<ChordLabel>> {
    q.bars().iter().map(recognize_chord).collect()
}

/// Note attributes as they appear inside one bar of an event stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventNote {
    pub position: u8,
    pub pitch: u8,
    pub duration: u8,
    pub velocity: u8,
}

/// Notation-independent view of one bar of an event stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventBar {
    pub chord: u8,
    pub notes: Vec<EventNote>,
}

fn check_encodable(q: &QuantizedScore, chords: &[Option<ChordLabel>]) -> Result<()> {
    if chords.len() != q.num_bars() {
        return Err(Error::ChordListMismatch { bars: q.num_bars(), got: chords.len() });
    }
    if q.semiquavers_per_bar > MAX_POSITIONS {
        return Err(Error::TokenOutOfRange(format!("{} steps per bar exceed the {MAX_POSITIONS} position tokens", q.semiquavers_per_bar)));
    }
    Ok(())
}

fn bar_events(q: &QuantizedScore, b: usize) -> impl Iterator<Item = EventNote> + '_ {
    let spb = q.semiquavers_per_bar;
    q.bar_notes(b).iter().map(move |n| EventNote {
        position: (n.onset % spb) as u8,
        pitch: n.pitch,
        duration: n.duration.min(MAX_DURATION) as u8,
        velocity: n.velocity,
    })
}

/// Flat REMI stream: `Bar [Chord] (Position Pitch Duration Velocity)*` per bar.
/// A chord token is written on the first bar and whenever the chord changes.
pub fn encode_remi(q: &QuantizedScore, chords: &[Option<ChordLabel>]) -> Result<Vec<EventToken>> {
    check_encodable(q, chords)?;
    let mut out = Vec::new();
    for b in 0..q.num_bars() {
        out.push(EventToken::raw(TokenKind::Bar, 0));
        if b == 0 || chords[b] != chords[b - 1] {
            out.push(EventToken::raw(TokenKind::Chord, ChordLabel::token_value(chords[b]) as u32));
        }
        for e in bar_events(q, b) {
            out.push(EventToken::raw(TokenKind::Position, e.position as u32));
            out.push(EventToken::raw(TokenKind::Pitch, e.pitch as u32));
            out.push(EventToken::raw(TokenKind::Duration, e.duration as u32));
            out.push(EventToken::raw(TokenKind::Velocity, e.velocity as u32));
        }
    }
    Ok(out)
}

/// Parse a REMI stream into bars, validating token order.
pub fn remi_bars(tokens: &[EventToken]) -> Result<Vec<EventBar>> {
    #[derive(PartialEq, Clone, Copy)]
    enum State {
        Start,
        AfterBar,
        AfterChord,
        AfterPosition,
        AfterPitch,
        AfterDuration,
        AfterVelocity,
    }
    let mut bars: Vec<EventBar> = Vec::new();
    let mut state = State::Start;
    let mut chord = NO_CHORD;
    let mut pending = EventNote { position: 0, pitch: 0, duration: 0, velocity: 0 };
    for (index, tok) in tokens.iter().enumerate() {
        let illegal = |reason: &str| Error::IllegalTokenOrder { index, reason: reason.to_string() };
        let (lo, hi) = tok.kind.range();
        if tok.value < lo || tok.value > hi {
            return Err(Error::TokenOutOfRange(tok.to_string()));
        }
        state = match (state, tok.kind) {
            (State::Start | State::AfterBar | State::AfterChord | State::AfterVelocity, TokenKind::Bar) => {
                bars.push(EventBar { chord, notes: Vec::new() });
                State::AfterBar
            }
            (State::Start, _) => return Err(illegal("stream must begin with a Bar token")),
            (State::AfterBar, TokenKind::Chord) => {
                chord = tok.value as u8;
                bars.last_mut().unwrap().chord = chord;
                State::AfterChord
            }
            (State::AfterBar | State::AfterChord | State::AfterVelocity, TokenKind::Position) => {
                pending.position = tok.value as u8;
                State::AfterPosition
            }
            (State::AfterPosition, TokenKind::Pitch) => {
                pending.pitch = tok.value as u8;
                State::AfterPitch
            }
            (State::AfterPitch, TokenKind::Duration) => {
                pending.duration = tok.value as u8;
                State::AfterDuration
            }
            (State::AfterDuration, TokenKind::Velocity) => {
                pending.velocity = tok.value as u8;
                bars.last_mut().unwrap().notes.push(pending);
                State::AfterVelocity
            }
            (_, TokenKind::Chord) => return Err(illegal("Chord token must directly follow Bar")),
            (_, TokenKind::Pitch) => return Err(illegal("Pitch must follow Position")),
            (_, TokenKind::Duration) => return Err(illegal("Duration must follow Pitch")),
            (_, TokenKind::Velocity) => return Err(illegal("Velocity must follow Duration")),
            (_, kind) => return Err(illegal(&format!("unexpected {kind:?} inside a note"))),
        };
    }
    if matches!(state, State::AfterPosition | State::AfterPitch | State::AfterDuration) {
        return Err(Error::IllegalTokenOrder { index: tokens.len(), reason: "stream ends inside a note".into() });
    }
    Ok(bars)
}

/// Rebuild a grid score from per-bar events (16 steps per bar).
pub fn bars_to_score(bars: &[EventBar]) -> QuantizedScore {
    let spb = TimeSignature::COMMON.semiquavers_per_bar();
    let notes = bars
        .iter()
        .enumerate()
        .flat_map(|(b, bar)| {
            bar.notes.iter().map(move |e| GridNote {
                pitch: e.pitch,
                onset: b as u32 * spb + e.position as u32,
                duration: e.duration as u32,
                velocity: e.velocity,
            })
        })
        .collect();
    QuantizedScore::from_notes_with_bars(TimeSignature::COMMON, notes, bars.len())
}

pub fn bar_chords(bars: &[EventBar]) -> Vec<Option<ChordLabel>> {
    bars.iter().map(|b| ChordLabel::from_index(b.chord)).collect()
}

pub fn decode_remi(tokens: &[EventToken]) -> Result<QuantizedScore> {
    Ok(bars_to_score(&remi_bars(tokens)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Bar,
    Note,
}

/// One compound word. Bar words carry only the bar chord; note words carry
/// every attribute of one note plus the active chord.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompoundWord {
    pub family: Family,
    pub position: u8,
    pub pitch: u8,
    pub duration: u8,
    pub velocity: u8,
    pub chord: u8,
}

impl CompoundWord {
    pub fn bar(chord: u8) -> Self {
        CompoundWord { family: Family::Bar, position: 0, pitch: 0, duration: 0, velocity: 0, chord }
    }
}

impl fmt::Display for CompoundWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Bar => write!(f, "BAR:{}", self.chord),
            Family::Note => write!(f, "NOTE:{},{},{},{},{}", self.position, self.pitch, self.duration, self.velocity, self.chord),
        }
    }
}

impl FromStr for CompoundWord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::TokenOutOfRange(format!("malformed compound word '{s}'"));
        let (fam, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let vals: Vec<u8> = rest.split(',').map(|v| v.parse::<u8>().map_err(|_| bad())).collect::<Result<_>>()?;
        let w = match (fam, vals.as_slice()) {
            ("BAR", [c]) => CompoundWord::bar(*c),
            ("NOTE", [p, pi, d, v, c]) => {
                CompoundWord { family: Family::Note, position: *p, pitch: *pi, duration: *d, velocity: *v, chord: *c }
            }
            _ => return Err(bad()),
        };
        validate_word(&w)?;
        Ok(w)
    }
}

fn validate_word(w: &CompoundWord) -> Result<()> {
    let ok = w.chord <= NO_CHORD
        && match w.family {
            Family::Bar => true,
            Family::Note => {
                (w.position as u32) < MAX_POSITIONS
                    && w.pitch <= 127
                    && (1..=MAX_DURATION as u8).contains(&w.duration)
                    && (1..=127).contains(&w.velocity)
            }
        };
    if ok {
        Ok(())
    } else {
        Err(Error::TokenOutOfRange(w.to_string()))
    }
}

pub fn encode_cp(q: &QuantizedScore, chords: &[Option<ChordLabel>]) -> Result<Vec<CompoundWord>> {
    check_encodable(q, chords)?;
    let mut out = Vec::new();
    for (b, chord) in chords.iter().enumerate() {
        let c = ChordLabel::token_value(*chord);
        out.push(CompoundWord::bar(c));
        out.extend(bar_events(q, b).map(|e| CompoundWord {
            family: Family::Note,
            position: e.position,
            pitch: e.pitch,
            duration: e.duration,
            velocity: e.velocity,
            chord: c,
        }));
    }
    Ok(out)
}

pub fn cp_bars(words: &[CompoundWord]) -> Result<Vec<EventBar>> {
    let mut bars: Vec<EventBar> = Vec::new();
    for (index, w) in words.iter().enumerate() {
        validate_word(w)?;
        match w.family {
            Family::Bar => bars.push(EventBar { chord: w.chord, notes: Vec::new() }),
            Family::Note => {
                let bar = bars
                    .last_mut()
                    .ok_or_else(|| Error::IllegalTokenOrder { index, reason: "note word before the first bar word".into() })?;
                bar.notes.push(EventNote { position: w.position, pitch: w.pitch, duration: w.duration, velocity: w.velocity });
            }
        }
    }
    Ok(bars)
}

pub fn decode_cp(words: &[CompoundWord]) -> Result<QuantizedScore> {
    Ok(bars_to_score(&cp_bars(words)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Notation {
    Remi,
    #[default]
    Cp,
}

impl FromStr for Notation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remi" => Ok(Notation::Remi),
            "cp" => Ok(Notation::Cp),
            other => Err(Error::ConfigInvalid(format!("unknown notation '{other}'"))),
        }
    }
}

/// An encoded piece in either notation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventStream {
    Remi(Vec<EventToken>),
    Cp(Vec<CompoundWord>),
}

impl EventStream {
    pub fn encode(notation: Notation, q: &QuantizedScore, chords: &[Option<ChordLabel>]) -> Result<Self> {
        Ok(match notation {
            Notation::Remi => EventStream::Remi(encode_remi(q, chords)?),
            Notation::Cp => EventStream::Cp(encode_cp(q, chords)?),
        })
    }

    pub fn bars(&self) -> Result<Vec<EventBar>> {
        match self {
            EventStream::Remi(t) => remi_bars(t),
            EventStream::Cp(w) => cp_bars(w),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            EventStream::Remi(t) => t.is_empty(),
            EventStream::Cp(w) => w.is_empty(),
        }
    }

    pub fn to_text(&self) -> String {
        let lines: Vec<String> = match self {
            EventStream::Remi(t) => t.iter().map(|x| x.to_string()).collect(),
            EventStream::Cp(w) => w.iter().map(|x| x.to_string()).collect(),
        };
        let mut s = lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    pub fn from_text(notation: Notation, text: &str) -> Result<Self> {
        let lines = text.lines().filter(|l| !l.trim().is_empty());
        Ok(match notation {
            Notation::Remi => EventStream::Remi(lines.map(str::parse).collect::<Result<_>>()?),
            Notation::Cp => EventStream::Cp(lines.map(str::parse).collect::<Result<_>>()?),
        })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        match self {
            EventStream::Remi(t) => t.iter().flat_map(|x| ((x.kind.code() << 16) | x.value as u32).to_le_bytes()).collect(),
            EventStream::Cp(w) => w.iter().flat_map(|x| [x.family as u8, x.position, x.pitch, x.duration, x.velocity, x.chord]).collect(),
        }
    }

    pub fn from_binary(notation: Notation, bytes: &[u8]) -> Result<Self> {
        let bad = || Error::TokenOutOfRange("truncated binary stream".into());
        Ok(match notation {
            Notation::Remi => {
                if !bytes.len().is_multiple_of(4) {
                    return Err(bad());
                }
                let toks = bytes
                    .chunks_exact(4)
                    .map(|c| {
                        let word = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                        let kind = *TokenKind::ALL
                            .get((word >> 16) as usize)
                            .ok_or_else(|| Error::TokenOutOfRange(format!("kind code {}", word >> 16)))?;
                        EventToken::new(kind, (word & 0xFFFF) as u16)
                    })
                    .collect::<Result<_>>()?;
                EventStream::Remi(toks)
            }
            Notation::Cp => {
                if !bytes.len().is_multiple_of(6) {
                    return Err(bad());
                }
                let words = bytes
                    .chunks_exact(6)
                    .map(|c| {
                        let family = match c[0] {
                            0 => Family::Bar,
                            1 => Family::Note,
                            f => return Err(Error::TokenOutOfRange(format!("family code {f}"))),
                        };
                        let w = CompoundWord { family, position: c[1], pitch: c[2], duration: c[3], velocity: c[4], chord: c[5] };
                        validate_word(&w)?;
                        Ok(w)
                    })
                    .collect::<Result<_>>()?;
                EventStream::Cp(words)
            }
        })
    }
}

/// The (note, chord, section) unit. `chord` is a chord index or [`NO_CHORD`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub note: u8,
    pub chord: u8,
    pub section: u8,
}

impl Triplet {
    pub fn new(note: u8, chord: u8, section: u8) -> Result<Self> {
        if note > 127 {
            return Err(Error::PitchOutOfRange(note as i64));
        }
        if chord > NO_CHORD || section as usize >= NUM_SECTIONS {
            return Err(Error::TokenOutOfRange(format!("triplet ({note},{chord},{section})")));
        }
        Ok(Triplet { note, chord, section })
    }
}

/// A triplet together with the grid onset of its note.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedTriplet {
    pub onset: u32,
    pub bar: usize,
    pub triplet: Triplet,
}

/// One triplet per note event, carrying the bar chord and the section that
/// contains the note's onset (sections are half-open `[start, end)`).
pub fn align_triplets(bars: &[EventBar], steps_per_bar: u32, sections: &[SectionAnnotation]) -> Result<Vec<AlignedTriplet>> {
    let mut out = Vec::new();
    for (b, bar) in bars.iter().enumerate() {
        for e in &bar.notes {
            let onset = b as u32 * steps_per_bar + e.position as u32;
            let sec = sections.iter().find(|s| s.start <= onset && onset < s.end).ok_or(Error::UncoveredPosition(onset))?;
            out.push(AlignedTriplet { onset, bar: b, triplet: Triplet::new(e.pitch, bar.chord, sec.label)? });
        }
    }
    Ok(out)
}

pub fn make_triplets(stream: &EventStream, sections: &[SectionAnnotation]) -> Result<Vec<Triplet>> {
    let bars = stream.bars()?;
    Ok(align_triplets(&bars, MAX_POSITIONS, sections)?.into_iter().map(|a| a.triplet).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::TimeSignature;

    fn score(notes: &[(u8, u32, u32)]) -> QuantizedScore {
        QuantizedScore::from_notes(
            TimeSignature::COMMON,
            notes.iter().map(|&(pitch, onset, duration)| GridNote { pitch, onset, duration, velocity: 100 }).collect(),
        )
    }

    fn oracle_best(hist: &[f64; 12]) -> Vec<u8> {
        // every template index achieving the maximal score
        let scores: Vec<f64> = (0..48).map(|i| chord_template_score(hist, ChordLabel::from_index(i).unwrap())).collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..48).filter(|&i| scores[i as usize] == best).collect()
    }

    #[test]
    fn empty_score_gives_empty_stream() {
        let q = score(&[]);
        assert!(encode_remi(&q, &[]).unwrap().is_empty());
        assert!(encode_cp(&q, &[]).unwrap().is_empty());
        assert_eq!(decode_remi(&[]).unwrap().num_bars(), 0);
    }

    #[test]
    fn single_bar_single_note() {
        let q = score(&[(60, 0, 4)]);
        let c = Some(ChordLabel::new(0, Quality::Major));
        let toks = encode_remi(&q, &[c]).unwrap();
        let expect: Vec<String> =
            ["BAR:0", "CHORD:0", "POSITION:0", "PITCH:60", "DURATION:4", "VELOCITY:100"].iter().map(|s| s.to_string()).collect();
        assert_eq!(toks.iter().map(|t| t.to_string()).collect::<Vec<_>>(), expect);
        let words = encode_cp(&q, &[c]).unwrap();
        assert_eq!(words.len(), 2);
        assert_eq!(words[1].to_string(), "NOTE:0,60,4,100,0");
        assert_eq!(decode_remi(&toks).unwrap(), q);
        assert_eq!(decode_cp(&words).unwrap(), q);
    }

    #[test]
    fn chord_list_must_match_bars() {
        let q = score(&[(60, 0, 4), (62, 20, 4)]);
        assert!(matches!(encode_remi(&q, &[None]), Err(Error::ChordListMismatch { bars: 2, got: 1 })));
    }

    #[test]
    fn illegal_orders_are_rejected() {
        let t = |k, v| EventToken::new(k, v).unwrap();
        let pitch_first = [t(TokenKind::Bar, 0), t(TokenKind::Pitch, 60)];
        assert!(matches!(decode_remi(&pitch_first), Err(Error::IllegalTokenOrder { index: 1, .. })));
        assert!(matches!(decode_remi(&[t(TokenKind::Position, 0)]), Err(Error::IllegalTokenOrder { index: 0, .. })));
        let truncated = [t(TokenKind::Bar, 0), t(TokenKind::Position, 0), t(TokenKind::Pitch, 60)];
        assert!(decode_remi(&truncated).is_err());
        let late_chord = [t(TokenKind::Bar, 0), t(TokenKind::Position, 0), t(TokenKind::Chord, 3)];
        assert!(decode_remi(&late_chord).is_err());
    }

    #[test]
    fn chord_tokens_only_on_change() {
        let q = score(&[(60, 0, 1), (60, 16, 1), (60, 32, 1), (60, 48, 1)]);
        let cmaj = Some(ChordLabel::new(0, Quality::Major));
        let amin = Some(ChordLabel::new(9, Quality::Minor));
        let toks = encode_remi(&q, &[cmaj, cmaj, amin, amin]).unwrap();
        assert_eq!(toks.iter().filter(|t| t.kind == TokenKind::Chord).count(), 2);
        let bars = remi_bars(&toks).unwrap();
        assert_eq!(bar_chords(&bars), vec![cmaj, cmaj, amin, amin]);
    }

    #[test]
    fn chord_recognition_examples() {
        let q = score(&[(60, 0, 4), (64, 4, 4), (67, 8, 4)]);
        assert_eq!(recognize_chord(&q.bars()[0]), Some(ChordLabel::new(0, Quality::Major)));
        let q = score(&[(57, 0, 4), (60, 4, 4), (64, 8, 4)]);
        assert_eq!(recognize_chord(&q.bars()[0]), Some(ChordLabel::new(9, Quality::Minor)));
        assert_eq!(recognize_chord(&Bar::empty(0, 16)), None);
        // the exhaustive oracle agrees on both
        let mut h = [0.0; 12];
        for p in [60, 64, 67] {
            h[p % 12] += 1.0;
        }
        assert_eq!(oracle_best(&h), vec![0]);
    }

    #[test]
    fn chord_index_is_bijective() {
        for i in 0..48u8 {
            let c = ChordLabel::from_index(i).unwrap();
            assert_eq!(c.index(), i);
            assert_eq!(c.root, i / 4);
        }
        assert_eq!(ChordLabel::from_index(48), None);
    }

    #[test]
    fn triplets_follow_sections() {
        let q = score(&[(60, 0, 4), (62, 16, 4), (64, 17, 4)]);
        let chords = recognize_chords(&q);
        let stream = EventStream::encode(Notation::Remi, &q, &chords).unwrap();
        let sections = vec![SectionAnnotation { start: 0, end: 16, label: 1 }, SectionAnnotation { start: 16, end: 32, label: 2 }];
        let tr = make_triplets(&stream, &sections).unwrap();
        assert_eq!(tr.iter().map(|t| t.section).collect::<Vec<_>>(), vec![1, 2, 2]);
        // the note at the boundary (onset 16) belongs to the section starting there
        let err = make_triplets(&stream, &sections[..1]).unwrap_err();
        assert!(matches!(err, Error::UncoveredPosition(16)));
    }

    #[test]
    fn text_and_binary_forms() {
        let q = score(&[(60, 0, 4), (67, 3, 70), (72, 18, 2)]);
        let chords = recognize_chords(&q);
        for notation in [Notation::Remi, Notation::Cp] {
            let s = EventStream::encode(notation, &q, &chords).unwrap();
            assert_eq!(EventStream::from_text(notation, &s.to_text()).unwrap(), s);
            assert_eq!(EventStream::from_binary(notation, &s.to_binary()).unwrap(), s);
        }
        assert!("PITCH:200".parse::<EventToken>().is_err());
        assert!("DURATION:0".parse::<EventToken>().is_err());
    }
}
