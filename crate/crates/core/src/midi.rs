//! Standard MIDI File reading/writing and the semiquaver grid.
//!
//! `parse_midi` accepts format 0 and 1 files, resolves note-on/note-off pairs
//! and reads the first tempo and time-signature meta events. `quantize` snaps
//! a [`Score`] onto a per-bar grid of semiquaver steps (16 per 4/4 bar).

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPO_US: u32 = 500_000;
pub const PITCHES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MidiNote {
    pub pitch: u8,
    pub onset: u32,
    pub duration: u32,
    pub velocity: u8,
    pub track: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature { numerator: 4, denominator: 4 };

    pub fn new(numerator: u8, denominator: u8) -> Result<Self> {
        if numerator == 0 || ![1, 2, 4, 8, 16].contains(&denominator) {
            return Err(Error::InvalidScore(format!("unsupported time signature {numerator}/{denominator}")));
        }
        Ok(TimeSignature { numerator, denominator })
    }

    /// Grid steps per bar: numerator × 16/denominator (16 for 4/4).
    pub fn semiquavers_per_bar(&self) -> u32 {
        self.numerator as u32 * (16 / self.denominator as u32)
    }
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self::COMMON
    }
}

/// A parsed MIDI file. Notes are kept sorted by (onset, pitch, track) and
/// same-pitch overlaps within a track are merged into one note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ticks_per_quarter: u16,
    pub time_signature: TimeSignature,
    pub tempo_us_per_quarter: u32,
    notes: Vec<MidiNote>,
    /// End-of-track tick; never earlier than the last note-off.
    #[serde(default)]
    length: u32,
}

impl Score {
    pub fn new(ticks_per_quarter: u16, time_signature: TimeSignature, notes: Vec<MidiNote>) -> Result<Self> {
        if ticks_per_quarter == 0 || ticks_per_quarter & 0x8000 != 0 {
            return Err(Error::InvalidScore(format!("ticks per quarter {ticks_per_quarter}")));
        }
        TimeSignature::new(time_signature.numerator, time_signature.denominator)?;
        for n in &notes {
            if n.pitch > 127 || n.velocity == 0 || n.velocity > 127 || n.duration == 0 {
                return Err(Error::InvalidScore(format!("invalid note {n:?}")));
            }
            if n.onset.checked_add(n.duration).is_none() {
                return Err(Error::InvalidScore(format!("tick overflow for note {n:?}")));
            }
        }
        let length = notes.iter().map(|n| n.onset + n.duration).max().unwrap_or(0);
        Ok(Score {
            ticks_per_quarter,
            time_signature,
            tempo_us_per_quarter: DEFAULT_TEMPO_US,
            notes: merge_overlaps(notes, |n| (n.track, n.pitch)),
            length,
        })
    }

    pub fn empty() -> Self {
        Score::new(480, TimeSignature::COMMON, Vec::new()).expect("valid defaults")
    }

    pub fn with_tempo(mut self, tempo_us_per_quarter: u32) -> Self {
        self.tempo_us_per_quarter = tempo_us_per_quarter.clamp(1, 0xFF_FFFF);
        self
    }

    pub fn notes(&self) -> &[MidiNote] {
        &self.notes
    }

    /// Extend the score to at least `ticks`, keeping trailing silence.
    pub fn with_length(mut self, ticks: u32) -> Self {
        self.length = self.length.max(ticks);
        self
    }

    pub fn end_tick(&self) -> u32 {
        self.length
    }
}

fn merge_overlaps<K: Ord + Copy>(mut notes: Vec<MidiNote>, key: impl Fn(&MidiNote) -> K) -> Vec<MidiNote> {
    notes.sort_by_key(|n| (key(n), n.onset));
    let mut merged: Vec<MidiNote> = Vec::with_capacity(notes.len());
    for n in notes {
        if let Some(last) = merged.last_mut() {
            let end = last.onset + last.duration;
            if key(last) == key(&n) && n.onset < end {
                last.duration = end.max(n.onset + n.duration) - last.onset;
                continue;
            }
        }
        merged.push(n);
    }
    merged.sort_by_key(|n| (n.onset, n.pitch, n.track));
    merged
}

/// Non-fatal conditions met while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// A note-on without a matching note-off, truncated at the end of its track.
    DanglingNoteOn { track: u16, pitch: u8, onset: u32 },
}

pub fn parse_midi(bytes: &[u8]) -> Result<Score> {
    let (score, warnings) = parse_midi_with_warnings(bytes)?;
    for w in &warnings {
        log::warn!("{w:?}");
    }
    Ok(score)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or_else(|| Error::MalformedTrack("unexpected end of track".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::MalformedTrack("truncated event".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::MalformedTrack("variable-length quantity longer than 4 bytes".into()))
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

pub fn parse_midi_with_warnings(bytes: &[u8]) -> Result<(Score, Vec<ParseWarning>)> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(Error::MalformedHeader("missing MThd chunk".into()));
    }
    let header_len = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if header_len < 6 || bytes.len() < 8 + header_len {
        return Err(Error::MalformedHeader(format!("short header chunk ({header_len} bytes)")));
    }
    let format = u16::from_be_bytes([bytes[8], bytes[9]]);
    let division = u16::from_be_bytes([bytes[12], bytes[13]]);
    if format == 2 {
        return Err(Error::UnsupportedFormat(2));
    }
    if format > 2 {
        return Err(Error::MalformedHeader(format!("unknown format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::MalformedHeader("SMPTE or zero time division".into()));
    }

    let mut pos = 8 + header_len;
    let mut notes = Vec::new();
    let mut warnings = Vec::new();
    let mut tempo = None;
    let mut time_sig = None;
    let mut track_index: u16 = 0;
    let mut length = 0u32;
    while pos + 8 <= bytes.len() {
        let kind = &bytes[pos..pos + 4];
        let len = u32::from_be_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]]) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::MalformedTrack("chunk length exceeds file".into()))?;
        if kind == b"MTrk" {
            let track_end = parse_track(&bytes[start..end], track_index, &mut notes, &mut warnings, &mut tempo, &mut time_sig)?;
            length = length.max(track_end);
            track_index += 1;
        }
        pos = end;
    }

    let ts = time_sig.unwrap_or(TimeSignature::COMMON);
    let score = Score::new(division, ts, notes)?.with_tempo(tempo.unwrap_or(DEFAULT_TEMPO_US)).with_length(length);
    Ok((score, warnings))
}

fn parse_track(
    data: &[u8],
    track: u16,
    notes: &mut Vec<MidiNote>,
    warnings: &mut Vec<ParseWarning>,
    tempo: &mut Option<u32>,
    time_sig: &mut Option<TimeSignature>,
) -> Result<u32> {
    let mut cur = Cursor { data, pos: 0 };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut active: BTreeMap<(u8, u8), VecDeque<(u32, u8)>> = BTreeMap::new();

    let close = |notes: &mut Vec<MidiNote>, pitch: u8, onset: u32, velocity: u8, end: u32| {
        notes.push(MidiNote { pitch, onset, duration: end.saturating_sub(onset).max(1), velocity, track });
    };

    while !cur.done() {
        tick += cur.vlq()? as u64;
        let now = u32::try_from(tick).map_err(|_| Error::MalformedTrack("tick overflow".into()))?;
        let mut status = cur.u8()?;
        if status < 0x80 {
            status = running.ok_or_else(|| Error::MalformedTrack("data byte without running status".into()))?;
            cur.pos -= 1;
        }
        match status {
            0xFF => {
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let payload = cur.take(len)?;
                match kind {
                    0x51 if len == 3 && tempo.is_none() => {
                        *tempo = Some(u32::from_be_bytes([0, payload[0], payload[1], payload[2]]));
                    }
                    0x58 if len >= 2 && time_sig.is_none() => {
                        let den = 1u32.checked_shl(payload[1] as u32).unwrap_or(0);
                        if let Ok(ts) = TimeSignature::new(payload[0], den.min(255) as u8) {
                            *time_sig = Some(ts);
                        }
                    }
                    0x2F => break,
                    _ => {}
                }
                running = None;
            }
            0xF0 | 0xF7 => {
                let len = cur.vlq()? as usize;
                cur.take(len)?;
                running = None;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x80 | 0x90 => {
                        let pitch = cur.u8()? & 0x7F;
                        let vel = cur.u8()? & 0x7F;
                        let key = (channel, pitch);
                        if status & 0xF0 == 0x90 && vel > 0 {
                            active.entry(key).or_default().push_back((now, vel));
                        } else if let Some((onset, v)) = active.get_mut(&key).and_then(|q| q.pop_front()) {
                            close(notes, pitch, onset, v, now);
                        }
                    }
                    // controllers, pitch bend, aftertouch: parsed and discarded
                    0xA0 | 0xB0 | 0xE0 => {
                        cur.take(2)?;
                    }
                    _ => {
                        cur.take(1)?;
                    }
                }
            }
            _ => return Err(Error::MalformedTrack(format!("unexpected status byte {status:#04x}"))),
        }
    }

    let end = u32::try_from(tick).unwrap_or(u32::MAX);
    for ((_, pitch), queue) in active {
        for (onset, vel) in queue {
            warnings.push(ParseWarning::DanglingNoteOn { track, pitch, onset });
            close(notes, pitch, onset, vel, end);
        }
    }
    Ok(end)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len();
    i -= 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7F) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// A channel event keyed for sorting: (tick, off-before-on rank, pitch, bytes).
type TrackEvent = (u32, u8, u8, [u8; 3]);

/// Write a format-1 SMF. Track `k` of the file holds the notes whose `track`
/// field is `k`; track 0 also carries the tempo and time-signature events.
pub fn write_midi(score: &Score) -> Vec<u8> {
    let track_count = score.notes.iter().map(|n| n.track as usize + 1).max().unwrap_or(1);
    let mut per_track: Vec<Vec<TrackEvent>> = vec![Vec::new(); track_count];
    for n in &score.notes {
        // note-off sorts before note-on at the same tick
        per_track[n.track as usize].push((n.onset + n.duration, 0, n.pitch, [0x80, n.pitch, 0x40]));
        per_track[n.track as usize].push((n.onset, 1, n.pitch, [0x90, n.pitch, n.velocity]));
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(track_count as u16).to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());

    for (index, mut events) in per_track.into_iter().enumerate() {
        events.sort_by_key(|e| (e.0, e.1, e.2));
        let mut body = Vec::new();
        if index == 0 {
            let t = score.tempo_us_per_quarter.to_be_bytes();
            body.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03, t[1], t[2], t[3]]);
            let ts = score.time_signature;
            let dd = ts.denominator.trailing_zeros() as u8;
            body.extend_from_slice(&[0x00, 0xFF, 0x58, 0x04, ts.numerator, dd, 24, 8]);
        }
        let mut last = 0u32;
        for (tick, _, _, msg) in events {
            push_vlq(&mut body, tick - last);
            body.extend_from_slice(&msg);
            last = tick;
        }
        let eot = if index == 0 { score.end_tick().max(last) } else { last };
        push_vlq(&mut body, eot - last);
        body.extend_from_slice(&[0xFF, 0x2F, 0x00]);
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}

/// A note on the semiquaver grid. `onset` is absolute (bar × steps + position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridNote {
    pub pitch: u8,
    pub onset: u32,
    pub duration: u32,
    pub velocity: u8,
}

impl GridNote {
    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

/// Onset and continuation grids for one bar, indexed `[step][pitch]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bar {
    pub index: usize,
    pub cells: Vec<[bool; PITCHES]>,
    pub sustained: Vec<[bool; PITCHES]>,
}

impl Bar {
    pub fn empty(index: usize, steps: u32) -> Self {
        Bar { index, cells: vec![[false; PITCHES]; steps as usize], sustained: vec![[false; PITCHES]; steps as usize] }
    }

    pub fn steps(&self) -> usize {
        self.cells.len()
    }

    /// Onset pitches of the bar in (step, pitch) order.
    pub fn onsets(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.cells.iter().enumerate().flat_map(|(s, row)| (0..PITCHES).filter(move |&p| row[p]).map(move |p| (s, p as u8)))
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|row| row.iter().all(|&c| !c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedScore {
    pub semiquavers_per_bar: u32,
    pub ticks_per_quarter: u16,
    pub time_signature: TimeSignature,
    pub tempo_us_per_quarter: u32,
    notes: Vec<GridNote>,
    bars: Vec<Bar>,
}

impl QuantizedScore {
    /// Build from grid notes. Same-pitch overlaps are merged; the bar count is
    /// the smallest that contains every note's full extent.
    pub fn from_notes(time_signature: TimeSignature, notes: Vec<GridNote>) -> Self {
        Self::from_notes_with_bars(time_signature, notes, 0)
    }

    /// Like [`from_notes`](Self::from_notes) but with at least `min_bars` bars.
    pub fn from_notes_with_bars(time_signature: TimeSignature, notes: Vec<GridNote>, min_bars: usize) -> Self {
        let as_midi: Vec<MidiNote> = notes
            .into_iter()
            .map(|n| MidiNote { pitch: n.pitch, onset: n.onset, duration: n.duration.max(1), velocity: n.velocity, track: 0 })
            .collect();
        let notes: Vec<GridNote> = merge_overlaps(as_midi, |n| n.pitch)
            .into_iter()
            .map(|n| GridNote { pitch: n.pitch, onset: n.onset, duration: n.duration, velocity: n.velocity })
            .collect();
        let spb = time_signature.semiquavers_per_bar();
        let end = notes.iter().map(|n| n.end()).max().unwrap_or(0);
        let bar_count = (end.div_ceil(spb) as usize).max(min_bars);
        let mut bars: Vec<Bar> = (0..bar_count).map(|i| Bar::empty(i, spb)).collect();
        for n in &notes {
            let (b, s) = ((n.onset / spb) as usize, (n.onset % spb) as usize);
            bars[b].cells[s][n.pitch as usize] = true;
            for step in n.onset + 1..n.end() {
                let (b, s) = ((step / spb) as usize, (step % spb) as usize);
                bars[b].sustained[s][n.pitch as usize] = true;
            }
        }
        QuantizedScore {
            semiquavers_per_bar: spb,
            ticks_per_quarter: 480,
            time_signature,
            tempo_us_per_quarter: DEFAULT_TEMPO_US,
            notes,
            bars,
        }
    }

    pub fn with_timing(mut self, ticks_per_quarter: u16, tempo_us_per_quarter: u32) -> Self {
        self.ticks_per_quarter = ticks_per_quarter;
        self.tempo_us_per_quarter = tempo_us_per_quarter;
        self
    }

    pub fn notes(&self) -> &[GridNote] {
        &self.notes
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn num_bars(&self) -> usize {
        self.bars.len()
    }

    pub fn total_steps(&self) -> u32 {
        self.bars.len() as u32 * self.semiquavers_per_bar
    }

    pub fn bar_of(&self, onset: u32) -> usize {
        (onset / self.semiquavers_per_bar) as usize
    }

    /// Notes whose onset falls in bar `b`, in (onset, pitch) order.
    pub fn bar_notes(&self, b: usize) -> &[GridNote] {
        let spb = self.semiquavers_per_bar;
        let lo = self.notes.partition_point(|n| n.onset < b as u32 * spb);
        let hi = self.notes.partition_point(|n| n.onset < (b as u32 + 1) * spb);
        &self.notes[lo..hi]
    }

    /// Shift every pitch by `k` semitones; notes leaving [0,127] are dropped.
    pub fn transpose(&self, k: i32) -> QuantizedScore {
        let notes = self
            .notes
            .iter()
            .filter_map(|n| {
                let p = n.pitch as i32 + k;
                (0..128).contains(&p).then_some(GridNote { pitch: p as u8, ..*n })
            })
            .collect();
        QuantizedScore::from_notes_with_bars(self.time_signature, notes, self.bars.len())
            .with_timing(self.ticks_per_quarter, self.tempo_us_per_quarter)
    }
}

/// Round `num / den` to the nearest integer, exact halves going down.
fn round_half_down(num: u64, den: u64) -> u64 {
    let q = num / den;
    let r = num % den;
    if 2 * r > den {
        q + 1
    } else {
        q
    }
}

pub fn quantize(score: &Score) -> QuantizedScore {
    let tpq = score.ticks_per_quarter as u64;
    let notes = score
        .notes()
        .iter()
        .map(|n| GridNote {
            pitch: n.pitch,
            onset: round_half_down(n.onset as u64 * 4, tpq) as u32,
            duration: round_half_down(n.duration as u64 * 4, tpq).max(1) as u32,
            velocity: n.velocity,
        })
        .collect();
    let spb = score.time_signature.semiquavers_per_bar();
    let end_steps = round_half_down(score.end_tick() as u64 * 4, tpq) as u32;
    QuantizedScore::from_notes_with_bars(score.time_signature, notes, end_steps.div_ceil(spb) as usize)
        .with_timing(score.ticks_per_quarter, score.tempo_us_per_quarter)
}

/// Map grid positions back to ticks (nearest tick), all on track 0.
pub fn dequantize(q: &QuantizedScore) -> Score {
    let tpq = q.ticks_per_quarter as u64;
    let to_ticks = |steps: u32| ((steps as u64 * tpq + 2) / 4) as u32;
    let notes = q
        .notes()
        .iter()
        .map(|n| MidiNote {
            pitch: n.pitch,
            onset: to_ticks(n.onset),
            duration: to_ticks(n.duration).max(1),
            velocity: n.velocity,
            track: 0,
        })
        .collect();
    Score::new(q.ticks_per_quarter, q.time_signature, notes)
        .expect("grid notes are valid")
        .with_tempo(q.tempo_us_per_quarter)
        .with_length(to_ticks(q.total_steps()))
}
