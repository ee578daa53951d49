mod support;

use musicdiff::fragmentation::SectionAnnotation;
use musicdiff::midi::{Bar, GridNote, QuantizedScore, TimeSignature};
use musicdiff::notation::{
    align_triplets, decode_cp, decode_remi, encode_cp, encode_remi, make_triplets, recognize_chord, recognize_chords, ChordLabel,
    EventStream, Notation, Quality, TokenKind, MAX_POSITIONS, NUM_CHORDS,
};
use proptest::prelude::*;

fn bar_of(pitches: &[u8]) -> Bar {
    let notes = pitches.iter().enumerate().map(|(i, &pitch)| GridNote { pitch, onset: i as u32, duration: 1, velocity: 90 }).collect();
    QuantizedScore::from_notes_with_bars(TimeSignature::COMMON, notes, 1).bars()[0].clone()
}

/// Exhaustive reference: score every (root, quality) triad independently.
fn reference_chord(pitches: &[u8]) -> Option<(u8, Quality)> {
    if pitches.is_empty() {
        return None;
    }
    let mut best: Option<(f64, u8, Quality)> = None;
    for quality in Quality::ALL {
        for root in 0..12u8 {
            let tones: Vec<u8> = quality.intervals().iter().map(|i| (root + i) % 12).collect();
            let score: f64 = pitches.iter().map(|p| if tones.contains(&(p % 12)) { 1.0 } else { -0.5 }).sum();
            let index = ChordLabel::new(root, quality).index();
            let better = match best {
                None => true,
                Some((s, r, q)) => score > s || (score == s && index < ChordLabel::new(r, q).index()),
            };
            if better {
                best = Some((score, root, quality));
            }
        }
    }
    best.filter(|b| b.0 > 0.0).map(|(_, r, q)| (r, q))
}

#[test]
fn triads_are_named() {
    let c = recognize_chord(&bar_of(&[60, 64, 67])).unwrap();
    assert_eq!((c.root, c.quality), (0, Quality::Major));
    let a = recognize_chord(&bar_of(&[57, 60, 64])).unwrap();
    assert_eq!((a.root, a.quality), (9, Quality::Minor));
    assert_eq!(recognize_chord(&bar_of(&[])), None);
    assert_eq!(NUM_CHORDS, 48);
}

proptest! {
    #[test]
    fn chord_recognition_matches_template_search(pitches in prop::collection::vec(0u8..128, 0..12)) {
        let pitches: Vec<u8> = { let mut p = pitches; p.sort(); p.dedup(); p };
        let got = recognize_chord(&bar_of(&pitches)).map(|c| (c.root, c.quality));
        prop_assert_eq!(got, reference_chord(&pitches));
    }

    #[test]
    fn remi_and_cp_round_trip(seed in any::<u64>()) {
        let q = support::random_score(&mut support::rng(seed), 12);
        let chords = recognize_chords(&q);
        prop_assert_eq!(decode_remi(&encode_remi(&q, &chords).unwrap()).unwrap(), q.clone());
        prop_assert_eq!(decode_cp(&encode_cp(&q, &chords).unwrap()).unwrap(), q.clone());
        for notation in [Notation::Remi, Notation::Cp] {
            let s = EventStream::encode(notation, &q, &chords).unwrap();
            prop_assert_eq!(&EventStream::from_text(notation, &s.to_text()).unwrap(), &s);
            prop_assert_eq!(&EventStream::from_binary(notation, &s.to_binary()).unwrap(), &s);
        }
    }

    #[test]
    fn remi_stream_follows_the_grammar(seed in any::<u64>()) {
        let q = support::random_score(&mut support::rng(seed), 8);
        let tokens = encode_remi(&q, &recognize_chords(&q)).unwrap();
        prop_assert_eq!(tokens.iter().filter(|t| t.kind == TokenKind::Bar).count(), q.num_bars());
        prop_assert_eq!(tokens.iter().filter(|t| t.kind == TokenKind::Pitch).count(), q.notes().len());
        for w in tokens.windows(2) {
            if w[1].kind == TokenKind::Chord {
                prop_assert_eq!(w[0].kind, TokenKind::Bar);
            }
        }
    }

    #[test]
    fn one_triplet_per_pitch_token(seed in any::<u64>(), cut in 0u32..4) {
        let q = support::random_score(&mut support::rng(seed), 8);
        let chords = recognize_chords(&q);
        let total = q.total_steps();
        let split = (cut * 16).min(total);
        let sections: Vec<SectionAnnotation> = [(0, split, 1u8), (split, total, 2u8)].into_iter()
            .filter(|(s, e, _)| s < e)
            .map(|(start, end, label)| SectionAnnotation { start, end, label })
            .collect();
        for notation in [Notation::Remi, Notation::Cp] {
            let stream = EventStream::encode(notation, &q, &chords).unwrap();
            let triplets = make_triplets(&stream, &sections).unwrap();
            prop_assert_eq!(triplets.len(), q.notes().len());
        }
        let aligned = align_triplets(&EventStream::encode(Notation::Remi, &q, &chords).unwrap().bars().unwrap(), MAX_POSITIONS, &sections).unwrap();
        for a in aligned {
            let expected = if a.onset < split { 1 } else { 2 };
            prop_assert_eq!(a.triplet.section, expected);
            prop_assert_eq!(a.triplet.chord, ChordLabel::token_value(chords[a.bar]));
        }
    }
}

#[test]
fn boundary_note_belongs_to_the_later_section() {
    let q = QuantizedScore::from_notes(TimeSignature::COMMON, vec![GridNote { pitch: 60, onset: 16, duration: 4, velocity: 90 }]);
    let sections = [SectionAnnotation { start: 0, end: 16, label: 0 }, SectionAnnotation { start: 16, end: 32, label: 3 }];
    let stream = EventStream::encode(Notation::Remi, &q, &recognize_chords(&q)).unwrap();
    let t = make_triplets(&stream, &sections).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].section, 3);
}
