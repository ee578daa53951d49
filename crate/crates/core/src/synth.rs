//! Small generated corpora with known structure.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fragmentation::{FragPiece, SectionAnnotation};
use crate::notation::{ChordLabel, EventBar, EventNote, Quality, NUM_SECTIONS};

const STEPS: u32 = 16;

/// A piece with its ground-truth sections.
#[derive(Debug, Clone)]
pub struct AnnotatedPiece {
    pub bars: Vec<EventBar>,
    pub sections: Vec<SectionAnnotation>,
}

impl AnnotatedPiece {
    pub fn frag_piece(&self) -> FragPiece {
        FragPiece { bars: self.bars.clone(), sections: self.sections.clone() }
    }
}

/// Eight-bar phrases: four bars over I-IV-V-I in one key, played twice, as
/// eighth-note arpeggios of the chord tones. One key and contour per phrase.
pub fn toy_phrases(count: usize) -> Vec<AnnotatedPiece> {
    const KEYS: [u8; 8] = [0, 2, 4, 5, 7, 9, 11, 3];
    const CONTOURS: [[usize; 8]; 4] =
        [[0, 1, 2, 3, 2, 1, 0, 1], [2, 1, 0, 1, 2, 3, 2, 1], [0, 2, 1, 3, 0, 2, 1, 3], [3, 2, 1, 0, 1, 2, 3, 2]];
    (0..count)
        .map(|i| {
            let key = KEYS[i % KEYS.len()];
            let contour = CONTOURS[i % CONTOURS.len()];
            let degrees = [0u8, 5, 7, 0];
            let phrase: Vec<EventBar> = degrees
                .iter()
                .enumerate()
                .map(|(b, &deg)| {
                    let chord = ChordLabel::new((key + deg) % 12, Quality::Major);
                    let root = 48 + ((key + deg) % 12);
                    let tones = [root, root + 4, root + 7, root + 12];
                    let notes = (0..8)
                        .map(|k| EventNote { position: (2 * k) as u8, pitch: tones[contour[(k + b) % 8]], duration: 2, velocity: 80 })
                        .collect();
                    EventBar { chord: chord.index(), notes }
                })
                .collect();
            let bars: Vec<EventBar> = phrase.iter().chain(phrase.iter()).cloned().collect();
            let sections = vec![
                SectionAnnotation { start: 0, end: 4 * STEPS, label: 0 },
                SectionAnnotation { start: 4 * STEPS, end: 8 * STEPS, label: 1 },
            ];
            AnnotatedPiece { bars, sections }
        })
        .collect()
}

/// Statistics of one section class: a pitch-class set and an onset grid.
fn class_profile(label: u8) -> (Vec<u8>, Vec<u8>) {
    let root = (label * 5) % 12;
    let pcs = [0u8, 2, 4].iter().map(|i| (root + i) % 12).collect();
    let positions: Vec<u8> = match label % 5 {
        0 => (0..16).collect(),
        1 => (0..16).step_by(2).collect(),
        2 => (0..16).step_by(4).collect(),
        3 => vec![0, 3, 6, 8, 11, 14],
        _ => vec![0, 8],
    };
    (pcs, positions)
}

fn class_bar(label: u8, rng: &mut impl Rng) -> EventBar {
    let (pcs, positions) = class_profile(label);
    let register = if label >= 5 { 72 } else { 48 };
    let notes = positions
        .iter()
        .map(|&p| {
            let pc = *pcs.choose(rng).expect("non-empty pitch set");
            EventNote { position: p, pitch: register + pc, duration: 1, velocity: 80 }
        })
        .collect();
    EventBar { chord: crate::notation::NO_CHORD, notes }
}

/// Pieces of 3 to 5 sections, each 2 to 6 bars of one class, with adjacent
/// sections of different classes.
pub fn section_corpus(count: usize, seed: u64) -> Vec<AnnotatedPiece> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n_sections = rng.random_range(3..=5);
            let mut bars = Vec::new();
            let mut sections = Vec::new();
            let mut prev: Option<u8> = None;
            for _ in 0..n_sections {
                let label = loop {
                    let l = rng.random_range(0..NUM_SECTIONS as u8);
                    if Some(l) != prev {
                        break l;
                    }
                };
                prev = Some(label);
                let len = rng.random_range(2..=6u32);
                let start = bars.len() as u32 * STEPS;
                for _ in 0..len {
                    bars.push(class_bar(label, &mut rng));
                }
                sections.push(SectionAnnotation { start, end: start + len * STEPS, label });
            }
            AnnotatedPiece { bars, sections }
        })
        .collect()
}
