use musicdiff::fragmentation::{
    eval_fragmentation, fragment_bars, propose_on_bars, ssim_loss, total_mass, train_fragmenter, train_gd, window_features,
    windows_non_overlapping, FragConfig, FragModel, SectionAnnotation, Strategy, WindowScorer, NUM_FEATURES,
};
use musicdiff::notation::{EventBar, NUM_SECTIONS};
use musicdiff::synth::section_corpus;
use proptest::prelude::*;

/// Scorer backed by an explicit (start, size) → probabilities table.
struct TableScorer {
    probs: Vec<Vec<[f64; NUM_SECTIONS]>>,
    max: usize,
}

impl TableScorer {
    fn new(n: usize, max: usize, raw: &[f64]) -> Self {
        let mut it = raw.iter().cycle();
        let probs = (0..n)
            .map(|_| {
                (0..max)
                    .map(|_| {
                        let mut p = [0.0; NUM_SECTIONS];
                        p.iter_mut().for_each(|x| *x = *it.next().unwrap());
                        let s: f64 = p.iter().sum();
                        p.map(|x| x / s)
                    })
                    .collect()
            })
            .collect();
        TableScorer { probs, max }
    }
}

impl WindowScorer for TableScorer {
    fn class_probs(&self, _bars: &[EventBar], start: usize, size: usize) -> [f64; NUM_SECTIONS] {
        self.probs[start][size - 1]
    }
    fn max_window_bars(&self) -> usize {
        self.max
    }
}

/// Best total mass over every legal placement of `m` windows, by enumeration.
fn brute_best(s: &TableScorer, n: usize, m: usize, from: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for start in from..n {
        for size in 1..=s.max.min(n - start) {
            let p = s.probs[start][size - 1];
            let mass = p.iter().cloned().fold(0.0, f64::max) * size as f64;
            let rest = brute_best(s, n, m - 1, start + size);
            best = best.max(mass + rest);
        }
    }
    best
}

fn blank_bars(n: usize) -> Vec<EventBar> {
    vec![EventBar { chord: 48, notes: Vec::new() }; n]
}

proptest! {
    #[test]
    fn global_search_is_exact_and_dominates_greedy(
        n in 1usize..9,
        max in 1usize..5,
        m in 1usize..4,
        raw in prop::collection::vec(0.01f64..1.0, 37),
    ) {
        prop_assume!(m <= n);
        let scorer = TableScorer::new(n, max, &raw);
        let bars = blank_bars(n);
        let global = propose_on_bars(&scorer, &bars, m, Strategy::Global).unwrap();
        let greedy = propose_on_bars(&scorer, &bars, m, Strategy::L2r).unwrap();
        for ws in [&global, &greedy] {
            prop_assert_eq!(ws.len(), m);
            prop_assert!(windows_non_overlapping(ws));
            prop_assert!(ws.iter().all(|w| w.start() >= 0.0 && w.end() <= (n * 16) as f64 && (w.size_bars as usize) <= max));
        }
        let exact = brute_best(&scorer, n, m, 0);
        prop_assert!((total_mass(&global) - exact).abs() <= 1e-12 * exact.max(1.0));
        prop_assert!(total_mass(&global) >= total_mass(&greedy));
    }

    #[test]
    fn annotations_partition_the_piece(n in 1usize..10, raw in prop::collection::vec(0.01f64..1.0, 23)) {
        let scorer = TableScorer::new(n, 4, &raw);
        let sections = fragment_bars(&scorer, &blank_bars(n), 8, Strategy::Global, 1e-3);
        prop_assert_eq!(sections.first().unwrap().start, 0);
        prop_assert_eq!(sections.last().unwrap().end, n as u32 * 16);
        for w in sections.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].label != w[1].label);
        }
        prop_assert!(sections.iter().all(|s| s.start < s.end));
    }

    #[test]
    fn ssim_loss_is_bounded(a in prop::collection::vec(-1e3f64..1e3, 1..32), b in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        let n = a.len().min(b.len());
        let v = ssim_loss(&a[..n], &b[..n]).unwrap();
        prop_assert!((0.0..=2.0).contains(&v), "{}", v);
    }

    #[test]
    fn class_probabilities_are_distributions(seed in any::<u64>(), start in 0usize..3, size in 1usize..4) {
        let model = FragModel::new(FragConfig { seed, ..Default::default() });
        let piece = &section_corpus(1, seed)[0];
        prop_assume!(start + size <= piece.bars.len());
        let p = model.classify_window(&window_features(&piece.bars, start, size));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn constant_sequence_reference_value() {
    let v = ssim_loss(&[60.0; 4], &[72.0; 4]).unwrap();
    let expect = 1.0 - (2.0 * 60.0 * 72.0 + 1e-4) * 9e-4 / ((60.0f64.powi(2) + 72.0f64.powi(2) + 1e-4) * 9e-4);
    assert!((v - expect).abs() < 1e-15);
    assert!((v - 0.016394).abs() < 1e-6);
}

#[test]
fn gradient_descent_decreases_the_loss_every_step() {
    let corpus: Vec<_> = section_corpus(10, 5).iter().map(|p| p.frag_piece()).collect();
    let mut model = FragModel::new(FragConfig::default());
    let trace = train_gd(&mut model, &corpus, 100, 1e-2).unwrap();
    for (i, w) in trace.windows(2).enumerate() {
        assert!(w[1] <= w[0], "loss rose at step {}: {} -> {}", i + 1, w[0], w[1]);
    }
    assert!(trace[99] < trace[0]);
}

#[test]
fn trained_model_recovers_synthetic_sections() {
    let config = FragConfig { epochs: 150, ..Default::default() };
    let train: Vec<_> = section_corpus(30, 21).iter().map(|p| p.frag_piece()).collect();
    let (model, _) = train_fragmenter(&train, config).unwrap();
    let test = section_corpus(20, 22);

    let mut correct = 0;
    let mut total = 0;
    for p in &test {
        for s in &p.sections {
            let (start, size) = ((s.start / 16) as usize, (s.len() / 16) as usize);
            let probs = model.classify_window(&window_features(&p.bars, start, size));
            let best = (0..NUM_SECTIONS).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
            correct += (best == s.label as usize) as usize;
            total += 1;
        }
    }
    assert!(correct as f64 / total as f64 >= 0.99, "section accuracy {correct}/{total}");

    let preds: Vec<_> = test.iter().map(|p| fragment_bars(&model, &p.bars, 8, Strategy::Global, 1e-3)).collect();
    let gt: Vec<_> = test.iter().map(|p| p.sections.clone()).collect();
    let report = eval_fragmentation(&preds, &gt).unwrap();
    assert!(report.rmse < 16.0, "boundary RMSE {} steps", report.rmse);
}

#[test]
fn disjoint_predictions_score_zero_iou() {
    let pred = vec![vec![SectionAnnotation { start: 0, end: 16, label: 0 }]];
    let gt = vec![vec![SectionAnnotation { start: 16, end: 32, label: 1 }]];
    let r = eval_fragmentation(&pred, &gt).unwrap();
    assert_eq!(r.iou, 0.0);
    assert_eq!(r.uar, 0.0);
    assert_eq!(NUM_FEATURES, 31);
}
