use musicdiff::config::Config;
use musicdiff::denoiser::Denoiser;
use musicdiff::embedding::SemanticEncoders;
use musicdiff::optim::EpochPolicy;
use musicdiff::synth::toy_phrases;
use musicdiff::train::{train_epochs, DiffusionPiece, TrainConfig, Trainer};

fn setup(pareto: bool, per_item: bool) -> (Trainer, Vec<DiffusionPiece>) {
    let mut config = Config::default();
    config.model.dim = 8;
    config.model.layers = 1;
    config.schedule.steps = 10;
    let frozen = SemanticEncoders::new(config.jsp_config()).frozen();
    let den = Denoiser::new(config.denoiser(), config.noise_schedule().unwrap());
    let corpus = toy_phrases(4).iter().map(|p| DiffusionPiece::from_bars(&p.bars, &p.sections).unwrap()).collect();
    let tc = TrainConfig { batch: 3, pareto, pareto_per_item: per_item, ..Default::default() };
    (Trainer::new(den, frozen, tc), corpus)
}

#[test]
fn multipliers_form_a_distribution_in_every_mode() {
    for (pareto, per_item) in [(true, false), (true, true), (false, false)] {
        let (mut tr, corpus) = setup(pareto, per_item);
        for _ in 0..3 {
            let r = tr.step(&corpus, 1e-3).unwrap();
            assert!((r.multipliers.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.multipliers.iter().all(|&w| w >= 0.0));
            assert!(r.regression.is_finite() && r.kl.iter().all(|k| k.is_finite() && *k >= -1e-12));
            if !pareto {
                assert_eq!(r.multipliers, [1.0 / 3.0; 3]);
            }
        }
    }
}

#[test]
fn per_item_mode_changes_only_the_weights() {
    let (mut a, corpus) = setup(true, false);
    let (mut b, _) = setup(true, true);
    let (ra, rb) = (a.step(&corpus, 1e-3).unwrap(), b.step(&corpus, 1e-3).unwrap());
    assert_eq!(ra.regression, rb.regression);
    assert_eq!(ra.kl, rb.kl);
}

#[test]
fn epochs_follow_the_decay_policy_and_step_cap() {
    let (mut tr, corpus) = setup(true, false);
    let policy = EpochPolicy { initial_lr: 1e-3, decay_every: 2, ..Default::default() };
    let mut seen = 0;
    let records = train_epochs(&mut tr, &corpus, &policy, 3, Some(14), |_, _, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 14);
    assert_eq!(records.len(), 5);
    assert_eq!(records.last().unwrap().steps, 14);
    for r in &records {
        assert_eq!(r.lr, policy.lr_at(r.epoch));
    }
    assert!((records[2].lr - 6e-4).abs() < 1e-15);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut tr, corpus) = setup(true, true);
        (0..4).map(|_| tr.step(&corpus, 1e-3).unwrap().regression).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
