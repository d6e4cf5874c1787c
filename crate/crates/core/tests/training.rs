use plin_core::nn::{CascadeConfig, TrainConfig, Trainer, TrainingSample};
use plin_core::synth::{make_sample, RandomSceneConfig};

fn samples(n: u64) -> Vec<TrainingSample> {
    let config = RandomSceneConfig::default();
    (0..n)
        .map(|s| make_sample(&config.sample(s).unwrap()).unwrap().0.training_sample(0.5).unwrap())
        .collect()
}

fn close(actual: f64, pinned: f64) -> bool {
    ((actual - pinned) / pinned).abs() <= 1e-6
}

/// Losses recorded from the tiny cascade on 32 default scenes with the
/// default schedule and seed 0: `(step, coarse, refined, total)`.
const PINNED_STEPS: [(u64, f64, f64, f64); 6] = [
    (1, 3019.072998046875, 3037.4345703125, 3339.3418701171877),
    (2, 2631.133544921875, 2693.7998046875, 2956.9131591796877),
    (32, 3207.447998046875, 3295.871337890625, 3616.6161376953123),
    (160, 2935.6826171875, 2973.497802734375, 3267.066064453125),
    (161, 3073.98486328125, 3080.428955078125, 3387.82744140625),
    (320, 3042.176513671875, 3145.818603515625, 3450.0362548828125),
];

/// Mean total loss of each epoch of the same run.
const PINNED_EPOCH_MEANS: [f64; 10] = [
    3246.3582725524902,
    3239.080486297608,
    3227.725919342041,
    3218.979468536377,
    3209.7199760437015,
    3204.707608032226,
    3203.1828552246097,
    3201.6413520812994,
    3199.501903533936,
    3198.8585449218745,
];

#[test]
fn default_schedule_trace_matches_pinned_oracle() {
    let mut trainer = Trainer::new(&CascadeConfig::tiny(), TrainConfig::default()).unwrap();
    trainer.fit(&samples(32)).unwrap();
    let trace = trainer.trace();
    assert_eq!(trace.len(), 320);
    for (step, coarse, refined, total) in PINNED_STEPS {
        let r = &trace[step as usize - 1];
        assert_eq!(r.step, step);
        assert!(close(r.coarse, coarse) && close(r.refined, refined) && close(r.total, total), "step {step}: {r:?}");
    }
    for (epoch, pinned) in PINNED_EPOCH_MEANS.iter().enumerate() {
        let mean = trace.iter().filter(|r| r.epoch == epoch).map(|r| r.total).sum::<f64>() / 32.0;
        assert!(close(mean, *pinned), "epoch {epoch}: {mean}");
    }
    assert!(trace.iter().all(|r| r.lr == if r.epoch < 5 { 1e-5 } else { 1e-5 * 0.1 }));
}

#[test]
fn two_hundred_steps_on_three_samples_halve_the_loss() {
    let data = samples(3);
    let mut trainer = Trainer::new(&CascadeConfig::tiny(), TrainConfig::default()).unwrap();
    let mut epoch = 0;
    'outer: loop {
        for (i, flip) in trainer.epoch_plan(epoch, data.len()) {
            if trainer.trace().len() == 200 {
                break 'outer;
            }
            let sample = if flip { data[i].flipped() } else { data[i].clone() };
            trainer.train_step(&sample, epoch).unwrap();
        }
        epoch += 1;
    }
    let trace = trainer.trace();
    let first = trace[0].total;
    // One pass over the three samples at the end of the run.
    let last = trace[197..].iter().map(|r| r.total).sum::<f64>() / 3.0;
    assert!(last <= 0.5 * first, "step 1 {first}, last three steps {last}");
}
