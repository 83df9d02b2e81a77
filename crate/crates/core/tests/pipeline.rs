//! Behavioural checks of the full pipeline on small synthetic worlds.

use progalign::data_io::Config;
use progalign::tensor::Parameterized;
use progalign::pseudo_labeler::SourceModel;
use progalign::rehearse_pipeline::{evaluate, initial_params, run_pipeline, train_source_models, PipelineData};

const SEEDS: [u64; 3] = [1, 2, 3];

fn small(seed: u64) -> Config {
    Config {
        classes: 6,
        samples_per_class: 20,
        stages: 2,
        seed,
        ..Config::default()
    }
}

fn zero_shot(cfg: &Config) -> f64 {
    let (data, truth) = PipelineData::<f32>::synthetic(cfg).unwrap();
    evaluate(&data.encoder, &initial_params(cfg).unwrap(), &data.target.samples, &truth).unwrap()
}

#[test]
fn zero_shot_accuracy_falls_as_shift_grows() {
    let means: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&shift| {
            SEEDS
                .iter()
                .map(|&seed| zero_shot(&Config { shift, classes: 12, samples_per_class: 60, ..small(seed) }))
                .sum::<f64>()
                / SEEDS.len() as f64
        })
        .collect();
    println!("zero-shot by shift: {means:?}");
    assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
}

// noise-free styled sources: classes stay separable, but only after the
// prompts and PEFT absorb the style shift
#[test]
fn source_models_fit_their_domains() {
    for seed in SEEDS {
        let cfg = Config { shift: 1.0, noise: 0.0, source_epochs: 40, lr_max: 1e-2, ..small(seed) };
        let (data, _) = PipelineData::<f32>::synthetic(&cfg).unwrap();
        for m in train_source_models(&cfg, &data).unwrap() {
            assert!(m.source_accuracy >= 0.95, "seed {seed} domain {}: {}", m.domain, m.source_accuracy);
            let (first, last) = (m.loss_curve[0], *m.loss_curve.last().unwrap());
            assert!(last < first, "loss did not fall: {:?}", m.loss_curve);
        }
    }
}

#[test]
fn source_training_is_deterministic() {
    let cfg = Config { source_epochs: 2, ..small(9) };
    let (data, _) = PipelineData::<f32>::synthetic(&cfg).unwrap();
    let sums = |ms: Vec<SourceModel<f32>>| -> Vec<(String, String)> {
        ms.iter().map(|m| (m.bank.checksum(), m.peft.checksum())).collect()
    };
    let a = sums(train_source_models(&cfg, &data).unwrap());
    let b = sums(train_source_models(&cfg, &data).unwrap());
    assert_eq!(a, b);
}

#[test]
fn single_stage_trains_every_class_without_rehearsal() {
    let cfg = Config { stages: 1, ..small(4) };
    let (data, _) = PipelineData::<f32>::synthetic(&cfg).unwrap();
    let run = run_pipeline(&cfg, &data).unwrap();
    assert_eq!(run.state.schedule.clusters, vec![(0..cfg.classes).collect::<Vec<_>>()]);
    let s = &run.state.summaries[0];
    assert_eq!(s.classes.len(), cfg.classes);
    assert_eq!(s.pool_rehearsed, 0);
    // every accepted initial label enters the pool
    let accepted = run.state.initial.iter().filter(|r| r.accepted).count();
    assert_eq!(s.pool_fresh, accepted);
}

#[test]
fn adaptation_improves_over_zero_shot_on_a_shifted_target() {
    let cfg = Config { shift: 1.0, ..small(1) };
    let (data, truth) = PipelineData::<f32>::synthetic(&cfg).unwrap();
    let before = evaluate(&data.encoder, &initial_params(&cfg).unwrap(), &data.target.samples, &truth).unwrap();
    let run = run_pipeline(&cfg, &data).unwrap();
    let after = evaluate(&data.encoder, &run.params, &data.target.samples, &truth).unwrap();
    println!("zero-shot {before:.3} adapted {after:.3}");
    assert!(after > before, "{before} -> {after}");
}
