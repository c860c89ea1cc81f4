use mcl_core::data::{synth_generate_with, Dataset, Split, SynthParams};
use mcl_core::eval::evaluate;
use mcl_core::geometry::{clusters_for_pattern, LabelingPattern};
use mcl_core::loss::{perturb_weights, weights_from_errors, ModelKind};
use mcl_core::network::model_to_bytes;
use mcl_core::train::{
    perturbation_study, pretrain_bm, run_full_pipeline, validation_errors, weighting_finetune, PipelineConfig,
    StageConfig,
};

fn synth(count: usize, seed: u64, split: Split) -> Dataset {
    synth_generate_with(LabelingPattern::Five, count, seed, &SynthParams::default(), split).unwrap()
}

fn short(paper: StageConfig, iterations: usize, batch: usize) -> StageConfig {
    StageConfig::scaled(&paper, iterations, batch)
}

fn tiny() -> PipelineConfig {
    PipelineConfig {
        pretrain: short(StageConfig::paper_pretrain(), 12, 4),
        weighting: short(StageConfig::paper_finetune(), 6, 4),
        multicenter: short(StageConfig::paper_finetune(), 8, 4),
        alpha: 125.0,
    }
}

#[test]
fn pretraining_fits_a_fixed_batch() {
    // Eight faces with batch 8: every step sees the same batch.
    let train = synth(8, 31, Split::Train);
    let val = synth(8, 32, Split::Val);
    let cfg = StageConfig {
        check_every: 100,
        lr_decay_every: 100,
        ..short(StageConfig::paper_pretrain(), 100, 8)
    };
    let (_, r) = pretrain_bm(&train, &val, &cfg, 3).unwrap();
    assert_eq!(r.losses.len(), 100);
    let first = r.losses[0];
    let late = r.losses[90..].iter().copied().fold(f64::INFINITY, f64::min);
    assert!(late < 0.5 * first, "loss {first} -> {late}");
}

#[test]
fn same_seed_gives_identical_models() {
    let (train, val) = (synth(12, 1, Split::Train), synth(6, 2, Split::Val));
    let (a, ra) = run_full_pipeline(&train, &val, &tiny(), 9).unwrap();
    let (b, rb) = run_full_pipeline(&train, &val, &tiny(), 9).unwrap();
    assert_eq!(ra, rb);
    for (x, y) in [(&a.bm, &b.bm), (&a.wm, &b.wm), (&a.am, &b.am)] {
        assert_eq!(model_to_bytes(x), model_to_bytes(y));
    }
    let (c, _) = run_full_pipeline(&train, &val, &tiny(), 10).unwrap();
    assert_ne!(model_to_bytes(&a.bm), model_to_bytes(&c.bm));
}

#[test]
fn pipeline_reports_and_assembles() {
    let (train, val) = (synth(12, 3, Split::Train), synth(6, 4, Split::Val));
    let (m, rows) = run_full_pipeline(&train, &val, &tiny(), 5).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["BM", "WM", "AM"]);
    let part = clusters_for_pattern(LabelingPattern::Five);
    assert_eq!(m.heads.len(), part.len());
    assert_eq!(m.profile_b.source, ModelKind::Basic);
    assert_eq!(m.profile_w.source, ModelKind::Weighting);
    // Each landmark's columns come from its cluster's head.
    let am = &m.am.heads()[0].value;
    let cols = am.dims()[1];
    for (i, cluster) in part.clusters().iter().enumerate() {
        for &j in cluster {
            for r in 0..am.dims()[0] {
                for c in [2 * j, 2 * j + 1] {
                    assert_eq!(am.data()[r * cols + c], m.heads[i].data()[r * cols + c]);
                }
            }
        }
    }
    // Checkpoint selection never hands back something worse than its start.
    for s in &m.stages {
        assert!(s.best_val_error <= s.initial_val_error, "{}", s.stage);
    }
}

#[test]
fn evaluation_ignores_sample_order() {
    let (train, val) = (synth(12, 5, Split::Train), synth(9, 6, Split::Val));
    let (bm, _) = pretrain_bm(&train, &val, &tiny().pretrain, 1).unwrap();
    let mut reversed = val.samples.clone();
    reversed.reverse();
    let reversed = Dataset::new(val.pattern, val.split, reversed).unwrap();
    let a = evaluate(&bm, 0, &val).unwrap();
    let b = evaluate(&bm, 0, &reversed).unwrap();
    assert!((a.mean_error - b.mean_error).abs() < 1e-12);
    assert_eq!(a.failure_rate, b.failure_rate);
    let mut x = a.per_sample_mean_errors.clone();
    let mut y = b.per_sample_mean_errors.clone();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    assert_eq!(x, y);
}

#[test]
fn zero_perturbation_reproduces_the_weighting_model() {
    let (train, val) = (synth(12, 7, Split::Train), synth(6, 8, Split::Val));
    let cfg = tiny();
    let (bm, _) = pretrain_bm(&train, &val, &cfg.pretrain, 2).unwrap();
    let mut profile = validation_errors(&bm, 0, &val).unwrap();
    profile.source = ModelKind::Basic;
    let base = weights_from_errors(&profile).unwrap();
    assert_eq!(perturb_weights(&base, 0.0, 4).unwrap().u, base.u);

    let w = weighting_finetune(&bm, &train, &val, &cfg.weighting, 4).unwrap();
    let rows = perturbation_study(&bm, &train, &val, &cfg.weighting, &[0.0], &[4]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_error, evaluate(&w.wm, 0, &val).unwrap().mean_error);
    assert!(perturbation_study(&bm, &train, &val, &cfg.weighting, &[-0.1], &[4]).is_err());
}
