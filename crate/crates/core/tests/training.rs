use std::path::Path;

use cfclip_core::backends::{make_toy_suite, read_latents, write_latents, Dims};
use cfclip_core::training::{
    checkpoint_path, parse_variants, read_metrics, resume, run_ablation, train, Checkpoint, TrainConfig,
    Trainer,
};
use cfclip_core::Error;

fn config(out: &Path, extra: &[&str]) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_overrides(&[
        "iterations=12",
        "checkpoint_every=5",
        "optimizer.lr=0.01",
        &format!("output_dir={}", out.display()),
    ])
    .unwrap();
    cfg.apply_overrides(extra).unwrap();
    cfg
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let a = train(config(&dir.path().join("a"), &[]), &suite).unwrap();
    let b = train(config(&dir.path().join("b"), &[]), &suite).unwrap();
    let (ma, mb) = (std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    let (ca, cb) = (
        Checkpoint::load(&a.final_checkpoint).unwrap(),
        Checkpoint::load(&b.final_checkpoint).unwrap(),
    );
    assert_eq!((ca.params, ca.optim), (cb.params, cb.optim));
    let c = train(config(&dir.path().join("c"), &["master_seed=1"]), &suite).unwrap();
    assert_ne!(std::fs::read(&c.metrics).unwrap(), ma);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let out = dir.path().join("run");
    let full = train(config(&out, &[]), &suite).unwrap();
    let reference = read_metrics(&full.metrics).unwrap();
    assert_eq!(reference.len(), 12);

    let ck = Checkpoint::load(&checkpoint_path(&out, 5)).unwrap();
    assert_eq!(ck.step, 5);
    let mut trainer = Trainer::resume(ck.clone(), &suite).unwrap();
    let next = trainer.step().unwrap();
    assert_eq!(next.to_line(), reference[5].to_line());
    assert_eq!(next.loss_total.to_bits(), reference[5].loss_total.to_bits());

    let again = resume(ck, &suite).unwrap();
    let resumed = read_metrics(&again.metrics).unwrap();
    assert_eq!(resumed, reference);
    assert_eq!(again.eval, full.eval);
}

#[test]
fn backend_weights_are_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(4, Dims::TOY).unwrap();
    let before = suite.checksum();
    train(config(dir.path(), &["backend.seed=4"]), &suite).unwrap();
    assert_eq!(suite.checksum(), before);
}

#[test]
fn cold_start_without_perturbation_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let cfg = config(dir.path(), &["init.epsilon=0", "aug.kind=none"]);
    let err = train(cfg, &suite).unwrap_err();
    assert!(matches!(err, Error::DegenerateQuery { step: 1 }), "{err}");
}

#[test]
fn zero_init_first_step_has_no_travel() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let mut trainer = Trainer::new(config(dir.path(), &["init.epsilon=0"]), &suite).unwrap();
    let r = trainer.step().unwrap();
    assert_eq!(r.loss_l2, 0.0);
    assert!(r.loss_total.is_finite());
}

#[test]
fn inverted_latents_cycle_in_shuffled_order() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let codes: Vec<_> = (0..3).map(|s| suite.sample_latent(s).unwrap()).collect();
    let file = dir.path().join("codes.cflt");
    write_latents(&file, &codes).unwrap();
    let codes = read_latents(&file).unwrap();
    let cfg = config(
        &dir.path().join("run"),
        &["latent.source=inverted", &format!("latent.path={}", file.display())],
    );
    let trainer = Trainer::new(cfg, &suite).unwrap();
    // batch 2 over 3 codes: steps 1..=3 cover two full epochs
    let mut seen: Vec<_> = (1..=3).flat_map(|s| trainer.batch_for(s).unwrap()).collect();
    let second = seen.split_off(3);
    for epoch in [&seen, &second] {
        for c in &codes {
            assert_eq!(epoch.iter().filter(|x| *x == c).count(), 1);
        }
    }
    assert_eq!(trainer.batch_for(2).unwrap(), trainer.batch_for(2).unwrap());
}

#[test]
fn ablation_runs_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let base = config(dir.path(), &["iterations=4", "checkpoint_every=0"]);
    let variants = parse_variants("nce loss=nce\nglobal loss=global\ndirectional loss=directional\n").unwrap();
    let report = run_ablation(&base, &variants, &suite).unwrap();
    assert_eq!(report.rows.len(), 3);
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().count(), 4);
    for v in ["nce", "global", "directional"] {
        let row = report.row(v).unwrap();
        assert_eq!(row.last.step, 4);
        assert!(dir.path().join(v).join("metrics.tsv").exists());
    }
    let only = run_ablation(&base, &[], &suite).unwrap();
    assert_eq!(only.rows[0].variant, "base");

    let bad = parse_variants("x optimizer.lr=1").unwrap();
    assert!(matches!(run_ablation(&base, &bad, &suite), Err(Error::UnknownVariant(_))));
}

#[test]
fn divergence_is_reported_as_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let err = train(config(dir.path(), &["optimizer.lr=1e300"]), &suite).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}
