//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as part of `cargo test`. Failing criteria are reported but do not fail
//! the process unless `CFCLIP_ACCEPTANCE_STRICT=1` is set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cfclip_cli::{cmd_edit, Globals};
use cfclip_core::augmentation::{
    make_views, view_transforms, AugKind, AugmentationConfig, ViewTransform,
};
use cfclip_core::autodiff::{DiffMap, Tape};
use cfclip_core::backends::{make_toy_suite, write_latents, BackendSuite, Dims, Image, LatentCode};
use cfclip_core::geometry::{direction, render_prompts, Direction, DEFAULT_TEMPLATES};
use cfclip_core::losses::{
    build_direction_set, clip_nce_loss, directional_clip_loss, global_clip_loss, graph, identity_loss,
    latent_l2_loss, perceptual_loss, DirectionSet, TextAnchors,
};
use cfclip_core::mapper::MapperParams;
use cfclip_core::rng::rng_for;
use cfclip_core::training::metrics::trailing_mean;
use cfclip_core::training::{
    build_suite, parse_variants, read_metrics, run_ablation, train, Checkpoint, MetricsWriter, StepRecord,
    TrainConfig, Trainer,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn quickstart(out: &Path) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_quickstart.cfg");
    let mut cfg = TrainConfig::load(&path).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_force_nce(q: &[Vec<f64>], kt: &[f64], ki: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for qv in q {
        let qv = unit(qv);
        for pos in [kt, ki] {
            let p = (dot(&qv, &unit(pos)) / tau).exp();
            let denom = p + negs.iter().map(|n| (dot(&qv, &unit(n)) / tau).exp()).sum::<f64>();
            total -= (p / denom).ln();
        }
    }
    total / q.len() as f64
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = rng_for(77, &[]);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let dim = rng.random_range(2..=16);
        let n_neg = rng.random_range(1..=8);
        let n_views = rng.random_range(1..=4);
        let tau = [0.05, 0.1, 0.5][case % 3];
        let mut vec = || (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q: Vec<Vec<f64>> = (0..n_views).map(|_| vec()).collect();
        let (kt, ki) = (vec(), vec());
        let negs: Vec<Vec<f64>> = (0..n_neg).map(|_| vec()).collect();
        let ds = DirectionSet {
            query: q.iter().cloned().map(Direction::unlabelled).collect(),
            pos_text: Direction::unlabelled(kt.clone()),
            pos_image: Direction::unlabelled(ki.clone()),
            negatives: negs.iter().cloned().map(Direction::unlabelled).collect(),
        };
        let got = clip_nce_loss(&ds, tau).unwrap();
        let want = brute_force_nce(&q, &kt, &ki, &negs, tau);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 5.0,
        format!("max relative error {worst:.2e} over 100 sets, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let e = |v: Vec<f64>| Direction::unlabelled(v);
    let ds = DirectionSet {
        query: vec![e(vec![1.0, 0.0])],
        pos_text: e(vec![1.0, 0.0]),
        pos_image: e(vec![1.0, 0.0]),
        negatives: vec![e(vec![0.0, 1.0])],
    };
    let got = clip_nce_loss(&ds, 0.1).unwrap();
    let oracle = 2.0 * (1.0 + (-10.0f64).exp()).ln();
    let err = (got - 9.07978e-5).abs();
    outcome(
        err < 1e-9 && (got - oracle).abs() < 1e-15,
        format!("loss {got:.10e}, |loss - 9.07978e-5| = {err:.2e}"),
    )
}

const FD_STEP: f64 = 1e-5;

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

struct GradFixture {
    suite: BackendSuite,
    w: LatentCode,
    w_edit: Vec<f64>,
    src: Image,
    anchors: TextAnchors,
    target_prompt: &'static str,
}

impl GradFixture {
    fn new() -> Self {
        let suite = make_toy_suite(11, Dims::TOY).unwrap();
        let w = suite.sample_latent(3).unwrap();
        let mut rng = rng_for(5, &[]);
        let w_edit = w.values().iter().map(|a| a + rng.random_range(-0.2..0.2)).collect();
        let src = suite.synthesize(&w).unwrap();
        let target_prompt = "a face with green lipstick";
        let prompts = render_prompts("face", &DEFAULT_TEMPLATES).unwrap();
        let anchors = TextAnchors::encode(&suite, target_prompt, &prompts).unwrap();
        Self {
            suite,
            w,
            w_edit,
            src,
            anchors,
            target_prompt,
        }
    }

    fn image(&self, w: &[f64]) -> Image {
        let code = LatentCode::new(self.w.n_latent(), self.w.dim_w(), w.to_vec()).unwrap();
        self.suite.synthesize(&code).unwrap()
    }

    /// Gradient wrt the edited latent of `build`, recorded on a tape whose
    /// first leaf is the edited latent and second is the generated image.
    fn tape_grad<'s>(
        &'s self,
        build: impl FnOnce(&mut Tape<'s>, cfclip_core::autodiff::Var) -> cfclip_core::autodiff::Var,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.w_edit.clone());
        let img = tape.map(self.suite.generator() as &dyn DiffMap, x).unwrap();
        let loss = build(&mut tape, img);
        tape.backward(loss).get(x)
    }
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let f = GradFixture::new();
    let enc = f.suite.image_encoder() as &dyn DiffMap;
    let e_src = f.suite.encode_image(&f.src).unwrap();
    let target = f.anchors.target.values().to_vec();
    let dt = f.anchors.text_direction().unwrap();
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let mut errs: Vec<(String, f64)> = Vec::new();

    let g = f.tape_grad(|t, img| {
        let e = t.map(enc, img).unwrap();
        let tv = t.leaf(target.clone());
        graph::one_minus_cos(t, e, tv, "global").unwrap()
    });
    let n = central_diff(&f.w_edit, |w| {
        global_clip_loss(f.suite.encode_image(&f.image(w)).unwrap().values(), &target).unwrap()
    });
    errs.push(("global".into(), rel_err(&g, &n)));

    let g = f.tape_grad(|t, img| {
        let e = t.map(enc, img).unwrap();
        let s = t.leaf(e_src.values().to_vec());
        let di = t.sub(e, s).unwrap();
        let tv = t.leaf(dt.values.clone());
        graph::one_minus_cos(t, tv, di, "directional").unwrap()
    });
    let n = central_diff(&f.w_edit, |w| {
        let e = f.suite.encode_image(&f.image(w)).unwrap();
        directional_clip_loss(&dt, &direction(&e_src, &e).unwrap()).unwrap()
    });
    errs.push(("directional".into(), rel_err(&g, &n)));

    let d = f.suite.dims;
    let views = view_transforms(d.height, d.width, d.channels, &AugmentationConfig::default(), 9).unwrap();
    let g = f.tape_grad(|t, img| {
        let s = t.leaf(e_src.values().to_vec());
        let queries: Vec<_> = views
            .iter()
            .map(|v| {
                let px = match v {
                    ViewTransform::Identity => img,
                    ViewTransform::Warp(warp) => t.map(warp, img).unwrap(),
                };
                let e = t.map(enc, px).unwrap();
                t.sub(e, s).unwrap()
            })
            .collect();
        let kt = t.leaf(dt.values.clone());
        let ki = t.leaf(sub(&target, e_src.values()));
        let negs: Vec<_> = f
            .anchors
            .sources
            .iter()
            .map(|n| t.leaf(sub(n.values(), e_src.values())))
            .collect();
        graph::clip_nce(t, &queries, kt, ki, &negs, 0.1).unwrap()
    });
    let n = central_diff(&f.w_edit, |w| {
        let edit = f.image(w);
        let imgs: Vec<Image> = views.iter().map(|v| v.apply(&edit).unwrap()).collect();
        let ds = build_direction_set(&f.suite, f.target_prompt, &f.anchors.prompts, &f.src, &imgs).unwrap();
        clip_nce_loss(&ds, 0.1).unwrap()
    });
    errs.push(("contrastive".into(), rel_err(&g, &n)));

    let mut tape = Tape::new();
    let x = tape.leaf(f.w_edit.clone());
    let w0 = tape.leaf(f.w.values().to_vec());
    let dl = tape.sub(x, w0).unwrap();
    let l2 = tape.norm(dl);
    let g = tape.backward(l2).get(x);
    let n = central_diff(&f.w_edit, |v| {
        latent_l2_loss(&f.w, &LatentCode::new(f.w.n_latent(), f.w.dim_w(), v.to_vec()).unwrap()).unwrap()
    });
    errs.push(("latent_l2".into(), rel_err(&g, &n)));

    let id_net = f.suite.identity_net().unwrap() as &dyn DiffMap;
    let g = f.tape_grad(|t, img| {
        let r = t.map(id_net, img).unwrap();
        let r_src = t.leaf(id_net.forward(f.src.pixels()));
        graph::one_minus_cos(t, r, r_src, "identity").unwrap()
    });
    let n = central_diff(&f.w_edit, |w| identity_loss(&f.suite, &f.image(w), &f.src).unwrap());
    errs.push(("identity".into(), rel_err(&g, &n)));

    let perc_net = f.suite.perceptual_net().unwrap() as &dyn DiffMap;
    let g = f.tape_grad(|t, img| {
        let a = t.map(perc_net, img).unwrap();
        let b = t.leaf(perc_net.forward(f.src.pixels()));
        t.mean_abs_diff(a, b).unwrap()
    });
    let n = central_diff(&f.w_edit, |w| perceptual_loss(&f.suite, &f.image(w), &f.src).unwrap());
    errs.push(("perceptual".into(), rel_err(&g, &n)));

    let params = MapperParams::init(21, f.suite.dims.into(), false).unwrap();
    let mut rng = rng_for(8, &[]);
    let probe: Vec<f64> = (0..f.w.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let wv = tape.leaf(f.w.values().to_vec());
    let ev = tape.leaf(target.clone());
    let delta = params.delta_tape(&mut tape, &pv, wv, ev, true).unwrap();
    let edited = tape.add(wv, delta).unwrap();
    let r = tape.leaf(probe.clone());
    let out = tape.dot(edited, r).unwrap();
    let grads = tape.backward(out);
    let mut worst_param: f64 = 0.0;
    for k in 0..pv.vars().len() {
        let analytic = grads.get(pv.vars()[k]);
        let base = params.tensors()[k].1.to_vec();
        let numeric = central_diff(&base, |t| {
            let mut p = params.clone();
            p.tensors_mut()[k].copy_from_slice(t);
            let e = p.edit_latent(&f.w, &f.anchors.target).unwrap();
            dot(e.values(), &probe)
        });
        worst_param = worst_param.max(rel_err(&analytic, &numeric));
    }
    errs.push((format!("edit_latent({} params)", params.parameter_count()), worst_param));

    let secs = started.elapsed().as_secs_f64();
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let listed: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst < 1e-4 && secs < 120.0,
        format!("{}; {secs:.1}s", listed.join(", ")),
    )
}

fn criterion_4(dir: &Path) -> Outcome {
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let mut cfg = quickstart(&dir.join("c4"));
    cfg.apply_overrides(&["init.epsilon=0"]).unwrap();
    let mut trainer = Trainer::new(cfg, &suite).unwrap();
    let ck_path = dir.join("c4/zero.cfck");
    trainer.checkpoint().save(&ck_path).unwrap();
    let codes: Vec<LatentCode> = (0..4).map(|s| suite.sample_latent(500 + s).unwrap()).collect();
    let latents = dir.join("c4/codes.cflt");
    write_latents(&latents, &codes).unwrap();
    let out = cmd_edit(&ck_path, &latents, &dir.join("c4/edits"), &Globals::default()).unwrap();
    let identical = out
        .sources
        .iter()
        .zip(&out.edits)
        .all(|(s, e)| std::fs::read(s).unwrap() == std::fs::read(e).unwrap());
    let first = trainer.step().unwrap();
    outcome(
        identical && first.loss_l2 == 0.0,
        format!(
            "{} edited PNGs byte-identical: {identical}; first-step loss_l2 = {}",
            out.edits.len(),
            first.loss_l2
        ),
    )
}

struct ToyRun {
    eval_start: f64,
    eval_end: f64,
    travel: f64,
    records: Vec<StepRecord>,
    secs: f64,
    checksum_kept: bool,
}

fn toy_run(cfg: TrainConfig) -> ToyRun {
    let started = Instant::now();
    let suite = build_suite(&cfg).unwrap();
    let checksum = suite.checksum();
    let mut trainer = Trainer::new(cfg, &suite).unwrap();
    let eval_start = trainer.evaluate().unwrap().cos_dir;
    let mut metrics = MetricsWriter::create(&trainer.config.output_dir.join("metrics.tsv")).unwrap();
    let mut records = Vec::new();
    trainer.run_with(&mut metrics, |r| records.push(*r)).unwrap();
    let end = trainer.evaluate().unwrap();
    ToyRun {
        eval_start,
        eval_end: end.cos_dir,
        travel: end.travel,
        records,
        secs: started.elapsed().as_secs_f64(),
        checksum_kept: suite.checksum() == checksum,
    }
}

fn criterion_5(run: &ToyRun) -> Outcome {
    let t50 = trailing_mean(&run.records, 50, 100).unwrap();
    let t500 = trailing_mean(&run.records, 500, 100).unwrap();
    let last50 = run.records[run.records.len() - 50..]
        .iter()
        .map(|r| r.cos_dir)
        .sum::<f64>()
        / 50.0;
    outcome(
        run.eval_start < 0.1 && run.eval_end > 0.8 && t500 < t50 && run.secs < 300.0,
        format!(
            "held-out cos_dir {:.3} -> {:.3} (need < 0.1 -> > 0.8); training cos_dir last-50 mean {last50:.3}; \
             trailing loss {t50:.4} @50 -> {t500:.4} @500; travel {:.4}; {:.1}s",
            run.eval_start, run.eval_end, run.travel, run.secs
        ),
    )
}

fn criterion_6(dir: &Path) -> Outcome {
    let base = quickstart(&dir.join("c6"));
    let suite = build_suite(&base).unwrap();
    let variants = parse_variants("nce loss=nce\ndirectional loss=directional\n").unwrap();
    let report = run_ablation(&base, &variants, &suite).unwrap();
    let nce = report.row("nce").unwrap().travel;
    let dir_travel = report.row("directional").unwrap().travel;
    let ratio = dir_travel / nce;
    outcome(
        ratio >= 1.5,
        format!("held-out travel directional {dir_travel:.4} vs nce {nce:.4}: ratio {ratio:.2} (need >= 1.5)"),
    )
}

fn criterion_7(dir: &Path) -> Outcome {
    let suite = make_toy_suite(0, Dims::TOY).unwrap();
    let short = |name: &str| {
        let mut cfg = quickstart(&dir.join(name));
        cfg.apply_overrides(&["iterations=40", "checkpoint_every=20"]).unwrap();
        cfg
    };
    let a = train(short("c7a"), &suite).unwrap();
    let b = train(short("c7b"), &suite).unwrap();
    let same = std::fs::read(&a.metrics).unwrap() == std::fs::read(&b.metrics).unwrap();

    let reference = read_metrics(&a.metrics).unwrap();
    let ck_path = dir.join("c7a/checkpoints/step_000020.cfck");
    let ck = Checkpoint::load(&ck_path).unwrap();
    let resaved = dir.join("c7a/resaved.cfck");
    ck.save(&resaved).unwrap();
    let bytes_same = std::fs::read(&ck_path).unwrap() == std::fs::read(&resaved).unwrap();
    let mut trainer = Trainer::resume(ck, &suite).unwrap();
    let next = trainer.step().unwrap();
    let bitwise = next
        .values()
        .iter()
        .zip(reference[20].values())
        .all(|(x, y)| x.to_bits() == y.to_bits())
        && next.step == reference[20].step;
    outcome(
        same && bitwise && bytes_same,
        format!("metrics identical: {same}; resumed step 21 bitwise: {bitwise}; re-saved archive identical: {bytes_same}"),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = rng_for(3, &[]);
    let (h, w, c) = (8, 8, 3);
    let img = Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let zero = AugmentationConfig {
        distortion_scale: 0.0,
        affine_degrees: 0.0,
        affine_translate: 0.0,
        affine_scale: (1.0, 1.0),
        crop_fraction: 1.0,
        ..AugmentationConfig::default()
    };
    let identity = [AugKind::Perspective, AugKind::Affine, AugKind::CropResize].iter().all(|&kind| {
        let cfg = AugmentationConfig { kind, ..zero.clone() };
        make_views(&img, &cfg, 5).unwrap().iter().all(|v| *v == img)
    });

    let cfg = AugmentationConfig {
        seed_stream: 42,
        ..AugmentationConfig::default()
    };
    let a = make_views(&img, &cfg, 7).unwrap();
    let deterministic = a == make_views(&img, &cfg, 7).unwrap() && a != make_views(&img, &cfg, 8).unwrap();

    let x: Vec<f64> = img.pixels().to_vec();
    let g: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst: f64 = 0.0;
    let mut warps = 0;
    for kind in [AugKind::Perspective, AugKind::Affine, AugKind::CropResize] {
        let cfg = AugmentationConfig { kind, ..cfg.clone() };
        for v in view_transforms(h, w, c, &cfg, 1).unwrap() {
            if let ViewTransform::Warp(warp) = v {
                let analytic = warp.vjp(&x, &g);
                let numeric = central_diff(&x, |p| dot(&warp.forward(p), &g));
                worst = worst.max(rel_err(&analytic, &numeric));
                warps += 1;
            }
        }
    }
    outcome(
        identity && deterministic && warps > 0 && worst < 1e-4,
        format!(
            "zero distortion identity: {identity}; seeded views fixed: {deterministic}; \
             warp gradient max relative error {worst:.1e} over {warps} warps"
        ),
    )
}

fn criterion_9(runs: &[(&str, bool)]) -> Outcome {
    let all = runs.iter().all(|(_, ok)| *ok);
    let listed: Vec<String> = runs.iter().map(|(n, ok)| format!("{n}: {ok}")).collect();
    outcome(all, format!("backend checksum unchanged ({})", listed.join(", ")))
}

fn checksum_unchanged_over_ablation(dir: &Path) -> bool {
    let mut base = quickstart(&dir.join("c9"));
    base.apply_overrides(&["iterations=20", "checkpoint_every=0"]).unwrap();
    let suite = build_suite(&base).unwrap();
    let before = suite.checksum();
    let variants = parse_variants("global loss=global\naffine aug.kind=affine\nno_tem tem=off\n").unwrap();
    run_ablation(&base, &variants, &suite).unwrap();
    suite.checksum() == before
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().to_path_buf();
    let run = toy_run(quickstart(&root.join("c5")));

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "contrastive loss matches brute-force oracle", criterion_1()),
        (2, "canonical two-dimensional value", criterion_2()),
        (3, "gradient suite vs finite differences", criterion_3()),
        (4, "residual identity at zero init", criterion_4(&root)),
        (5, "toy end-to-end optimization", criterion_5(&run)),
        (6, "directional loss travels further than contrastive", criterion_6(&root)),
        (7, "determinism and checkpoint persistence", criterion_7(&root)),
        (8, "augmentation identity, determinism, gradients", criterion_8()),
        (
            9,
            "frozen backend checksum",
            criterion_9(&[
                ("500-step run", run.checksum_kept),
                ("ablation", checksum_unchanged_over_ablation(&root)),
            ]),
        ),
    ];

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("{tag} criterion {n}: {name}: {}", o.detail);
    }
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("CFCLIP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
