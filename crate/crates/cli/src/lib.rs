//! Command-line driver: train, edit and ablate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cfclip_core::backends::{read_latents, write_latents, BackendSuite, Image};
use cfclip_core::training::{
    build_suite, parse_variants, run_ablation, AblationReport, Checkpoint, MetricsWriter, TrainConfig, Trainer,
};
use cfclip_core::Error;

pub mod manifest;
pub mod png_out;

pub use manifest::{RunManifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "ablation.tsv";
pub const EDITED_LATENTS_FILE: &str = "edited.cflt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("variants file {0} lists no variants")]
    EmptyVariants(PathBuf),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl CliError {
    /// Process exit status: 2 for configuration and shape problems, 3 for a
    /// diverged run, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::EmptyVariants(_) => 2,
            CliError::Core(e) => match e {
                Error::Config { .. }
                | Error::DimensionMismatch { .. }
                | Error::BadDims(_)
                | Error::UnknownVariant(_)
                | Error::BadTemplate { .. }
                | Error::BadFraction(_)
                | Error::LatentFile { .. } => 2,
                Error::NonFiniteLoss { .. } => 3,
                _ => 1,
            },
            CliError::Png(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cfclip", version, about = "Text-guided latent editing")]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Globals {
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a mapper.
    Train {
        /// Config file; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Apply a trained mapper to a latent file.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latents: PathBuf,
    },
    /// Train each variant of a base config and compare.
    Ablate {
        config: Option<PathBuf>,
        #[arg(long)]
        variants: PathBuf,
    },
}

/// Config file (or defaults) with `--set`, `--seed` and `--out` applied.
pub fn resolve_config(path: Option<&Path>, g: &Globals) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    apply_globals(&mut cfg, g)?;
    Ok(cfg)
}

fn apply_globals(cfg: &mut TrainConfig, g: &Globals) -> CliResult<()> {
    cfg.apply_overrides(&g.set)?;
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub travel: f64,
    pub cos_dir: f64,
}

/// Runs (or resumes) training. A fresh run writes its manifest before the
/// first step; a resumed run keeps the existing one.
pub fn cmd_train(config: Option<&Path>, resume: Option<&Path>, g: &Globals) -> CliResult<TrainSummary> {
    let (cfg, ck) = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            apply_globals(&mut ck.config, g)?;
            (ck.config.clone(), Some(ck))
        }
        None => (resolve_config(config, g)?, None),
    };
    let suite = build_suite(&cfg)?;
    let out = cfg.output_dir.clone();
    let metrics_path = out.join(cfclip_core::training::trainer::METRICS_FILE);
    let manifest_path = out.join(MANIFEST_FILE);

    let (mut trainer, mut metrics) = match ck {
        Some(ck) => {
            let trainer = Trainer::resume(ck, &suite)?;
            let metrics = MetricsWriter::resume(&metrics_path, trainer.step)?;
            if !manifest_path.exists() {
                RunManifest::new(&trainer.config, &suite, &metrics_path).write(&manifest_path)?;
            }
            (trainer, metrics)
        }
        None => {
            let trainer = Trainer::new(cfg, &suite)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            RunManifest::new(&trainer.config, &suite, &metrics_path).write(&manifest_path)?;
            (trainer, MetricsWriter::create(&metrics_path)?)
        }
    };
    let final_checkpoint = trainer.run(&mut metrics)?;
    let eval = trainer.evaluate()?;
    Ok(TrainSummary {
        output_dir: out,
        final_checkpoint,
        metrics: metrics_path,
        manifest: manifest_path,
        travel: eval.travel,
        cos_dir: eval.cos_dir,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub sources: Vec<PathBuf>,
    pub edits: Vec<PathBuf>,
    pub latents: PathBuf,
}

/// Source and edited PNGs for every code in `latents`, plus the edited codes.
pub fn cmd_edit(checkpoint: &Path, latents: &Path, out_dir: &Path, g: &Globals) -> CliResult<EditOutput> {
    let mut ck = Checkpoint::load(checkpoint)?;
    ck.config.apply_overrides(&g.set)?;
    let suite = build_suite(&ck.config)?;
    let codes = read_latents(latents)?;
    for c in &codes {
        c.check_shape(&suite.dims)?;
    }
    let target = suite.encode_text(&ck.config.target_text)?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;

    let mut out = EditOutput {
        sources: Vec::new(),
        edits: Vec::new(),
        latents: out_dir.join(EDITED_LATENTS_FILE),
    };
    let mut edited_codes = Vec::with_capacity(codes.len());
    for (i, w) in codes.iter().enumerate() {
        let edited = ck.params.edit_latent_with(w, &target, ck.config.tem)?;
        let src_path = out_dir.join(format!("src_{i}.png"));
        let edit_path = out_dir.join(format!("edit_{i}.png"));
        save_png(&suite, &suite.synthesize(w)?, &src_path)?;
        save_png(&suite, &suite.synthesize(&edited)?, &edit_path)?;
        out.sources.push(src_path);
        out.edits.push(edit_path);
        edited_codes.push(edited);
    }
    write_latents(&out.latents, &edited_codes)?;
    Ok(out)
}

fn save_png(suite: &BackendSuite, img: &Image, path: &Path) -> CliResult<()> {
    suite.check_image(img)?;
    png_out::write_png(img, path)
}

/// Trains every variant in `variants` and writes the report to
/// `<output_dir>/ablation.tsv`.
pub fn cmd_ablate(config: Option<&Path>, variants: &Path, g: &Globals) -> CliResult<(PathBuf, AblationReport)> {
    let base = resolve_config(config, g)?;
    let text = std::fs::read_to_string(variants)
        .map_err(|e| Error::config("<variants>", format!("{}: {e}", variants.display())))?;
    let list = parse_variants(&text)?;
    if list.is_empty() {
        return Err(CliError::EmptyVariants(variants.to_path_buf()));
    }
    let suite = build_suite(&base)?;
    let report = run_ablation(&base, &list, &suite)?;
    std::fs::create_dir_all(&base.output_dir).map_err(Error::from)?;
    let path = base.output_dir.join(REPORT_FILE);
    std::fs::write(&path, report.to_tsv()).map_err(Error::from)?;
    Ok((path, report))
}

/// Dispatches a parsed command line and returns the exit status.
pub fn run(cli: Cli) -> i32 {
    let g = &cli.globals;
    let result = match &cli.command {
        Command::Train { config, resume } => cmd_train(config.as_deref(), resume.as_deref(), g).map(|s| {
            println!("checkpoint\t{}", s.final_checkpoint.display());
            println!("metrics\t{}", s.metrics.display());
            println!("eval_travel\t{}", s.travel);
            println!("eval_cos_dir\t{}", s.cos_dir);
        }),
        Command::Edit { checkpoint, latents } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("edits"));
            cmd_edit(checkpoint, latents, &out, g).map(|o| {
                println!("images\t{}", 2 * o.sources.len());
                println!("latents\t{}", o.latents.display());
            })
        }
        Command::Ablate { config, variants } => cmd_ablate(config.as_deref(), variants, g).map(|(path, report)| {
            print!("{}", report.to_tsv());
            println!("report\t{}", path.display());
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cfclip: {e}");
            e.exit_code()
        }
    }
}
