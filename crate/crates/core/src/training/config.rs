//! Run configuration in flat `key = value` text.
//!
//! One assignment per line, `#` starts a comment, surrounding double quotes
//! on a value are stripped. Lines apply in order, so a later line overrides an
//! earlier one. Setting `dataset_profile` resets the loss weights to that
//! profile's defaults; put `weights.*` lines after it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augmentation::{AugKind, AugmentationConfig};
use crate::backends::Dims;
use crate::error::{Error, Result};
use crate::geometry::{load_templates, render_prompts, PromptSet, DEFAULT_TEMPLATES};
use crate::losses::{LossWeights, Profile};

pub const BACKEND_DIR_ENV: &str = "CFCLIP_BACKEND_DIR";

/// Which CLIP-space objective drives the edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Nce,
    Global,
    Directional,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Nce => "nce",
            LossKind::Global => "global",
            LossKind::Directional => "directional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nce" => Some(LossKind::Nce),
            "global" => Some(LossKind::Global),
            "directional" => Some(LossKind::Directional),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentSource {
    /// Fresh codes per step, seeded from the master seed.
    Sampled,
    /// Codes read from a latent file and cycled in shuffled order.
    Inverted(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackendSource {
    /// Seeded toy suite built in process.
    Toy { seed: u64 },
    /// Suite directory; `None` falls back to `$CFCLIP_BACKEND_DIR`.
    Dir(Option<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub target_text: String,
    pub source_class: String,
    pub templates: Vec<String>,
    pub profile: Profile,
    pub latent_source: LatentSource,
    pub weights: LossWeights,
    pub loss: LossKind,
    pub tem: bool,
    pub aug: AugmentationConfig,
    pub optimizer: AdamConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub master_seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub init_epsilon: f64,
    pub init_zero_last: bool,
    pub record_wall_time: bool,
    pub backend: BackendSource,
    pub dims: Dims,
    /// Held-out codes used for end-of-run travel and alignment.
    pub eval_latents: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_text: "a face with green lipstick".into(),
            source_class: "face".into(),
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            profile: Profile::Facial,
            latent_source: LatentSource::Sampled,
            weights: LossWeights::facial(),
            loss: LossKind::Nce,
            tem: true,
            aug: AugmentationConfig::default(),
            optimizer: AdamConfig::default(),
            iterations: 50_000,
            batch_size: 2,
            master_seed: 0,
            checkpoint_every: 5_000,
            output_dir: PathBuf::from("runs/default"),
            init_epsilon: 1e-4,
            init_zero_last: true,
            record_wall_time: false,
            backend: BackendSource::Toy { seed: 0 },
            dims: Dims::TOY,
            eval_latents: 8,
        }
    }
}

/// Every settable key, in serialization order.
pub const KEYS: &[&str] = &[
    "aug.affine_degrees",
    "aug.affine_scale_max",
    "aug.affine_scale_min",
    "aug.affine_translate",
    "aug.crop_fraction",
    "aug.distortion_scale",
    "aug.fill_value",
    "aug.kind",
    "aug.n_views",
    "aug.seed_stream",
    "backend.dir",
    "backend.kind",
    "backend.seed",
    "batch_size",
    "checkpoint_every",
    "dataset_profile",
    "dims.channels",
    "dims.dim_clip",
    "dims.dim_w",
    "dims.height",
    "dims.n_latent",
    "dims.width",
    "eval.latents",
    "init.epsilon",
    "init.zero_last",
    "iterations",
    "latent.path",
    "latent.source",
    "loss",
    "master_seed",
    "metrics.record_wall_time",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.lr",
    "output_dir",
    "prompts.templates",
    "prompts.templates_file",
    "source_class",
    "target_text",
    "tem",
    "weights.lambda_id",
    "weights.lambda_l2",
    "weights.lambda_nce",
    "weights.lambda_perc",
    "weights.tau",
];

const TEMPLATE_SEP: &str = " | ";

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got {v:?}"))),
    }
}

fn strip_quotes(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

fn quoted(s: &str) -> String {
    format!("\"{s}\"")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Assigns one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = strip_quotes(value.trim());
        let k = key.trim();
        match k {
            "target_text" => self.target_text = v.to_string(),
            "source_class" => self.source_class = v.to_string(),
            "prompts.templates" => {
                self.templates = v.split('|').map(|t| t.trim().to_string()).collect()
            }
            "prompts.templates_file" => {
                self.templates = load_templates(Path::new(v)).map_err(|e| Error::config(k, e.to_string()))?
            }
            "dataset_profile" => {
                self.profile = match v {
                    "facial" => Profile::Facial,
                    "non_facial" => Profile::NonFacial,
                    _ => return Err(Error::config(k, "expected facial or non_facial")),
                };
                let tau = self.weights.tau;
                self.weights = LossWeights::for_profile(self.profile);
                self.weights.tau = tau;
            }
            "latent.source" => {
                self.latent_source = match v {
                    "sampled" => LatentSource::Sampled,
                    "inverted" => match &self.latent_source {
                        LatentSource::Inverted(p) => LatentSource::Inverted(p.clone()),
                        LatentSource::Sampled => LatentSource::Inverted(PathBuf::new()),
                    },
                    _ => return Err(Error::config(k, "expected sampled or inverted")),
                }
            }
            "latent.path" => {
                if !v.is_empty() {
                    self.latent_source = LatentSource::Inverted(PathBuf::from(v));
                }
            }
            "weights.lambda_nce" => self.weights.lambda_nce = parse_num(k, v)?,
            "weights.lambda_l2" => self.weights.lambda_l2 = parse_num(k, v)?,
            "weights.lambda_id" => self.weights.lambda_id = parse_num(k, v)?,
            "weights.lambda_perc" => self.weights.lambda_perc = parse_num(k, v)?,
            "weights.tau" => self.weights.tau = parse_num(k, v)?,
            "loss" => {
                self.loss = LossKind::parse(v)
                    .ok_or_else(|| Error::config(k, "expected nce, global or directional"))?
            }
            "tem" => self.tem = parse_bool(k, v)?,
            "aug.kind" => {
                self.aug.kind = AugKind::parse(v).ok_or_else(|| {
                    Error::config(k, "expected perspective, affine, crop_resize or none")
                })?
            }
            "aug.distortion_scale" => self.aug.distortion_scale = parse_num(k, v)?,
            "aug.n_views" => self.aug.n_views = parse_num(k, v)?,
            "aug.fill_value" => self.aug.fill_value = parse_num(k, v)?,
            "aug.seed_stream" => self.aug.seed_stream = parse_num(k, v)?,
            "aug.affine_degrees" => self.aug.affine_degrees = parse_num(k, v)?,
            "aug.affine_translate" => self.aug.affine_translate = parse_num(k, v)?,
            "aug.affine_scale_min" => self.aug.affine_scale.0 = parse_num(k, v)?,
            "aug.affine_scale_max" => self.aug.affine_scale.1 = parse_num(k, v)?,
            "aug.crop_fraction" => self.aug.crop_fraction = parse_num(k, v)?,
            "optimizer.lr" => self.optimizer.lr = parse_num(k, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse_num(k, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_num(k, v)?,
            "optimizer.eps" => self.optimizer.eps = parse_num(k, v)?,
            "iterations" => self.iterations = parse_num(k, v)?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "master_seed" => self.master_seed = parse_num(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(k, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "init.epsilon" => self.init_epsilon = parse_num(k, v)?,
            "init.zero_last" => self.init_zero_last = parse_bool(k, v)?,
            "metrics.record_wall_time" => self.record_wall_time = parse_bool(k, v)?,
            "eval.latents" => self.eval_latents = parse_num(k, v)?,
            "backend.kind" => {
                self.backend = match (v, &self.backend) {
                    ("toy", BackendSource::Toy { seed }) => BackendSource::Toy { seed: *seed },
                    ("toy", _) => BackendSource::Toy { seed: 0 },
                    ("dir", BackendSource::Dir(p)) => BackendSource::Dir(p.clone()),
                    ("dir", _) => BackendSource::Dir(None),
                    _ => return Err(Error::config(k, "expected toy or dir")),
                }
            }
            "backend.seed" => {
                let seed = parse_num(k, v)?;
                match &mut self.backend {
                    BackendSource::Toy { seed: s } => *s = seed,
                    BackendSource::Dir(_) => {
                        return Err(Error::config(k, "only meaningful with backend.kind = toy"))
                    }
                }
            }
            "backend.dir" => {
                self.backend = BackendSource::Dir((!v.is_empty()).then(|| PathBuf::from(v)))
            }
            "dims.dim_clip" => self.dims.dim_clip = parse_num(k, v)?,
            "dims.dim_w" => self.dims.dim_w = parse_num(k, v)?,
            "dims.n_latent" => self.dims.n_latent = parse_num(k, v)?,
            "dims.height" => self.dims.height = parse_num(k, v)?,
            "dims.width" => self.dims.width = parse_num(k, v)?,
            "dims.channels" => self.dims.channels = parse_num(k, v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must be key=value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a config document on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, rest) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            let rest = rest.trim();
            let value = match rest.strip_prefix('"') {
                Some(inner) => {
                    let end = inner
                        .find('"')
                        .ok_or_else(|| Error::config(k.trim(), "unterminated quote"))?;
                    let tail = inner[end + 1..].trim();
                    if !(tail.is_empty() || tail.starts_with('#')) {
                        return Err(Error::config(k.trim(), "text after closing quote"));
                    }
                    &inner[..end]
                }
                None => rest.split('#').next().unwrap_or("").trim(),
            };
            self.set(k, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_text.trim().is_empty() {
            return Err(Error::config("target_text", "must not be empty"));
        }
        self.prompts().map_err(|e| Error::config("source_class", e.to_string()))?;
        self.weights.validate(self.profile)?;
        self.aug
            .validate()
            .map_err(|e| match e {
                Error::BadFraction(f) => Error::config("aug.crop_fraction", format!("{f} outside (0, 1]")),
                e => e,
            })?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.iterations < 1 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.init_epsilon >= 0.0 && self.init_epsilon.is_finite()) {
            return Err(Error::config("init.epsilon", "must be non-negative"));
        }
        if let LatentSource::Inverted(p) = &self.latent_source {
            if p.as_os_str().is_empty() {
                return Err(Error::config("latent.path", "required for inverted latents"));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.dims
            .validate()
            .map_err(|e| Error::config("dims", e.to_string()))?;
        Ok(())
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        render_prompts(&self.source_class, &self.templates)
    }

    /// Canonical text: every key in [`KEYS`] order except `prompts.templates_file`.
    /// `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let a = &self.aug;
        put("dataset_profile", match self.profile {
            Profile::Facial => "facial".into(),
            Profile::NonFacial => "non_facial".into(),
        });
        for key in KEYS {
            let v = match *key {
                "aug.affine_degrees" => a.affine_degrees.to_string(),
                "aug.affine_scale_max" => a.affine_scale.1.to_string(),
                "aug.affine_scale_min" => a.affine_scale.0.to_string(),
                "aug.affine_translate" => a.affine_translate.to_string(),
                "aug.crop_fraction" => a.crop_fraction.to_string(),
                "aug.distortion_scale" => a.distortion_scale.to_string(),
                "aug.fill_value" => a.fill_value.to_string(),
                "aug.kind" => a.kind.as_str().to_string(),
                "aug.n_views" => a.n_views.to_string(),
                "aug.seed_stream" => a.seed_stream.to_string(),
                "backend.dir" => match &self.backend {
                    BackendSource::Dir(Some(p)) => quoted(&p.display().to_string()),
                    _ => continue,
                },
                "backend.kind" => match &self.backend {
                    BackendSource::Toy { .. } => "toy".into(),
                    BackendSource::Dir(_) => "dir".into(),
                },
                "backend.seed" => match &self.backend {
                    BackendSource::Toy { seed } => seed.to_string(),
                    BackendSource::Dir(_) => continue,
                },
                "batch_size" => self.batch_size.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "dataset_profile" => continue,
                "dims.channels" => self.dims.channels.to_string(),
                "dims.dim_clip" => self.dims.dim_clip.to_string(),
                "dims.dim_w" => self.dims.dim_w.to_string(),
                "dims.height" => self.dims.height.to_string(),
                "dims.n_latent" => self.dims.n_latent.to_string(),
                "dims.width" => self.dims.width.to_string(),
                "eval.latents" => self.eval_latents.to_string(),
                "init.epsilon" => self.init_epsilon.to_string(),
                "init.zero_last" => self.init_zero_last.to_string(),
                "iterations" => self.iterations.to_string(),
                "latent.path" => match &self.latent_source {
                    LatentSource::Inverted(p) => quoted(&p.display().to_string()),
                    LatentSource::Sampled => continue,
                },
                "latent.source" => match &self.latent_source {
                    LatentSource::Sampled => "sampled".into(),
                    LatentSource::Inverted(_) => "inverted".into(),
                },
                "loss" => self.loss.as_str().into(),
                "master_seed" => self.master_seed.to_string(),
                "metrics.record_wall_time" => self.record_wall_time.to_string(),
                "optimizer.beta1" => self.optimizer.beta1.to_string(),
                "optimizer.beta2" => self.optimizer.beta2.to_string(),
                "optimizer.eps" => self.optimizer.eps.to_string(),
                "optimizer.lr" => self.optimizer.lr.to_string(),
                "output_dir" => quoted(&self.output_dir.display().to_string()),
                "prompts.templates" => quoted(&self.templates.join(TEMPLATE_SEP)),
                "prompts.templates_file" => continue,
                "source_class" => quoted(&self.source_class),
                "target_text" => quoted(&self.target_text),
                "tem" => on_off(self.tem).into(),
                "weights.lambda_id" => self.weights.lambda_id.to_string(),
                "weights.lambda_l2" => self.weights.lambda_l2.to_string(),
                "weights.lambda_nce" => self.weights.lambda_nce.to_string(),
                "weights.lambda_perc" => self.weights.lambda_perc.to_string(),
                "weights.tau" => self.weights.tau.to_string(),
                _ => unreachable!("key {key} missing from to_text"),
            };
            put(key, v);
        }
        out
    }
}
