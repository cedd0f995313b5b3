//! Variant runs over a shared base config.
//!
//! A variant file has one variant per line: a name followed by
//! `key=value` overrides, e.g. `w_dir loss=directional`. Only `loss`,
//! `aug.kind` and `tem` may be overridden.

use std::fmt::Write as _;

use super::config::{LossKind, TrainConfig};
use super::metrics::StepRecord;
use super::trainer::{Trainer, METRICS_FILE};
use crate::augmentation::AugKind;
use crate::backends::BackendSuite;
use crate::error::{Error, Result};
use crate::training::metrics::MetricsWriter;

pub const OVERRIDABLE: [&str; 3] = ["loss", "aug.kind", "tem"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

pub fn parse_variants(text: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let name = fields.next().unwrap().to_string();
        if name.contains('=') {
            return Err(Error::UnknownVariant(format!("line {line:?} has no variant name")));
        }
        if out.iter().any(|v| v.name == name) {
            return Err(Error::UnknownVariant(format!("duplicate variant name {name}")));
        }
        let overrides = fields
            .map(|f| {
                f.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::UnknownVariant(format!("{name}: expected key=value, got {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Variant { name, overrides });
    }
    Ok(out)
}

/// `base` with the variant's overrides; anything outside the supported set is
/// [`Error::UnknownVariant`].
pub fn apply_variant(base: &TrainConfig, v: &Variant) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    for (k, val) in &v.overrides {
        let ok = match k.as_str() {
            "loss" => LossKind::parse(val).is_some(),
            "aug.kind" => AugKind::parse(val).is_some(),
            "tem" => matches!(val.as_str(), "on" | "off"),
            _ => false,
        };
        if !ok {
            return Err(Error::UnknownVariant(format!("{}: {k}={val}", v.name)));
        }
        cfg.set(k, val)?;
    }
    cfg.output_dir = base.output_dir.join(&v.name);
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub config: TrainConfig,
    pub last: StepRecord,
    pub travel: f64,
    pub eval_cos_dir: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "variant",
    "loss",
    "aug_kind",
    "tem",
    "steps",
    "final_cos_dir",
    "final_loss_total",
    "final_loss_nce",
    "final_loss_l2",
    "final_loss_id",
    "final_loss_perc",
    "eval_travel",
    "eval_cos_dir",
];

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }

    /// Header line plus one tab-separated row per variant.
    pub fn to_tsv(&self) -> String {
        let mut s = REPORT_COLUMNS.join("\t");
        s.push('\n');
        for r in &self.rows {
            let l = &r.last;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.variant,
                r.config.loss.as_str(),
                r.config.aug.kind.as_str(),
                if r.config.tem { "on" } else { "off" },
                l.step,
                l.cos_dir,
                l.loss_total,
                l.loss_nce,
                l.loss_l2,
                l.loss_id,
                l.loss_perc,
                r.travel,
                r.eval_cos_dir
            );
        }
        s
    }
}

fn run_one(name: &str, config: TrainConfig, suite: &BackendSuite) -> Result<AblationRow> {
    let mut trainer = Trainer::new(config, suite)?;
    let mut metrics = MetricsWriter::create(&trainer.config.output_dir.join(METRICS_FILE))?;
    let mut last = StepRecord::default();
    let checksum = suite.checksum();
    trainer.run_with(&mut metrics, |r| last = *r)?;
    debug_assert_eq!(checksum, suite.checksum());
    let eval = trainer.evaluate()?;
    Ok(AblationRow {
        variant: name.to_string(),
        config: trainer.config.clone(),
        last,
        travel: eval.travel,
        eval_cos_dir: eval.cos_dir,
    })
}

/// Trains every variant under the base seed; an empty list runs the base.
pub fn run_ablation(base: &TrainConfig, variants: &[Variant], suite: &BackendSuite) -> Result<AblationReport> {
    base.validate()?;
    let configs = if variants.is_empty() {
        vec![("base".to_string(), base.clone())]
    } else {
        variants
            .iter()
            .map(|v| Ok((v.name.clone(), apply_variant(base, v)?)))
            .collect::<Result<Vec<_>>>()?
    };
    let rows = configs
        .into_iter()
        .map(|(name, cfg)| run_one(&name, cfg, suite))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_variant_lines() {
        let v = parse_variants("# loss swaps\nnce loss=nce\nw_dir loss=directional tem=off\n\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].name, "w_dir");
        assert_eq!(v[1].overrides[1], ("tem".to_string(), "off".to_string()));
        assert!(parse_variants("a loss=nce\na loss=global\n").is_err());
        assert!(parse_variants("loss=nce\n").is_err());
        assert!(parse_variants("a loss\n").is_err());
        assert!(parse_variants("").unwrap().is_empty());
    }

    #[test]
    fn only_supported_overrides() {
        let base = TrainConfig::default();
        let ok = Variant {
            name: "crop".into(),
            overrides: vec![("aug.kind".into(), "crop_resize".into())],
        };
        let cfg = apply_variant(&base, &ok).unwrap();
        assert_eq!(cfg.aug.kind, AugKind::CropResize);
        assert_eq!(cfg.output_dir, base.output_dir.join("crop"));
        for (k, v) in [("optimizer.lr", "0.1"), ("loss", "perceptual"), ("tem", "maybe")] {
            let bad = Variant {
                name: "x".into(),
                overrides: vec![(k.into(), v.into())],
            };
            assert!(matches!(apply_variant(&base, &bad), Err(Error::UnknownVariant(_))));
        }
    }
}
