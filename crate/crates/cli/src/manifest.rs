//! Run manifest: everything needed to repeat a run.
//!
//! ```text
//! tool.version = "0.1.0"
//! seed.master = 0
//! seed.views = 1234
//! backend.checksum = "…"
//! backend.member = "toy-text-encoder/…"
//! artifact.metrics = "runs/x/metrics.tsv"
//! artifact.checkpoints = "runs/x/checkpoints"
//! [config]
//! <config file text>
//! ```

use std::path::Path;

use cfclip_core::backends::BackendSuite;
use cfclip_core::rng::{derive_seed, stream};
use cfclip_core::training::trainer::CHECKPOINT_DIR;
use cfclip_core::training::TrainConfig;
use cfclip_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_SECTION: &str = "[config]";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub master_seed: u64,
    pub view_seed: u64,
    pub backend_checksum: String,
    pub backend_members: Vec<String>,
    pub metrics: String,
    pub checkpoints: String,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, suite: &BackendSuite, metrics: &Path) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed,
            view_seed: derive_seed(config.master_seed, &[stream::VIEW, config.aug.seed_stream]),
            backend_checksum: suite.checksum(),
            backend_members: suite.identifiers(),
            metrics: metrics.display().to_string(),
            checkpoints: config.output_dir.join(CHECKPOINT_DIR).display().to_string(),
            config: config.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("tool.version = {:?}\n", self.version);
        s += &format!("seed.master = {}\n", self.master_seed);
        s += &format!("seed.views = {}\n", self.view_seed);
        s += &format!("backend.checksum = {:?}\n", self.backend_checksum);
        for m in &self.backend_members {
            s += &format!("backend.member = {m:?}\n");
        }
        s += &format!("artifact.metrics = {:?}\n", self.metrics);
        s += &format!("artifact.checkpoints = {:?}\n", self.checkpoints);
        s += CONFIG_SECTION;
        s.push('\n');
        s += &self.config.to_text();
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// The config recorded in a manifest.
pub fn manifest_config(text: &str) -> Result<TrainConfig> {
    let (_, cfg) = text
        .split_once(&format!("{CONFIG_SECTION}\n"))
        .ok_or_else(|| Error::Config {
            key: CONFIG_SECTION.into(),
            msg: "manifest has no config section".into(),
        })?;
    TrainConfig::parse(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfclip_core::backends::{make_toy_suite, Dims};

    #[test]
    fn config_section_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(&["master_seed=9", "target_text=\"a face # with a hash\""]).unwrap();
        let suite = make_toy_suite(0, Dims::TOY).unwrap();
        let m = RunManifest::new(&cfg, &suite, Path::new("out/metrics.tsv"));
        let text = m.to_text();
        assert!(text.contains("seed.master = 9\n"));
        assert_eq!(text.matches("backend.member").count(), 5);
        assert_eq!(manifest_config(&text).unwrap(), cfg);
        assert!(manifest_config("seed.master = 1\n").is_err());
    }
}
