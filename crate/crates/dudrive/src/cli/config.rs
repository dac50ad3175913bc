//! Experiment configuration: a TOML file with strict unknown-key rejection.
//! Every field has a default; the fully resolved config is persisted next to
//! every run so results stay reproducible.

use crate::error::{Error, Result};
use crate::geometry::VehicleGeometry;
use crate::training::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding one subdirectory per domain, each with train/ and
    /// test/ dataset directories.
    pub root: PathBuf,
    pub virtual_dir: String,
    /// Real domains, in experiment order.
    pub domains: Vec<String>,
    /// Domain used by single-domain presets.
    pub primary_domain: String,
    /// Target domain of the semi-supervised preset.
    pub target_domain: String,
    /// Labeled fraction for the semi-supervised preset.
    pub label_fraction: f64,
    /// Ingestion filter on |steering| in degrees.
    pub filter_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            virtual_dir: "virtual".to_string(),
            domains: vec!["real_a".to_string(), "real_b".to_string()],
            primary_domain: "real_a".to_string(),
            target_domain: "real_b".to_string(),
            label_fraction: 1.0,
            filter_deg: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub wheelbase_m: f64,
    pub steer_ratio: f64,
    pub slip_coeff: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { wheelbase_m: 2.7, steer_ratio: 15.3, slip_coeff: 0.0 }
    }
}

impl GeometryConfig {
    pub fn vehicle(&self) -> Result<VehicleGeometry<f64>> {
        VehicleGeometry::new(self.wheelbase_m, self.steer_ratio, self.slip_coeff)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames_train: usize,
    pub frames_test: usize,
    pub data_seed: u64,
    /// Style id per real domain, aligned with `data.domains`.
    pub domain_styles: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames_train: 2000,
            frames_test: 400,
            data_seed: 77,
            domain_styles: vec!["style_a".to_string(), "style_b".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub out_dir: PathBuf,
    /// Rows of the comparison image grid.
    pub grid_rows: usize,
    /// Images sampled for total-variance measurements.
    pub variance_sample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { out_dir: PathBuf::from("runs"), grid_rows: 6, variance_sample: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub geometry: GeometryConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.geometry.vehicle()?;
        if self.data.domains.is_empty() {
            return Err(Error::Config("at least one real domain is required".into()));
        }
        if self.synth.domain_styles.len() != self.data.domains.len() {
            return Err(Error::Config(
                "synth.domain_styles must align with data.domains".into(),
            ));
        }
        for style in &self.synth.domain_styles {
            crate::synthworld::style_by_id(style)?;
        }
        if !self.data.domains.contains(&self.data.primary_domain) {
            return Err(Error::Config(format!(
                "primary domain {} not in data.domains",
                self.data.primary_domain
            )));
        }
        if !self.data.domains.contains(&self.data.target_domain) {
            return Err(Error::Config(format!(
                "target domain {} not in data.domains",
                self.data.target_domain
            )));
        }
        if !(0.0..=1.0).contains(&self.data.label_fraction) {
            return Err(Error::Config("label_fraction must be in [0, 1]".into()));
        }
        if self.synth.frames_train == 0 || self.synth.frames_test == 0 {
            return Err(Error::Config("synth frame counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Persist the fully resolved config inside a run directory.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = "[train]\nlambda_task = 0.5\nmystery_knob = 1\n";
        let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(bad);
        assert!(parsed.is_err());
        let bad_top = "[novel_section]\nx = 1\n";
        let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(bad_top);
        assert!(parsed.is_err());
    }

    #[test]
    fn partial_configs_take_defaults() {
        let text = "[train]\nseed = 5\nwidth_factor = 0.25\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.width_factor, 0.25);
        assert_eq!(cfg.train.batch_size, 60);
        assert_eq!(cfg.synth.frames_train, 2000);
    }

    #[test]
    fn misaligned_styles_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.domain_styles.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.data.primary_domain = "nope".into();
        assert!(cfg.validate().is_err());
    }
}
