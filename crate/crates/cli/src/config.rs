//! Experiment configuration: parsing, flag merging, validation and hashing.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use diagdim_core::space::GridSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const DEFAULT_EPS: f64 = 0.2;
pub const DEFAULT_TEST_PROPAGATION: f64 = 1.0;
pub const DEFAULT_HAT_SAMPLES: usize = 50;
/// Auto brick side as a multiple of `r`.
pub const AUTO_BRICK_FACTOR: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Space,
    Cover,
    Witness,
    Check,
    Hat,
    Extract,
    Report,
}

pub const ALL_STAGES: [Stage; 7] = [
    Stage::Space,
    Stage::Cover,
    Stage::Witness,
    Stage::Check,
    Stage::Hat,
    Stage::Extract,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Space => "space",
            Stage::Cover => "cover",
            Stage::Witness => "witness",
            Stage::Check => "check",
            Stage::Hat => "hat",
            Stage::Extract => "extract",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceSpec {
    Grid(GridSpec),
    File { file: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoverSpec {
    Named(String),
    Brick { brick_side: f64 },
    File { file: PathBuf },
}

impl Default for CoverSpec {
    fn default() -> Self {
        CoverSpec::Named("auto-brick".into())
    }
}

impl CoverSpec {
    /// Brick side at scale `r`, or `None` for a cover file.
    pub fn brick_side(&self, r: f64) -> Option<f64> {
        match self {
            CoverSpec::Named(_) => Some(AUTO_BRICK_FACTOR * r),
            CoverSpec::Brick { brick_side } => Some(*brick_side),
            CoverSpec::File { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_check_tol")]
    pub check: f64,
    #[serde(default = "default_identity_tol")]
    pub identities: f64,
}

fn default_check_tol() -> f64 {
    1e-9
}

fn default_identity_tol() -> f64 {
    diagdim_core::extract::IDENTITY_TOL
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            check: default_check_tol(),
            identities: default_identity_tol(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceSpec,
    #[serde(default)]
    pub cover: CoverSpec,
    pub r: f64,
    #[serde(default = "default_fiber")]
    pub fiber: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Propagation of the partial translations in the test set.
    #[serde(default = "default_test_propagation")]
    pub test_propagation: f64,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerance: Tolerances,
    #[serde(default = "default_hat_samples")]
    pub hat_samples: usize,
    /// Scales for the error-vs-r table; empty skips it.
    #[serde(default)]
    pub sweep: Vec<f64>,
}

fn default_fiber() -> usize {
    1
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_test_propagation() -> f64 {
    DEFAULT_TEST_PROPAGATION
}
fn default_stages() -> Vec<Stage> {
    ALL_STAGES.to_vec()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_hat_samples() -> usize {
    DEFAULT_HAT_SAMPLES
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.stages.is_empty() || self.stages[..] != ALL_STAGES[..self.stages.len()] {
            bail!(
                "stages must be a prefix of [space, cover, witness, check, hat, extract, report], got {:?}",
                self.stages.iter().map(|s| s.name()).collect::<Vec<_>>()
            );
        }
        if !(self.r.is_finite() && self.r >= 0.0) {
            bail!("r must be a nonnegative number");
        }
        if self.fiber == 0 {
            bail!("fiber must be at least 1");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bail!("eps must be positive");
        }
        if !(self.test_propagation >= 0.0 && self.test_propagation.is_finite()) {
            bail!("test_propagation must be a nonnegative number");
        }
        if let CoverSpec::Named(n) = &self.cover {
            if n != "auto-brick" {
                bail!("unknown cover \"{n}\"; expected \"auto-brick\", {{\"brick_side\": x}} or {{\"file\": path}}");
            }
        }
        if self.sweep.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            bail!("sweep scales must be nonnegative numbers");
        }
        if !self.sweep.is_empty() && matches!(self.cover, CoverSpec::File { .. }) {
            bail!("a sweep needs a brick cover");
        }
        Ok(())
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// SHA-256 of the canonical JSON, leaving out the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads a config file, fills keys it lacks from `flags`, and resolves
/// relative paths against the file's directory. Keys present in both keep
/// the file's value with a warning.
pub fn load(path: &Path, flags: &serde_json::Map<String, Value>) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut v: Value =
        serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))?;
    let map = v
        .as_object_mut()
        .ok_or_else(|| anyhow!("config {} must be a JSON object", path.display()))?;
    let output_from_flag = !map.contains_key("output") && flags.contains_key("output");
    for (k, fv) in flags {
        match map.get(k) {
            Some(cv) if cv != fv => {
                eprintln!("warning: --{} ignored, config sets {k} = {cv}", k.replace('_', "-"));
            }
            Some(_) => {}
            None => {
                map.insert(k.clone(), fv.clone());
            }
        }
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(v).with_context(|| format!("config {} does not match the schema", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let SpaceSpec::File { file } = &mut cfg.space {
        resolve(file);
    }
    if let CoverSpec::File { file } = &mut cfg.cover {
        resolve(file);
    }
    if !output_from_flag {
        resolve(&mut cfg.output);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ExperimentConfig {
        serde_json::from_str(text).unwrap()
    }

    #[test]
    fn stages_must_be_a_prefix() {
        let base = r#"{"space": {"family": "interval", "sides": [5]}, "r": 1"#;
        assert!(parse(&format!("{base}}}")).validate().is_ok());
        assert!(parse(&format!(r#"{base}, "stages": ["space", "cover"]}}"#)).validate().is_ok());
        assert!(parse(&format!(r#"{base}, "stages": ["cover"]}}"#)).validate().is_err());
        assert!(parse(&format!(r#"{base}, "stages": []}}"#)).validate().is_err());
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 1, "output": "x"}"#);
        let b = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 1, "output": "y"}"#);
        let c = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 2, "output": "x"}"#);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn cover_variants() {
        let auto = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 2}"#);
        assert_eq!(auto.cover.brick_side(2.0), Some(12.0));
        let brick = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 2, "cover": {"brick_side": 7}}"#);
        assert_eq!(brick.cover.brick_side(2.0), Some(7.0));
        let file = parse(r#"{"space": {"family": "interval", "sides": [5]}, "r": 2, "cover": {"file": "c.json"}}"#);
        assert_eq!(file.cover.brick_side(2.0), None);
    }
}
