//! Suite configuration, read from JSON (schema in `schema/suite_config.schema.json`).

use std::fs;
use std::path::{Path, PathBuf};

use licw_core::attacks::{AttackConfig, DIRECTIONS};
use licw_core::models::{Family, DOWNSAMPLE};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::synth::SyntheticSpec;

/// The six quality levels of the toy grid.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    /// Train missing checkpoints; without it a missing checkpoint fails the suite.
    pub enabled: bool,
    pub steps: usize,
    pub crop: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: 2000,
            crop: 64,
            batch: 8,
            lr: 1e-3,
            lr_decayed: 1e-4,
            images: Vec::new(),
            synthetic: Some(SyntheticSpec { count: 32, height: 128, width: 128, seed: 1 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialTrainingSpec {
    pub iters: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    /// Surface steps of the inner SRDA.
    pub surface_steps: usize,
    /// Lambda indices to defend; all when absent.
    #[serde(default)]
    pub lambda_indices: Option<Vec<usize>>,
}

impl Default for AdversarialTrainingSpec {
    fn default() -> Self {
        Self { iters: 1000, batch: 8, crop: 64, lr: 1e-4, lr_decayed: 1e-5, surface_steps: 16, lambda_indices: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSpec {
    pub iters: usize,
    pub lr: f64,
    /// Attack directions whose SRDA outputs are updated.
    pub directions: Vec<[f64; 2]>,
}

impl Default for OnlineSpec {
    fn default() -> Self {
        Self { iters: 64, lr: 1e-2, directions: vec![[0.0, 1.0]] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub families: Vec<String>,
    pub lambdas: Vec<f64>,
    pub directions: Vec<[f64; 2]>,
    pub epsilon: f64,
    pub surface_steps: usize,
    pub tau: f64,
    #[serde(default = "yes")]
    pub arda: bool,
    /// Directions analysed with entropy causal intervention.
    #[serde(default)]
    pub eci_directions: Vec<[f64; 2]>,
    #[serde(default)]
    pub ldmr: bool,
    #[serde(default)]
    pub local_maps: bool,
    pub training: TrainingSpec,
    #[serde(default)]
    pub adversarial_training: Option<AdversarialTrainingSpec>,
    #[serde(default)]
    pub online: Option<OnlineSpec>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            name: "suite".into(),
            images: Vec::new(),
            synthetic: Some(SyntheticSpec { count: 4, height: 64, width: 64, seed: 1000 }),
            families: Family::ALL.iter().map(|f| f.to_string()).collect(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            directions: DIRECTIONS.iter().map(|&(r, d)| [r, d]).collect(),
            epsilon: 1e-3,
            surface_steps: 64,
            tau: 1.0,
            arda: true,
            eci_directions: vec![[1.0, 0.0]],
            ldmr: true,
            local_maps: false,
            training: TrainingSpec::default(),
            adversarial_training: None,
            online: Some(OnlineSpec::default()),
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            workers: None,
        }
    }
}

fn check_paths(paths: &[PathBuf], what: &str) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(HarnessError::Config(format!("{what} {} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn check_synthetic(s: &Option<SyntheticSpec>, what: &str) -> Result<()> {
    if let Some(s) = s {
        if s.count == 0 || s.height < 64 || s.width < 64 || s.height % DOWNSAMPLE != 0 || s.width % DOWNSAMPLE != 0 {
            return Err(HarnessError::Config(format!("{what}: synthetic images need sides >= 64 divisible by 8")));
        }
    }
    Ok(())
}

impl SuiteConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: SuiteConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn families(&self) -> Result<Vec<Family>> {
        self.families.iter().map(|f| f.parse::<Family>().map_err(|e| HarnessError::Config(e.to_string()))).collect()
    }

    pub fn attack(&self, direction: [f64; 2]) -> AttackConfig {
        AttackConfig { epsilon: self.epsilon, surface_steps: self.surface_steps, tau: self.tau, ..AttackConfig::new(direction[0], direction[1]) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.lambdas.is_empty() {
            return bad("lambda list is empty".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return bad(format!("lambda {l} must be positive"));
        }
        if self.families()?.is_empty() {
            return bad("family list is empty".into());
        }
        if self.directions.is_empty() {
            return bad("direction list is empty".into());
        }
        for d in self.directions.iter().chain(&self.eci_directions) {
            self.attack(*d).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.images.is_empty() && self.synthetic.is_none() {
            return bad("no evaluation images".into());
        }
        check_paths(&self.images, "image")?;
        check_synthetic(&self.synthetic, "evaluation set")?;
        let t = &self.training;
        if t.enabled {
            check_paths(&t.images, "training image")?;
            check_synthetic(&t.synthetic, "training set")?;
            if t.images.is_empty() && t.synthetic.is_none() {
                return bad("training is enabled without training images".into());
            }
            if t.crop == 0 || t.crop % DOWNSAMPLE != 0 || t.batch == 0 {
                return bad("training crop must be a positive multiple of 8 and batch positive".into());
            }
        }
        if let Some(at) = &self.adversarial_training {
            if at.crop == 0 || at.crop % DOWNSAMPLE != 0 || at.batch == 0 || at.surface_steps == 0 {
                return bad("adversarial training needs a crop divisible by 8, a batch and surface steps".into());
            }
            if let Some(idx) = at.lambda_indices.as_ref().and_then(|v| v.iter().find(|i| **i >= self.lambdas.len())) {
                return bad(format!("adversarial training lambda index {idx} is out of range"));
            }
        }
        if let Some(on) = &self.online {
            if !(on.lr > 0.0) {
                return bad("online learning rate must be positive".into());
            }
        }
        if self.workers == Some(0) {
            return bad("worker count must be positive".into());
        }
        Ok(())
    }
}
