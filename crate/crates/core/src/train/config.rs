//! The run configuration document.
//!
//! A run is described by one JSON object with the sections `backbone`,
//! `adapter`, `compressor`, `encoder`, `phase1`, `phase2`, `data` and
//! `eval`. Missing fields take the desk-scale defaults below; unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Precision};
use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::modality::{AdapterConfig, CompressorConfig};
use crate::params::has_prefix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub spec: EncoderSpec,
    /// Lets a weighted encoder join the second phase's trainable set.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub phase: Phase,
    /// Dotted name prefixes that receive updates.
    pub trainable_groups: Vec<String>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    /// Fraction of steps at the end spent decaying linearly to `lr_end`.
    pub decay_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig::phase1()
    }
}

fn groups(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl PhaseConfig {
    /// Desk-scale first phase: only the modality path (compressor, adapter)
    /// and the task head train.
    pub fn phase1() -> Self {
        PhaseConfig {
            phase: Phase::I,
            trainable_groups: groups(&["adapter", "compressor", "task_head"]),
            lr_start: 1e-3,
            lr_end: 1e-4,
            steps: 100,
            warmup_steps: 10,
            decay_fraction: 0.2,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }

    /// Desk-scale second phase: the backbone joins.
    pub fn phase2() -> Self {
        PhaseConfig {
            phase: Phase::II,
            trainable_groups: groups(&["adapter", "compressor", "task_head", "backbone"]),
            lr_start: 3e-3,
            lr_end: 3e-4,
            steps: 2000,
            warmup_steps: 100,
            ..PhaseConfig::phase1()
        }
    }

    /// Large-batch settings of the reference visual instruction-tuning
    /// recipe. Not used by default; they need far more compute and data.
    pub fn full_scale(phase: Phase) -> Self {
        let base = match phase {
            Phase::I => PhaseConfig::phase1(),
            Phase::II => PhaseConfig::phase2(),
        };
        let (lr, bsz) = match phase {
            Phase::I => (1e-3, 256),
            Phase::II => (2e-5, 128),
        };
        PhaseConfig {
            lr_start: lr,
            lr_end: 0.0,
            warmup_steps: 100,
            batch_size: bsz,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            ..base
        }
    }

    pub fn validate(&self, encoder_trainable: bool) -> Result<()> {
        let has = |p: &str| self.trainable_groups.iter().any(|g| has_prefix(g, p) || has_prefix(p, g));
        if has("encoder") && !(self.phase == Phase::II && encoder_trainable) {
            return Err(Error::Config(format!(
                "phase {:?} may not train the encoder (set encoder.trainable for phase II)",
                self.phase
            )));
        }
        if self.phase == Phase::I && has("backbone") {
            return Err(Error::Config("phase I may not train the backbone".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("decay_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Trainable prefixes in effect, including the encoder when allowed.
    pub fn effective_groups(&self, encoder_trainable: bool) -> Vec<String> {
        let mut g = self.trainable_groups.clone();
        if self.phase == Phase::II && encoder_trainable && !g.iter().any(|x| x == "encoder") {
            g.push("encoder".into());
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CaptionCopy,
    Forecast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Caption copy: the image is a `grid×grid` arrangement of cells.
    pub grid: usize,
    /// Caption copy: side length of one cell in pixels.
    pub cell_px: usize,
    /// Forecast: series per split, length of each, window sizes, noise.
    pub n_series: usize,
    pub series_len: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub noise: f64,
    /// Optional JSONL training set used instead of generated data.
    pub dataset: Option<String>,
    /// Optional JSONL evaluation set.
    pub eval_dataset: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: Task::CaptionCopy,
            seed: 0,
            n_train: 512,
            n_eval: 128,
            grid: 3,
            cell_px: 8,
            n_series: 32,
            series_len: 600,
            lookback: 96,
            horizon: 24,
            noise: 0.05,
            dataset: None,
            eval_dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Period of the seasonal-naive forecast baseline.
    pub season: usize,
    pub bench_lengths: Vec<usize>,
    pub bench_trials: usize,
    pub bench_precision: Precision,
    /// `(kernel, stride)` pairs for the compression sweep; `(0, 0)` is
    /// pass-through.
    pub sweep_pairs: Vec<(usize, usize)>,
    pub adapter_scales: Vec<usize>,
    /// Phase lengths used for each configuration in the sweeps.
    pub sweep_phase1_steps: usize,
    pub sweep_phase2_steps: usize,
    pub timing_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            season: 24,
            bench_lengths: vec![128, 512, 4096, 8192],
            bench_trials: 5,
            bench_precision: Precision::F64,
            sweep_pairs: vec![(0, 0), (3, 2), (4, 3), (5, 4)],
            adapter_scales: vec![2, 4, 8],
            sweep_phase1_steps: 50,
            sweep_phase2_steps: 200,
            timing_trials: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub compressor: CompressorConfig,
    pub encoder: EncoderSection,
    #[serde(deserialize_with = "phase1_fields")]
    pub phase1: PhaseConfig,
    #[serde(deserialize_with = "phase2_fields")]
    pub phase2: PhaseConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            compressor: CompressorConfig::default(),
            encoder: EncoderSection::default(),
            phase1: PhaseConfig::phase1(),
            phase2: PhaseConfig::phase2(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Overlays the keys present in the document onto a phase's own defaults,
/// so a partial `phase2` section keeps the second-phase values for every
/// field it does not mention.
fn overlay<'de, D: serde::Deserializer<'de>>(de: D, base: PhaseConfig) -> Result<PhaseConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Map::<String, serde_json::Value>::deserialize(de)?;
    let mut merged = serde_json::to_value(base).map_err(D::Error::custom)?;
    let obj = merged.as_object_mut().expect("struct serializes to an object");
    for (k, v) in given {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

fn phase1_fields<'de, D: serde::Deserializer<'de>>(de: D) -> Result<PhaseConfig, D::Error> {
    overlay(de, PhaseConfig::phase1())
}

fn phase2_fields<'de, D: serde::Deserializer<'de>>(de: D) -> Result<PhaseConfig, D::Error> {
    overlay(de, PhaseConfig::phase2())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.phase1.seed = seed;
        self.phase2.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.compressor.validate()?;
        self.encoder.spec.validate()?;
        self.phase1.validate(self.encoder.trainable)?;
        self.phase2.validate(self.encoder.trainable)?;
        if self.adapter.scale == 0 {
            return Err(Error::Config("adapter.scale must be positive".into()));
        }
        if self.data.task == Task::CaptionCopy && self.backbone.vocab_size < self.data.grid.pow(2) + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for a {}×{} grid",
                self.backbone.vocab_size, self.data.grid, self.data.grid
            )));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.phase2.phase, Phase::II);
        let c = RunConfig::from_json(r#"{"phase2":{"steps":7}}"#).unwrap();
        assert_eq!(c.phase2.steps, 7);
        assert_eq!(c.phase2.trainable_groups, PhaseConfig::phase2().trainable_groups);
        assert!(RunConfig::from_json(r#"{"phase1":{"stepz":7}}"#).is_err());
        assert_eq!(c.backbone.d_model, 64);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"backbone":{"depth":3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra":{}}"#).is_err());
    }

    #[test]
    fn phase_one_cannot_train_backbone_or_encoder() {
        let mut p = PhaseConfig::phase1();
        p.trainable_groups.push("backbone".into());
        assert!(p.validate(false).is_err());
        let mut p = PhaseConfig::phase2();
        p.trainable_groups.push("encoder".into());
        assert!(p.validate(false).is_err());
        assert!(p.validate(true).is_ok());
        assert!(PhaseConfig::phase2().effective_groups(true).contains(&"encoder".to_string()));
    }

    #[test]
    fn round_trip_is_stable() {
        let c = RunConfig::default().with_seed(9);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
