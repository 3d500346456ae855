//! Model bundle, losses and the two-phase training loop.
//!
//! A sample flows encoder → compressor → adapter, is concatenated with the
//! embedded prompt and answer tokens, and runs through the backbone. Token
//! tasks are scored with next-token cross-entropy on answer positions only;
//! forecasting samples read a linear head off the last position.
//!
//! The first phase trains only the modality path and task head; the second
//! also unfreezes the backbone. Parameters outside a phase's groups are
//! never written, so their hashes are unchanged bit for bit.

mod checkpoint;
mod config;
mod data;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Progress, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{DataConfig, EncoderSection, EvalConfig, Phase, PhaseConfig, RunConfig, Task};
pub use data::{
    decode_caption_image, gen_caption_copy, gen_forecast, gen_series, intensity_token, read_jsonl,
    standardize_window, token_intensity, window_count, windows, write_jsonl, Sample, BOS,
    FIRST_CONTENT, PAD,
};
pub use optim::{clip_grad_norm, grad_norm, lr_schedule, Adam};

use std::path::PathBuf;

use crate::backbone::{embed_tokens, forward_trunk, init_weights, lm_head, xavier};
use crate::encoders::{encode, init_encoder};
use crate::error::{Error, Result};
use crate::modality::{adapt, compress, fuse_vars, init_adapter, init_compressor, AdapterConfig, Layout};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean next-token cross-entropy over positions `t` with `mask[t]`, scored
/// from the logits of position `t − 1`.
pub fn loss_lm(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, _) = tape.value(logits).dims2()?;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape("loss_lm", &[rows], &[targets.len(), mask.len()]));
    }
    if mask.first() == Some(&true) {
        return Err(Error::Domain {
            op: "loss_lm",
            detail: "position 0 has no preceding logits".into(),
        });
    }
    let picks: Vec<(usize, usize)> = (1..rows)
        .filter(|&t| mask[t])
        .map(|t| (t - 1, targets[t]))
        .collect();
    tape.cross_entropy(logits, &picks)
}

/// Mean squared error between two equal-shaped nodes.
pub fn loss_mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).numel() != tape.value(target).numel() {
        return Err(Error::shape(
            "loss_mse",
            tape.value(pred).shape(),
            tape.value(target).shape(),
        ));
    }
    let shape = tape.value(target).shape().to_vec();
    let p = tape.reshape(pred, &shape)?;
    let d = tape.sub(p, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
}

pub struct ForwardOut {
    pub loss: Var,
    pub logits: Option<Var>,
    pub prediction: Option<Var>,
    /// Number of modality positions after compression.
    pub modality_len: usize,
}

impl Model {
    /// Resolves derived widths and initializes every component from labeled
    /// sub-streams of the first phase's seed.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = resolve(config);
        let rng = RngStream::new(config.phase1.seed).derive("init");
        let mut store = ParamStore::new();
        init_weights(&config.backbone, &rng.derive("backbone"), &mut store)?;
        let width = config.encoder.spec.width();
        init_encoder(&config.encoder.spec, &rng.derive("encoder"), &mut store)?;
        init_compressor(&config.compressor, width, &rng.derive("compressor"), &mut store)?;
        init_adapter(&config.adapter, &rng.derive("adapter"), &mut store)?;
        if config.data.task == Task::Forecast {
            let d = config.backbone.d_model;
            let h = config.data.horizon;
            let w = xavier(&mut rng.derive("task_head.weight"), d, h);
            store.insert("task_head.weight", w)?;
            store.insert("task_head.bias", Tensor::zeros(&[h]))?;
        }
        Ok(Model { config, store })
    }

    /// One sample's loss on `tape`.
    pub fn forward(&self, tape: &mut Tape, sample: &Sample) -> Result<ForwardOut> {
        self.forward_with(&self.store, tape, sample)
    }

    /// [`Model::forward`] with parameters taken from `store`, which must
    /// hold the same names and shapes as the model's own.
    pub fn forward_with(&self, store: &ParamStore, tape: &mut Tape, sample: &Sample) -> Result<ForwardOut> {
        let c = &self.config;
        let feats = encode(tape, store, &c.encoder.spec, &sample.input)?;
        let comp = compress(tape, store, &c.compressor, feats)?;
        let m = adapt(tape, store, comp)?;
        let lm = tape.value(m).shape()[0];
        let text_ids: Vec<usize> = sample.prompt.iter().chain(&sample.answer).copied().collect();
        let text = embed_tokens(tape, store, &text_ids)?;
        let fused = fuse_vars(tape, m, text, Layout::ModalityFirst)?;
        let trunk = forward_trunk(tape, store, &c.backbone, fused, None)?;
        match &sample.target {
            Some(target) => {
                let n = lm + text_ids.len();
                let last = tape.slice_rows(trunk.hidden, n - 1, n)?;
                let w = tape.param_named(store, "task_head.weight")?;
                let b = tape.param_named(store, "task_head.bias")?;
                let p = tape.matmul(last, w)?;
                let p = tape.add_row(p, b)?;
                let t = tape.constant(Tensor::new(&[1, target.len()], target.clone())?);
                let loss = loss_mse(tape, p, t)?;
                Ok(ForwardOut {
                    loss,
                    logits: None,
                    prediction: Some(p),
                    modality_len: lm,
                })
            }
            None => {
                let logits = lm_head(tape, store, trunk.hidden)?;
                let targets: Vec<usize> = std::iter::repeat_n(PAD, lm).chain(text_ids.iter().copied()).collect();
                let mask: Vec<bool> = std::iter::repeat_n(false, lm + sample.prompt.len())
                    .chain(std::iter::repeat_n(true, sample.answer.len()))
                    .collect();
                let loss = loss_lm(tape, logits, &targets, &mask)?;
                Ok(ForwardOut {
                    loss,
                    logits: Some(logits),
                    prediction: None,
                    modality_len: lm,
                })
            }
        }
    }

    /// Teacher-forced greedy predictions for each answer position.
    pub fn predict_answer(&self, sample: &Sample) -> Result<Vec<usize>> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, sample)?;
        let logits = tape.value(out.logits.ok_or_else(|| Error::Config("sample has no answer tokens".into()))?);
        let start = out.modality_len + sample.prompt.len();
        Ok((0..sample.answer.len())
            .map(|j| {
                let row = logits.row(start + j - 1);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn predict_forecast(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, sample)?;
        let p = out.prediction.ok_or_else(|| Error::Config("sample has no numeric target".into()))?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, sample)?;
        tape.value(out.loss).item()
    }
}

fn resolve(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    let width = c.compressor.out_channels(c.encoder.spec.width());
    c.adapter = AdapterConfig {
        d_in: width,
        scale: c.adapter.scale,
        d_out: c.backbone.d_model,
    };
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Owns the model, optimizer state and batch sampler across both phases.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub progress: Progress,
    pub rng: RngStream,
    pub log: Vec<StepRecord>,
    /// Reported when a step produces a non-finite loss.
    pub last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let mut t = Trainer {
            adam: Adam::for_phase(&model.store, &model.config.phase1),
            rng: RngStream::new(model.config.phase1.seed).derive("batches.phase1"),
            model,
            progress: Progress { phase: 1, step: 0 },
            log: Vec::new(),
            last_checkpoint: None,
        };
        t.skip_empty_phases();
        t.apply_freeze();
        t
    }

    pub fn phase_config(&self) -> &PhaseConfig {
        if self.progress.phase == 1 {
            &self.model.config.phase1
        } else {
            &self.model.config.phase2
        }
    }

    pub fn finished(&self) -> bool {
        self.progress.phase > 2
    }

    fn apply_freeze(&mut self) {
        if self.finished() {
            self.model.store.set_trainable_prefixes(&[]);
            return;
        }
        let groups = self.phase_config().effective_groups(self.model.config.encoder.trainable);
        self.model.store.set_trainable_prefixes(&groups);
    }

    fn skip_empty_phases(&mut self) {
        while !self.finished() && self.progress.step >= self.phase_config().steps {
            self.progress.phase += 1;
            self.progress.step = 0;
            if self.progress.phase == 2 {
                self.adam = Adam::for_phase(&self.model.store, &self.model.config.phase2);
                self.rng = RngStream::new(self.model.config.phase2.seed).derive("batches.phase2");
            }
        }
    }

    /// One optimizer step of the current phase on a batch drawn from `data`.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        if self.finished() {
            return Err(Error::State("training already finished".into()));
        }
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.phase_config().clone();
        let lr = lr_schedule(self.progress.step, &cfg);
        let scale = 1.0 / cfg.batch_size as f64;
        self.model.store.zero_grads();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = &data[self.rng.below(data.len())];
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, sample)?;
            let l = tape.value(out.loss).item()?;
            total += l;
            let scaled = tape.scale(out.loss, scale);
            tape.backward(scaled, &mut self.model.store)?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.progress.step,
                last_good: self
                    .last_checkpoint
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut self.model.store, c);
        }
        self.adam.step(&mut self.model.store, lr)?;
        let rec = StepRecord {
            phase: self.progress.phase,
            step: self.progress.step,
            lr,
            loss,
        };
        self.log.push(rec);
        self.progress.step += 1;
        let before = self.progress.phase;
        self.skip_empty_phases();
        if self.progress.phase != before {
            self.apply_freeze();
        }
        Ok(rec)
    }

    /// Runs steps until both phases are done or `max_steps` more steps ran.
    pub fn run(&mut self, data: &[Sample], max_steps: Option<usize>, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let mut n = 0;
        while !self.finished() && max_steps.is_none_or(|m| n < m) {
            let rec = self.step(data)?;
            on_step(&rec);
            n += 1;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            store: self.model.store.clone(),
            adam: Some(self.adam.clone()),
            progress: self.progress,
            rng: Some(self.rng.state()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Model {
            config: ck.config,
            store: ck.store,
        };
        let phase_cfg = if ck.progress.phase == 1 {
            &model.config.phase1
        } else {
            &model.config.phase2
        };
        let adam = ck.adam.unwrap_or_else(|| Adam::for_phase(&model.store, phase_cfg));
        let rng = match ck.rng {
            Some(s) => RngStream::from_state(s),
            None => RngStream::new(phase_cfg.seed).derive(if ck.progress.phase == 1 {
                "batches.phase1"
            } else {
                "batches.phase2"
            }),
        };
        let mut t = Trainer {
            model,
            adam,
            progress: ck.progress,
            rng,
            log: Vec::new(),
            last_checkpoint: None,
        };
        t.apply_freeze();
        Ok(t)
    }
}

/// Generated or loaded `(train, eval)` sets for a configuration.
pub fn build_datasets(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &config.data;
    let load = |p: &Option<String>| p.as_ref().map(|p| read_jsonl(std::path::Path::new(p))).transpose();
    let root = RngStream::new(d.seed);
    let gen = |label: &str, n: usize| -> Result<Vec<Sample>> {
        let mut rng = root.derive(label);
        match d.task {
            Task::CaptionCopy => gen_caption_copy(&mut rng, d.grid, config.backbone.vocab_size, d.cell_px, n),
            Task::Forecast => gen_forecast(&mut rng, n, d.series_len, d.lookback, d.horizon, d.noise),
        }
    };
    let (n_train, n_eval) = match d.task {
        Task::CaptionCopy => (d.n_train, d.n_eval),
        Task::Forecast => (d.n_series, d.n_series.div_ceil(4).max(1)),
    };
    let train = match load(&d.dataset)? {
        Some(v) => v,
        None => gen("train", n_train)?,
    };
    let eval = match load(&d.eval_dataset)? {
        Some(v) => v,
        None => gen("eval", n_eval)?,
    };
    Ok((train, eval))
}
