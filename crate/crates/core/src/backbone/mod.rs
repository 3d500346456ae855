//! The recurrent language-model trunk.
//!
//! Each layer is a pre-norm residual pair: a time-mixing block running the
//! multi-head delta-rule scan, and a ReLU channel-mixing block. Projections
//! read the normalized input of the current position only (there is no
//! token shift).
//!
//! Per head, the time-mixing block derives
//!
//! - `r = x·W_r` (receptance, used to read the state),
//! - `k = normalize(x·W_k)` (unit norm per head),
//! - `v = x·W_v`,
//! - `a = mean(sigmoid(x·W_a))` over the head's channels,
//! - `decay = exp(−exp(x·W_w + b_w))` per key channel,
//!
//! and the head readout `o = Sᵀ·r` is taken after the state update. Head
//! outputs are concatenated and projected by `W_o`.
//!
//! Weights are stored `in×out` and applied to row vectors, `y = x·W`.

mod recurrence;
mod session;

pub use recurrence::{decay_step, linear_rnn_step, wkv7_step};
pub use session::{Precision, Session};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, TapeMode, Var};
use crate::tensor::{ReduceOp, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const KEY_EPS: f64 = 1e-8;
/// Initial bias of the decay projection; `exp(−exp(−0.5)) ≈ 0.545`.
pub const DECAY_BIAS_INIT: f64 = -0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub ffn_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 1,
            vocab_size: 256,
            ffn_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "d_model, n_heads and vocab_size must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_ratio < 1 {
            return Err(Error::Config("ffn_ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ffn(&self) -> usize {
        self.ffn_ratio * self.d_model
    }
}

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("backbone.layer{layer}.{part}")
}

/// Normal draws with standard deviation `sqrt(2 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.normal(0.0, std)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches data")
}

fn insert_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.scale"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.offset"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Inserts every backbone parameter into `store`.
///
/// Each tensor draws from its own stream derived from `rng` and the
/// parameter name, so adding or removing components elsewhere never shifts
/// these values.
pub fn init_weights(cfg: &BackboneConfig, rng: &RngStream, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let emb_name = "backbone.emb";
    let mut er = rng.derive(emb_name);
    let emb = (0..cfg.vocab_size * d).map(|_| er.normal(0.0, 0.02)).collect();
    store.insert(emb_name, Tensor::new(&[cfg.vocab_size, d], emb)?)?;
    for l in 0..cfg.n_layers {
        insert_norm(store, &layer_name(l, "norm1"), d)?;
        for part in ["w_r", "w_k", "w_v", "w_a"] {
            let name = layer_name(l, part);
            let w = xavier(&mut rng.derive(&name), d, d);
            store.insert(name, w)?;
        }
        store.insert(layer_name(l, "w_w"), Tensor::zeros(&[d, d]))?;
        store.insert(layer_name(l, "w_w.bias"), Tensor::full(&[d], DECAY_BIAS_INIT))?;
        let name = layer_name(l, "w_o");
        let w = xavier(&mut rng.derive(&name), d, d);
        store.insert(name, w)?;
        insert_norm(store, &layer_name(l, "norm2"), d)?;
        let name = layer_name(l, "ffn1");
        let w = xavier(&mut rng.derive(&name), d, cfg.d_ffn());
        store.insert(name, w)?;
        let name = layer_name(l, "ffn2");
        let w = xavier(&mut rng.derive(&name), cfg.d_ffn(), d);
        store.insert(name, w)?;
    }
    insert_norm(store, "backbone.norm_out", d)?;
    let w = xavier(&mut rng.derive("backbone.head"), d, cfg.vocab_size);
    store.insert("backbone.head", w)?;
    Ok(())
}

/// Per-layer recurrent state: `n_layers × n_heads` matrices of `d_head×d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvState<T = f64> {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub data: Vec<T>,
    pub steps: u64,
}

impl<T: num_traits::Float> WkvState<T> {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let dh = cfg.d_head();
        WkvState {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_head: dh,
            data: vec![T::zero(); cfg.n_layers * cfg.n_heads * dh * dh],
            steps: 0,
        }
    }

    pub fn layer_len(&self) -> usize {
        self.n_heads * self.d_head * self.d_head
    }

    pub fn layer(&self, l: usize) -> &[T] {
        let n = self.layer_len();
        &self.data[l * n..(l + 1) * n]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [T] {
        let n = self.layer_len();
        &mut self.data[l * n..(l + 1) * n]
    }

    /// Bytes held by the state matrices. Depends on the configuration only.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    /// Frobenius norm of head `h` in layer `l`.
    pub fn head_norm(&self, l: usize, h: usize) -> f64 {
        let n = self.d_head * self.d_head;
        self.layer(l)[h * n..(h + 1) * n]
            .iter()
            .map(|x| x.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-head projections for one or more positions.
#[derive(Clone, Debug)]
pub struct MixingInputs {
    pub r: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-channel rates `sigmoid(x·W_a)`.
    pub a_channel: Tensor,
    /// Per-head rate: mean of `a_channel` over the head's channels, `L×H`.
    pub a: Tensor,
    /// Raw decay logits `x·W_w + b_w`, unbounded.
    pub w: Tensor,
}

struct MixingVars {
    r: Var,
    k: Var,
    v: Var,
    a_channel: Var,
    a: Var,
    w: Var,
}

fn project_vars(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    xn: Var,
) -> Result<MixingVars> {
    let (l, _) = tape.value(xn).dims2()?;
    let (h, dh) = (cfg.n_heads, cfg.d_head());
    let proj = |tape: &mut Tape, part: &str| -> Result<Var> {
        let w = tape.param_named(store, &layer_name(layer, part))?;
        tape.matmul(xn, w)
    };
    let r = proj(tape, "w_r")?;
    let kp = proj(tape, "w_k")?;
    let v = proj(tape, "w_v")?;
    let ap = proj(tape, "w_a")?;
    let wp = proj(tape, "w_w")?;
    let wb = tape.param_named(store, &layer_name(layer, "w_w.bias"))?;
    let w = tape.add_row(wp, wb)?;
    let kh = tape.reshape(kp, &[l * h, dh])?;
    let kn = tape.normalize_rows(kh, KEY_EPS)?;
    let k = tape.reshape(kn, &[l, h * dh])?;
    let a_channel = tape.sigmoid(ap);
    let a3 = tape.reshape(a_channel, &[l, h, dh])?;
    let a = tape.reduce(ReduceOp::Mean, a3, 2)?;
    Ok(MixingVars {
        r,
        k,
        v,
        a_channel,
        a,
        w,
    })
}

/// Projects normalized inputs `xn` (`L×d_model`, or a single `d_model`
/// vector) into the per-head recurrence inputs of `layer`.
pub fn project_mixing_inputs(
    store: &ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    xn: &Tensor,
) -> Result<MixingInputs> {
    let x = match xn.rank() {
        1 => xn.reshape(&[1, xn.numel()])?,
        _ => xn.clone(),
    };
    check_width("project_mixing_inputs", &x, cfg.d_model)?;
    let mut tape = Tape::frozen();
    let xv = tape.constant(x);
    let m = project_vars(&mut tape, store, cfg, layer, xv)?;
    Ok(MixingInputs {
        r: tape.value(m.r).clone(),
        k: tape.value(m.k).clone(),
        v: tape.value(m.v).clone(),
        a_channel: tape.value(m.a_channel).clone(),
        a: tape.value(m.a).clone(),
        w: tape.value(m.w).clone(),
    })
}

fn check_width(op: &'static str, x: &Tensor, d: usize) -> Result<()> {
    let (_, c) = x.dims2()?;
    if c != d {
        return Err(Error::shape(op, &[d], &[c]));
    }
    Ok(())
}

/// Time-mixing block on already-normalized input: projections, the scan and
/// the output projection. Returns the block output and the final state.
pub fn time_mix(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    xn: Var,
    state0: Option<&[f64]>,
) -> Result<(Var, Vec<f64>)> {
    let m = project_vars(tape, store, cfg, layer, xn)?;
    let decay = tape.neg_exp_exp(m.w);
    let (o, state) = tape.wkv7(m.r, m.k, m.v, m.a, decay, cfg.n_heads, state0)?;
    let wo = tape.param_named(store, &layer_name(layer, "w_o"))?;
    Ok((tape.matmul(o, wo)?, state))
}

/// Runs the time-mixing block of `layer` over `xn` from `state0`, off-tape.
pub fn wkv7_scan(
    store: &ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    state0: &[f64],
    xn: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_width("wkv7_scan", xn, cfg.d_model)?;
    let mut tape = Tape::frozen();
    let x = tape.constant(xn.clone());
    let (o, s) = time_mix(&mut tape, store, cfg, layer, x, Some(state0))?;
    Ok((tape.value(o).clone(), s))
}

/// `relu(x·W_ffn1)·W_ffn2`.
pub fn channel_mix(tape: &mut Tape, store: &ParamStore, layer: usize, xn: Var) -> Result<Var> {
    let w1 = tape.param_named(store, &layer_name(layer, "ffn1"))?;
    let w2 = tape.param_named(store, &layer_name(layer, "ffn2"))?;
    let h = tape.matmul(xn, w1)?;
    let h = tape.relu(h);
    tape.matmul(h, w2)
}

fn norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param_named(store, &format!("{prefix}.scale"))?;
    let b = tape.param_named(store, &format!("{prefix}.offset"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Token embedding lookup.
pub fn embed_tokens(tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
    let e = tape.param_named(store, "backbone.emb")?;
    tape.gather_rows(e, ids)
}

pub struct TrunkOutput {
    /// Final-normalized hidden states, `L×d_model`.
    pub hidden: Var,
    pub state: WkvState,
}

/// All layers plus the final norm, without the LM head.
pub fn forward_trunk(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    embedded: Var,
    state0: Option<&WkvState>,
) -> Result<TrunkOutput> {
    check_width("forward_lm", tape.value(embedded), cfg.d_model)?;
    let (l, _) = tape.value(embedded).dims2()?;
    let mut state = match state0 {
        Some(s) => s.clone(),
        None => WkvState::new(cfg),
    };
    if state.data.len() != cfg.n_layers * state.layer_len() || state.d_head != cfg.d_head() {
        return Err(Error::shape(
            "forward_lm state",
            &[cfg.n_layers, cfg.n_heads, cfg.d_head()],
            &[state.n_layers, state.n_heads, state.d_head],
        ));
    }
    let mut x = embedded;
    for layer in 0..cfg.n_layers {
        let xn = norm(tape, store, &layer_name(layer, "norm1"), x)?;
        let (tm, s) = time_mix(tape, store, cfg, layer, xn, Some(state.layer(layer)))?;
        state.layer_mut(layer).copy_from_slice(&s);
        x = tape.add(x, tm)?;
        let xn = norm(tape, store, &layer_name(layer, "norm2"), x)?;
        let cm = channel_mix(tape, store, layer, xn)?;
        x = tape.add(x, cm)?;
    }
    state.steps += l as u64;
    let hidden = norm(tape, store, "backbone.norm_out", x)?;
    Ok(TrunkOutput { hidden, state })
}

/// LM head applied to final-normalized hidden rows.
pub fn lm_head(tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
    let w = tape.param_named(store, "backbone.head")?;
    tape.matmul(hidden, w)
}

pub struct LmOutput {
    pub logits: Var,
    pub hidden: Var,
    pub state: WkvState,
}

/// Full forward over an embedded sequence: trunk, final norm, LM head.
pub fn forward_lm(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &BackboneConfig,
    embedded: Var,
    state0: Option<&WkvState>,
) -> Result<LmOutput> {
    let t = forward_trunk(tape, store, cfg, embedded, state0)?;
    let logits = lm_head(tape, store, t.hidden)?;
    Ok(LmOutput {
        logits,
        hidden: t.hidden,
        state: t.state,
    })
}

/// Off-tape convenience: logits and final state for an embedded sequence.
pub fn forward_lm_values(
    store: &ParamStore,
    cfg: &BackboneConfig,
    embedded: &Tensor,
    state0: Option<&WkvState>,
) -> Result<(Tensor, WkvState)> {
    let mut tape = Tape::frozen();
    debug_assert_eq!(tape.mode(), TapeMode::Frozen);
    let x = tape.constant(embedded.clone());
    let out = forward_lm(&mut tape, store, cfg, x, state0)?;
    Ok((tape.value(out.logits).clone(), out.state))
}
