//! Allocation-free token-by-token inference.
//!
//! A [`Session`] copies the backbone weights once into its working
//! precision, preallocates every scratch buffer, and then advances one
//! position per call without touching the heap. The only state carried
//! between calls is the fixed-size [`WkvState`] plus the residual stream
//! buffers, so memory use does not depend on how many tokens have been fed.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{layer_name, BackboneConfig, WkvState, KEY_EPS, LN_EPS};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

struct LayerWeights<T> {
    n1_scale: Vec<T>,
    n1_offset: Vec<T>,
    w_r: Vec<T>,
    w_k: Vec<T>,
    w_v: Vec<T>,
    w_a: Vec<T>,
    w_w: Vec<T>,
    w_w_bias: Vec<T>,
    w_o: Vec<T>,
    n2_scale: Vec<T>,
    n2_offset: Vec<T>,
    ffn1: Vec<T>,
    ffn2: Vec<T>,
}

struct Scratch<T> {
    x: Vec<T>,
    xn: Vec<T>,
    r: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    w: Vec<T>,
    o: Vec<T>,
    tmp: Vec<T>,
    ffn: Vec<T>,
    u: Vec<T>,
    a_head: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

pub struct Session<T: Float> {
    cfg: BackboneConfig,
    emb: Vec<T>,
    layers: Vec<LayerWeights<T>>,
    out_scale: Vec<T>,
    out_offset: Vec<T>,
    head: Vec<T>,
    state: WkvState<T>,
    s: Scratch<T>,
}

fn load<T: Float>(store: &ParamStore, name: &str) -> Result<Vec<T>> {
    Ok(store
        .value(name)?
        .data()
        .iter()
        .map(|&v| T::from(v).unwrap())
        .collect())
}

impl<T: Float> Session<T> {
    pub fn new(store: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let g = |part: &str| load::<T>(store, &layer_name(l, part));
            layers.push(LayerWeights {
                n1_scale: g("norm1.scale")?,
                n1_offset: g("norm1.offset")?,
                w_r: g("w_r")?,
                w_k: g("w_k")?,
                w_v: g("w_v")?,
                w_a: g("w_a")?,
                w_w: g("w_w")?,
                w_w_bias: g("w_w.bias")?,
                w_o: g("w_o")?,
                n2_scale: g("norm2.scale")?,
                n2_offset: g("norm2.offset")?,
                ffn1: g("ffn1")?,
                ffn2: g("ffn2")?,
            });
        }
        let z = |n: usize| vec![T::zero(); n];
        Ok(Session {
            cfg: cfg.clone(),
            emb: load(store, "backbone.emb")?,
            layers,
            out_scale: load(store, "backbone.norm_out.scale")?,
            out_offset: load(store, "backbone.norm_out.offset")?,
            head: load(store, "backbone.head")?,
            state: WkvState::new(cfg),
            s: Scratch {
                x: z(d),
                xn: z(d),
                r: z(d),
                k: z(d),
                v: z(d),
                a: z(d),
                w: z(d),
                o: z(d),
                tmp: z(d),
                ffn: z(cfg.d_ffn()),
                u: z(cfg.d_head()),
                a_head: z(cfg.n_heads),
                hidden: z(d),
                logits: z(cfg.vocab_size),
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn state(&self) -> &WkvState<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: WkvState<T>) -> Result<()> {
        if state.data.len() != self.state.data.len() {
            return Err(Error::shape("set_state", &[self.state.data.len()], &[state.data.len()]));
        }
        self.state = state;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state.data.iter_mut().for_each(|v| *v = T::zero());
        self.state.steps = 0;
    }

    /// Final-normalized hidden vector of the last position.
    pub fn hidden(&self) -> &[T] {
        &self.s.hidden
    }

    pub fn logits(&self) -> &[T] {
        &self.s.logits
    }

    /// Feeds one token id and returns its logits.
    pub fn step_token(&mut self, id: usize) -> Result<&[T]> {
        let d = self.cfg.d_model;
        if id >= self.cfg.vocab_size {
            return Err(Error::Domain {
                op: "step_token",
                detail: format!("token {id} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        self.s.x.copy_from_slice(&self.emb[id * d..(id + 1) * d]);
        self.advance();
        Ok(&self.s.logits)
    }

    /// Feeds one already-embedded position and returns its logits.
    pub fn step_embedded(&mut self, x: &[T]) -> Result<&[T]> {
        if x.len() != self.cfg.d_model {
            return Err(Error::shape("step_embedded", &[self.cfg.d_model], &[x.len()]));
        }
        self.s.x.copy_from_slice(x);
        self.advance();
        Ok(&self.s.logits)
    }

    fn advance(&mut self) {
        let d = self.cfg.d_model;
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let f = self.cfg.d_ffn();
        let eps = T::from(LN_EPS).unwrap();
        let key_eps = T::from(KEY_EPS).unwrap();
        let inv_dh = T::one() / T::from(dh).unwrap();
        let s = &mut self.s;
        for (l, lw) in self.layers.iter().enumerate() {
            kernels::layer_norm_row(&s.x, &lw.n1_scale, &lw.n1_offset, eps, &mut s.xn);
            kernels::matmul(&s.xn, &lw.w_r, &mut s.r, 1, d, d);
            kernels::matmul(&s.xn, &lw.w_k, &mut s.tmp, 1, d, d);
            kernels::matmul(&s.xn, &lw.w_v, &mut s.v, 1, d, d);
            kernels::matmul(&s.xn, &lw.w_a, &mut s.a, 1, d, d);
            kernels::matmul(&s.xn, &lw.w_w, &mut s.w, 1, d, d);
            for hh in 0..h {
                let span = hh * dh..(hh + 1) * dh;
                kernels::normalize(&s.tmp[span.clone()], key_eps, &mut s.k[span.clone()]);
                let mut acc = T::zero();
                for &ap in &s.a[span] {
                    acc = acc + kernels::sigmoid(ap);
                }
                s.a_head[hh] = acc * inv_dh;
            }
            for (w, &b) in s.w.iter_mut().zip(&lw.w_w_bias) {
                *w = kernels::neg_exp_exp(*w + b);
            }
            let st = self.state.layer_mut(l);
            for hh in 0..h {
                let span = hh * dh..(hh + 1) * dh;
                kernels::wkv7_step(
                    &mut st[hh * dh * dh..(hh + 1) * dh * dh],
                    &s.r[span.clone()],
                    &s.k[span.clone()],
                    &s.v[span.clone()],
                    s.a_head[hh],
                    &s.w[span.clone()],
                    &mut s.u,
                    &mut s.o[span],
                );
            }
            kernels::matmul(&s.o, &lw.w_o, &mut s.tmp, 1, d, d);
            for (x, &t) in s.x.iter_mut().zip(&s.tmp) {
                *x = *x + t;
            }
            kernels::layer_norm_row(&s.x, &lw.n2_scale, &lw.n2_offset, eps, &mut s.xn);
            kernels::matmul(&s.xn, &lw.ffn1, &mut s.ffn, 1, d, f);
            for v in s.ffn.iter_mut() {
                *v = v.max(T::zero());
            }
            kernels::matmul(&s.ffn, &lw.ffn2, &mut s.tmp, 1, f, d);
            for (x, &t) in s.x.iter_mut().zip(&s.tmp) {
                *x = *x + t;
            }
        }
        kernels::layer_norm_row(&s.x, &self.out_scale, &self.out_offset, eps, &mut s.hidden);
        kernels::matmul(&s.hidden, &self.head, &mut s.logits, 1, d, self.cfg.vocab_size);
        self.state.steps += 1;
    }
}
