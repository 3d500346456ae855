//! From encoder features to backbone inputs: strided length compression,
//! the MLP adapter, and concatenation with text embeddings.
//!
//! Feature sequences are stored position-major (`L×C`, one row per
//! position), which is the transpose of the channel-major layout the
//! convolution formula is usually written in.

mod mfea;

pub use mfea::{encode_features, parse_features, read_features, write_features, MFEA_MAGIC, MFEA_VERSION};

use serde::{Deserialize, Serialize};

use crate::backbone::{xavier, LN_EPS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Timeseries,
    Precomputed,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Audio => 1,
            Modality::Timeseries => 2,
            Modality::Precomputed => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Modality::Image,
            1 => Modality::Audio,
            2 => Modality::Timeseries,
            3 => Modality::Precomputed,
            _ => return None,
        })
    }
}

/// Encoder output: `L×C` features plus where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub modality: Modality,
    pub meta: String,
}

impl FeatureSequence {
    pub fn new(features: Tensor, modality: Modality, meta: impl Into<String>) -> Result<Self> {
        let (l, c) = features.dims2()?;
        if l == 0 || c == 0 {
            return Err(Error::Domain {
                op: "FeatureSequence",
                detail: format!("empty feature matrix {l}×{c}"),
            });
        }
        if !features.all_finite() {
            return Err(Error::Domain {
                op: "FeatureSequence",
                detail: "non-finite feature value".into(),
            });
        }
        Ok(FeatureSequence {
            features,
            modality,
            meta: meta.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// `floor((L + 2p − k) / s) + 1`; `k = s = 0` is the pass-through length `L`.
pub fn output_length(l: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k == 0 && s == 0 {
        return Ok(l);
    }
    if s == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if l + 2 * p < k {
        return Err(Error::TooShort(format!(
            "length {l} with padding {p} is shorter than kernel {k}"
        )));
    }
    Ok((l + 2 * p - k) / s + 1)
}

/// Strided 1-D convolution with zero padding on both ends.
///
/// `x` is `L×C_in`, `w` is `C_out×C_in×k`, `b` is `C_out`; output is
/// `L'×C_out` with `y[t][c] = b[c] + Σᵢ Σⱼ w[c,i,j]·x[s·t + j − p][i]`.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (l, cin) = x.dims2()?;
    if w.rank() != 3 {
        return Err(Error::Rank {
            op: "conv1d",
            expected: 3,
            got: w.shape().to_vec(),
        });
    }
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin {
        return Err(Error::shape("conv1d channels", &[cin], &[wcin]));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv1d bias", &[cout], b.shape()));
    }
    if k == 0 {
        return Err(Error::Config("kernel must be at least 1".into()));
    }
    let lo = output_length(l, k, stride, padding)?;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0; lo * cout];
    for t in 0..lo {
        for c in 0..cout {
            let mut acc = b.data()[c];
            for i in 0..cin {
                for j in 0..k {
                    let pos = (stride * t + j) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < l {
                        acc += ws[(c * cin + i) * k + j] * xs[pos as usize * cin + i];
                    }
                }
            }
            out[t * cout + c] = acc;
        }
    }
    Tensor::matrix(lo, cout, out)
}

/// Length compressor settings. `kernel = stride = 0` means pass-through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressorConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Output channels; 0 keeps the input width.
    pub c_out: usize,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig::passthrough()
    }
}

impl CompressorConfig {
    pub fn passthrough() -> Self {
        CompressorConfig {
            kernel: 0,
            stride: 0,
            padding: 0,
            c_out: 0,
        }
    }

    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        CompressorConfig {
            kernel,
            stride,
            padding,
            c_out: 0,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.kernel == 0 && self.stride == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_passthrough() {
            return Ok(());
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "compressor kernel {} / stride {} must both be ≥ 1 (or both 0 for pass-through)",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self, c_in: usize) -> usize {
        if self.is_passthrough() || self.c_out == 0 {
            c_in
        } else {
            self.c_out
        }
    }

    /// Sequence length after compression.
    pub fn compressed_len(&self, l: usize) -> Result<usize> {
        if self.is_passthrough() {
            Ok(l)
        } else {
            output_length(l, self.kernel, self.stride, self.padding)
        }
    }
}

/// Inserts `compressor.weight` and `compressor.bias` unless pass-through.
///
/// When input and output widths agree the kernel starts as a per-channel
/// moving average (plus small noise), so an untrained compressor already
/// passes a smoothed copy of its input; otherwise it is drawn Xavier-normal.
pub fn init_compressor(cfg: &CompressorConfig, c_in: usize, rng: &RngStream, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    if cfg.is_passthrough() {
        return Ok(());
    }
    let (k, cout) = (cfg.kernel, cfg.out_channels(c_in));
    let mut r = rng.derive("compressor.weight");
    let mut w = vec![0.0; cout * c_in * k];
    if cout == c_in {
        for (idx, v) in w.iter_mut().enumerate() {
            let (c, i) = (idx / (c_in * k), (idx / k) % c_in);
            *v = if c == i { 1.0 / k as f64 } else { 0.0 } + r.normal(0.0, 0.01);
        }
    } else {
        w = xavier(&mut r, c_in * k, cout).into_data();
    }
    store.insert("compressor.weight", Tensor::new(&[cout, c_in, k], w)?)?;
    store.insert("compressor.bias", Tensor::zeros(&[cout]))?;
    Ok(())
}

/// Applies the compressor to an `L×C_in` node.
pub fn compress(tape: &mut Tape, store: &ParamStore, cfg: &CompressorConfig, x: Var) -> Result<Var> {
    if cfg.is_passthrough() {
        return Ok(x);
    }
    let w = tape.param_named(store, "compressor.weight")?;
    let b = tape.param_named(store, "compressor.bias")?;
    tape.conv1d(x, w, b, cfg.stride, cfg.padding)
}

/// Off-tape compression of a feature sequence.
pub fn conv1d_compress(x: &FeatureSequence, cfg: &CompressorConfig, store: &ParamStore) -> Result<FeatureSequence> {
    if cfg.is_passthrough() {
        return Ok(x.clone());
    }
    let y = conv1d_forward(
        &x.features,
        store.value("compressor.weight")?,
        store.value("compressor.bias")?,
        cfg.stride,
        cfg.padding,
    )?;
    FeatureSequence::new(y, x.modality, x.meta.clone())
}

/// Adapter shape. `d_in`/`d_out` of 0 are filled in from the encoder width
/// and the model width when the bundle is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub d_in: usize,
    pub scale: usize,
    pub d_out: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d_in: 0,
            scale: 4,
            d_out: 0,
        }
    }
}

impl AdapterConfig {
    pub fn new(d_in: usize, scale: usize, d_out: usize) -> Self {
        AdapterConfig { d_in, scale, d_out }
    }

    pub fn hidden(&self) -> usize {
        self.scale * self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.scale == 0 {
            return Err(Error::Config(format!(
                "adapter dimensions must be positive: d_in {} scale {} d_out {}",
                self.d_in, self.scale, self.d_out
            )));
        }
        Ok(())
    }

    /// Scalar count of the input norm, both weight matrices and both biases.
    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        2 * self.d_in + self.d_in * h + h + h * self.d_out + self.d_out
    }
}

/// Inserts `adapter.norm.*`, `adapter.linear1[.bias]`, `adapter.linear2[.bias]`.
pub fn init_adapter(cfg: &AdapterConfig, rng: &RngStream, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden();
    store.insert("adapter.norm.scale", Tensor::ones(&[cfg.d_in]))?;
    store.insert("adapter.norm.offset", Tensor::zeros(&[cfg.d_in]))?;
    store.insert(
        "adapter.linear1",
        xavier(&mut rng.derive("adapter.linear1"), cfg.d_in, h),
    )?;
    store.insert("adapter.linear1.bias", Tensor::zeros(&[h]))?;
    store.insert(
        "adapter.linear2",
        xavier(&mut rng.derive("adapter.linear2"), h, cfg.d_out),
    )?;
    store.insert("adapter.linear2.bias", Tensor::zeros(&[cfg.d_out]))?;
    Ok(())
}

/// `Linear₂(ReLU(Linear₁(norm(x))))`, row by row.
pub fn adapt(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let g = tape.param_named(store, "adapter.norm.scale")?;
    let (_, c) = tape.value(x).dims2()?;
    if tape.value(g).shape() != [c] {
        return Err(Error::shape("adapt", tape.value(g).shape(), &[c]));
    }
    let o = tape.param_named(store, "adapter.norm.offset")?;
    let xn = tape.layer_norm(x, g, o, LN_EPS)?;
    let w1 = tape.param_named(store, "adapter.linear1")?;
    let b1 = tape.param_named(store, "adapter.linear1.bias")?;
    let w2 = tape.param_named(store, "adapter.linear2")?;
    let b2 = tape.param_named(store, "adapter.linear2.bias")?;
    let h = tape.matmul(xn, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add_row(y, b2)
}

/// Off-tape adapter application.
pub fn adapt_values(features: &FeatureSequence, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::frozen();
    let x = tape.constant(features.features.clone());
    let y = adapt(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    ModalityFirst,
    TextFirst,
}

/// Concatenates modality and text embeddings. `answer` flags which text
/// positions are answer tokens; the returned mask is false on every
/// modality position.
pub fn fuse(modality: &Tensor, text: &Tensor, answer: &[bool], layout: Layout) -> Result<(Tensor, Vec<bool>)> {
    let (_, dm) = modality.dims2()?;
    let (t, dt) = text.dims2()?;
    if dm != dt {
        return Err(Error::shape("fuse", modality.shape(), text.shape()));
    }
    if answer.len() != t {
        return Err(Error::shape("fuse mask", &[t], &[answer.len()]));
    }
    let lm = modality.shape()[0];
    Ok(match layout {
        Layout::ModalityFirst => (
            Tensor::concat_rows(&[modality, text])?,
            std::iter::repeat_n(false, lm).chain(answer.iter().copied()).collect(),
        ),
        Layout::TextFirst => (
            Tensor::concat_rows(&[text, modality])?,
            answer.iter().copied().chain(std::iter::repeat_n(false, lm)).collect(),
        ),
    })
}

/// Tape form of [`fuse`] (values only; the mask is built by the caller).
pub fn fuse_vars(tape: &mut Tape, modality: Var, text: Var, layout: Layout) -> Result<Var> {
    let (dm, dt) = (tape.value(modality).dims2()?.1, tape.value(text).dims2()?.1);
    if dm != dt {
        return Err(Error::shape(
            "fuse",
            tape.value(modality).shape(),
            tape.value(text).shape(),
        ));
    }
    match layout {
        Layout::ModalityFirst => tape.concat_rows(&[modality, text]),
        Layout::TextFirst => tape.concat_rows(&[text, modality]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_cases() {
        assert_eq!(output_length(577, 3, 2, 0).unwrap(), 288);
        assert_eq!(output_length(577, 5, 4, 0).unwrap(), 144);
        assert_eq!(output_length(33, 1, 1, 0).unwrap(), 33);
        assert!(matches!(output_length(2, 5, 1, 1), Err(Error::TooShort(_))));
    }

    #[test]
    fn conv_hand_example() {
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv1d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[4, 2]);
        let w = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(
            conv1d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn passthrough_changes_nothing() {
        let mut store = ParamStore::new();
        let cfg = CompressorConfig::passthrough();
        init_compressor(&cfg, 3, &RngStream::new(0), &mut store).unwrap();
        assert!(store.is_empty());
        let f = FeatureSequence::new(Tensor::ones(&[4, 3]), Modality::Image, "").unwrap();
        assert_eq!(conv1d_compress(&f, &cfg, &store).unwrap(), f);
    }

    #[test]
    fn adapter_counts_and_kill() {
        let cfg = AdapterConfig::new(6, 2, 5);
        let mut store = ParamStore::new();
        init_adapter(&cfg, &RngStream::new(1), &mut store).unwrap();
        assert_eq!(store.count("adapter"), cfg.param_count());
        // strongly negative first-layer bias kills every hidden unit
        let id = store.id("adapter.linear1.bias").unwrap();
        store.get_mut(id).value = Tensor::full(&[12], -1e6);
        let f = FeatureSequence::new(Tensor::ones(&[3, 6]), Modality::Audio, "").unwrap();
        assert!(adapt_values(&f, &store).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_lengths_and_masks() {
        let m = Tensor::ones(&[3, 2]);
        let t = Tensor::zeros(&[2, 2]);
        let (f, mask) = fuse(&m, &t, &[false, true], Layout::ModalityFirst).unwrap();
        assert_eq!(f.shape(), &[5, 2]);
        assert_eq!(mask, vec![false, false, false, false, true]);
        let (f, mask) = fuse(&Tensor::zeros(&[0, 2]), &t, &[true, true], Layout::ModalityFirst).unwrap();
        assert_eq!(f, t);
        assert_eq!(mask, vec![true, true]);
        assert!(fuse(&Tensor::zeros(&[1, 3]), &t, &[true, true], Layout::TextFirst).is_err());
    }
}
