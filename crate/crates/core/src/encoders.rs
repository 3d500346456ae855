//! Synthetic modality encoders.
//!
//! None of these are pretrained networks. Image and audio encoders are pure
//! re-tilings of the raw signal (patches and strided frames); the time-series
//! side offers a non-overlapping patch embedding and a small causal dilated
//! convolution stack, the only encoder with weights. Features computed
//! offline by any other model can be fed in through MFEA files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::xavier;
use crate::error::{Error, Result};
use crate::modality::{read_features, FeatureSequence, Modality};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn one() -> usize {
    1
}

fn frame_default() -> usize {
    400
}

fn hop_default() -> usize {
    320
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Non-overlapping `patch×patch` tiles, flattened row-major with channels
    /// innermost. With `cls_token` the mean patch is prepended as a global
    /// feature.
    ImagePatch {
        patch: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default)]
        cls_token: bool,
    },
    /// Raw strided windows of a waveform.
    AudioFrame {
        #[serde(default = "frame_default")]
        frame: usize,
        #[serde(default = "hop_default")]
        hop: usize,
    },
    /// Point-wise lift to `channels`, then `blocks` residual causal
    /// convolutions (kernel 2, dilation `2^i`) with tanh.
    TsPointwiseDilated { channels: usize, blocks: usize },
    /// Non-overlapping patches of a series; the tail remainder is dropped.
    TsPatch { patch: usize },
    /// Features read from MFEA files of the given width.
    Precomputed { width: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::ImagePatch {
            patch: 8,
            channels: 1,
            cls_token: false,
        }
    }
}

impl EncoderSpec {
    pub fn width(&self) -> usize {
        match self {
            EncoderSpec::ImagePatch { patch, channels, .. } => patch * patch * channels,
            EncoderSpec::AudioFrame { frame, .. } => *frame,
            EncoderSpec::TsPointwiseDilated { channels, .. } => *channels,
            EncoderSpec::TsPatch { patch } => *patch,
            EncoderSpec::Precomputed { width } => *width,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            EncoderSpec::ImagePatch { .. } => Modality::Image,
            EncoderSpec::AudioFrame { .. } => Modality::Audio,
            EncoderSpec::TsPointwiseDilated { .. } | EncoderSpec::TsPatch { .. } => Modality::Timeseries,
            EncoderSpec::Precomputed { .. } => Modality::Precomputed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            EncoderSpec::ImagePatch { patch, channels, .. } => *patch > 0 && *channels > 0,
            EncoderSpec::AudioFrame { frame, hop } => *frame > 0 && *hop > 0,
            EncoderSpec::TsPointwiseDilated { channels, .. } => *channels > 0,
            EncoderSpec::TsPatch { patch } => *patch > 0,
            EncoderSpec::Precomputed { width } => *width > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("encoder sizes must be positive: {self:?}")))
        }
    }
}

/// Raw input for an encoder.
#[derive(Clone, Debug)]
pub enum EncoderInput {
    /// `H×W×C` image.
    Image(Tensor),
    Waveform(Tensor),
    Series(Tensor),
    Features(FeatureSequence),
}

/// Splits an `H×W×C` image into `P×P` patches, top-left to bottom-right.
pub fn encode_image_patches(image: &Tensor, p: usize, cls_token: bool) -> Result<FeatureSequence> {
    if image.rank() != 3 {
        return Err(Error::Rank {
            op: "encode_image_patches",
            expected: 3,
            got: image.shape().to_vec(),
        });
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if p == 0 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::Domain {
            op: "encode_image_patches",
            detail: format!("{h}×{w} image cannot be tiled by {p}×{p} patches"),
        });
    }
    let (ph, pw) = (h / p, w / p);
    let width = p * p * c;
    let n = ph * pw;
    let extra = usize::from(cls_token);
    let mut data = vec![0.0; (n + extra) * width];
    let img = image.data();
    for py in 0..ph {
        for px in 0..pw {
            let row = &mut data[(extra + py * pw + px) * width..(extra + py * pw + px + 1) * width];
            for y in 0..p {
                let src = ((py * p + y) * w + px * p) * c;
                row[y * p * c..(y + 1) * p * c].copy_from_slice(&img[src..src + p * c]);
            }
        }
    }
    if cls_token {
        for j in 0..width {
            let s: f64 = (0..n).map(|i| data[(1 + i) * width + j]).sum();
            data[j] = s / n as f64;
        }
    }
    FeatureSequence::new(
        Tensor::matrix(n + extra, width, data)?,
        Modality::Image,
        format!("patches {p}x{p} of {h}x{w}x{c}"),
    )
}

/// Strided raw frames: `⌊(N − F)/H⌋ + 1` rows of `F` samples.
pub fn encode_audio_frames(waveform: &Tensor, frame: usize, hop: usize) -> Result<FeatureSequence> {
    let n = waveform.numel();
    if frame == 0 || hop == 0 {
        return Err(Error::Config("frame and hop must be positive".into()));
    }
    if n < frame {
        return Err(Error::TooShort(format!("{n} samples is shorter than one {frame}-sample frame")));
    }
    let count = (n - frame) / hop + 1;
    let wav = waveform.data();
    let mut data = Vec::with_capacity(count * frame);
    for t in 0..count {
        data.extend_from_slice(&wav[t * hop..t * hop + frame]);
    }
    FeatureSequence::new(
        Tensor::matrix(count, frame, data)?,
        Modality::Audio,
        format!("frames F={frame} H={hop}"),
    )
}

/// `⌊L/patch⌋` non-overlapping windows of a series.
pub fn encode_ts_patch(series: &Tensor, patch: usize) -> Result<FeatureSequence> {
    let l = series.numel();
    if patch == 0 {
        return Err(Error::Config("patch must be positive".into()));
    }
    if l < patch {
        return Err(Error::TooShort(format!("series of {l} is shorter than patch {patch}")));
    }
    let count = l / patch;
    FeatureSequence::new(
        Tensor::matrix(count, patch, series.data()[..count * patch].to_vec())?,
        Modality::Timeseries,
        format!("patch {patch}"),
    )
}

/// Receptive field of the dilated stack: `2^blocks` positions.
pub fn receptive_field(blocks: usize) -> usize {
    1 << blocks
}

/// Inserts encoder weights (only the dilated stack has any).
pub fn init_encoder(spec: &EncoderSpec, rng: &RngStream, store: &mut ParamStore) -> Result<()> {
    spec.validate()?;
    if let EncoderSpec::TsPointwiseDilated { channels, blocks } = *spec {
        store.insert("encoder.lift", xavier(&mut rng.derive("encoder.lift"), 1, channels))?;
        store.insert("encoder.lift.bias", Tensor::zeros(&[channels]))?;
        for b in 0..blocks {
            for tap in ["past", "now"] {
                let name = format!("encoder.block{b}.{tap}");
                let w = xavier(&mut rng.derive(&name), channels, channels).scale(0.5);
                store.insert(name, w)?;
            }
            store.insert(format!("encoder.block{b}.bias"), Tensor::zeros(&[channels]))?;
        }
    }
    Ok(())
}

fn dilated_stack(tape: &mut Tape, store: &ParamStore, blocks: usize, series: Var) -> Result<Var> {
    let l = tape.value(series).numel();
    let x = tape.reshape(series, &[l, 1])?;
    let lift = tape.param_named(store, "encoder.lift")?;
    let lb = tape.param_named(store, "encoder.lift.bias")?;
    let h = tape.matmul(x, lift)?;
    let mut h = tape.add_row(h, lb)?;
    for b in 0..blocks {
        let past = tape.param_named(store, &format!("encoder.block{b}.past"))?;
        let now = tape.param_named(store, &format!("encoder.block{b}.now"))?;
        let bias = tape.param_named(store, &format!("encoder.block{b}.bias"))?;
        let shifted = tape.shift_rows(h, 1 << b)?;
        let zp = tape.matmul(shifted, past)?;
        let zn = tape.matmul(h, now)?;
        let z = tape.add(zp, zn)?;
        let z = tape.add_row(z, bias)?;
        let z = tape.tanh(z);
        h = tape.add(h, z)?;
    }
    Ok(h)
}

/// Causal dilated convolution stack over a scalar series; output `L×C`.
pub fn encode_ts_pointwise(series: &Tensor, store: &ParamStore, blocks: usize) -> Result<FeatureSequence> {
    let mut tape = Tape::frozen();
    let s = tape.constant(series.clone());
    let y = dilated_stack(&mut tape, store, blocks, s)?;
    FeatureSequence::new(
        tape.value(y).clone(),
        Modality::Timeseries,
        format!("dilated x{blocks}"),
    )
}

pub fn load_precomputed(path: &Path) -> Result<FeatureSequence> {
    read_features(path)
}

fn mismatch(spec: &EncoderSpec, input: &EncoderInput) -> Error {
    Error::Config(format!(
        "encoder {:?} cannot consume {} input",
        spec.modality(),
        match input {
            EncoderInput::Image(_) => "image",
            EncoderInput::Waveform(_) => "waveform",
            EncoderInput::Series(_) => "series",
            EncoderInput::Features(_) => "precomputed",
        }
    ))
}

/// Runs the encoder and places its `L×C` output on the tape. Weighted
/// encoders record their ops so that gradients reach `encoder.*` when
/// those parameters are trainable.
pub fn encode(tape: &mut Tape, store: &ParamStore, spec: &EncoderSpec, input: &EncoderInput) -> Result<Var> {
    if let (EncoderSpec::TsPointwiseDilated { blocks, .. }, EncoderInput::Series(s)) = (spec, input) {
        let sv = tape.constant(s.clone());
        return dilated_stack(tape, store, *blocks, sv);
    }
    let f = encode_values(store, spec, input)?;
    Ok(tape.constant(f.features))
}

/// Off-tape encoding.
pub fn encode_values(store: &ParamStore, spec: &EncoderSpec, input: &EncoderInput) -> Result<FeatureSequence> {
    let f = match (spec, input) {
        (EncoderSpec::ImagePatch { patch, cls_token, .. }, EncoderInput::Image(img)) => {
            encode_image_patches(img, *patch, *cls_token)?
        }
        (EncoderSpec::AudioFrame { frame, hop }, EncoderInput::Waveform(w)) => {
            encode_audio_frames(w, *frame, *hop)?
        }
        (EncoderSpec::TsPointwiseDilated { blocks, .. }, EncoderInput::Series(s)) => {
            encode_ts_pointwise(s, store, *blocks)?
        }
        (EncoderSpec::TsPatch { patch }, EncoderInput::Series(s)) => encode_ts_patch(s, *patch)?,
        (EncoderSpec::Precomputed { .. }, EncoderInput::Features(f)) => f.clone(),
        _ => return Err(mismatch(spec, input)),
    };
    if f.width() != spec.width() {
        return Err(Error::shape("encoder output width", &[spec.width()], &[f.width()]));
    }
    Ok(f)
}

/// Reads a single-column CSV of values, with an optional `value` header.
pub fn read_series_csv(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_series_csv(file)
}

pub fn parse_series_csv(reader: impl std::io::Read) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 {
            return Err(Error::Format {
                offset: rec.position().map_or(0, |p| p.byte()),
                detail: format!("line {} has {} columns, expected 1", i + 1, rec.len()),
            });
        }
        let field = &rec[0];
        if i == 0 && field == "value" {
            continue;
        }
        let v: f64 = field.parse().map_err(|_| Error::Format {
            offset: rec.position().map_or(0, |p| p.byte()),
            detail: format!("line {}: `{field}` is not a number", i + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}
