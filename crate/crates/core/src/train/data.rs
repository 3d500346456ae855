//! Synthetic tasks and the JSONL dataset format.
//!
//! Token conventions shared by every task: 0 is padding/separator, 1 is the
//! beginning-of-answer prompt, and content tokens start at 2.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderInput;
use crate::error::{Error, Result};
use crate::modality::read_features;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const FIRST_CONTENT: usize = 2;

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: EncoderInput,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    /// Numeric target for forecasting samples.
    pub target: Option<Vec<f64>>,
}

/// Intensity that encodes content token `c` in a `grid×grid` caption image.
pub fn token_intensity(c: usize, grid: usize) -> f64 {
    (c + 1 - FIRST_CONTENT) as f64 / (grid * grid) as f64
}

/// Inverse of [`token_intensity`].
pub fn intensity_token(x: f64, grid: usize) -> usize {
    (x * (grid * grid) as f64).round() as usize + FIRST_CONTENT - 1
}

/// Caption-copy samples.
///
/// Each image is a `grid×grid` arrangement of constant `cell_px`-sized cells,
/// one cell per content token, and the answer lists the tokens row-major.
/// The cells hold a random permutation of the `grid²` content tokens, so
/// every token appears exactly once per image and can be decoded exactly
/// from its intensity level.
pub fn gen_caption_copy(rng: &mut RngStream, grid: usize, vocab: usize, cell_px: usize, n: usize) -> Result<Vec<Sample>> {
    let cells = grid * grid;
    if grid == 0 || cell_px == 0 {
        return Err(Error::Config("grid and cell_px must be positive".into()));
    }
    if vocab < cells + FIRST_CONTENT {
        return Err(Error::Config(format!(
            "vocabulary of {vocab} cannot hold {cells} content tokens plus 2 specials"
        )));
    }
    let side = grid * cell_px;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + cells).collect();
        rng.shuffle(&mut tokens);
        let mut img = vec![0.0; side * side];
        for (y, row) in img.chunks_mut(side).enumerate() {
            for (x, px) in row.iter_mut().enumerate() {
                *px = token_intensity(tokens[(y / cell_px) * grid + x / cell_px], grid);
            }
        }
        out.push(Sample {
            input: EncoderInput::Image(Tensor::new(&[side, side, 1], img)?),
            prompt: vec![BOS],
            answer: tokens,
            target: None,
        });
    }
    Ok(out)
}

/// Reads the token grid back from a caption image by sampling each cell's
/// top-left pixel.
pub fn decode_caption_image(image: &Tensor, grid: usize, cell_px: usize) -> Vec<usize> {
    let side = grid * cell_px;
    (0..grid * grid)
        .map(|i| {
            let (gy, gx) = (i / grid, i % grid);
            intensity_token(image.data()[(gy * cell_px) * side + gx * cell_px], grid)
        })
        .collect()
}

/// Number of stride-`h` windows of lookback `l` and horizon `h` in a
/// series of `n` values.
pub fn window_count(n: usize, l: usize, h: usize) -> usize {
    if n < l + h || h == 0 {
        0
    } else {
        (n - l - h) / h + 1
    }
}

/// A sum of one to three sinusoids with random period, phase and
/// amplitude, plus Gaussian noise of standard deviation `noise`.
pub fn gen_series(rng: &mut RngStream, n: usize, noise: f64) -> Vec<f64> {
    let k = 1 + rng.below(3);
    let comps: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let period = rng.uniform_range(8.0, 64.0);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let amp = rng.uniform_range(0.5, 1.5);
            (std::f64::consts::TAU / period, phase, amp)
        })
        .collect();
    (0..n)
        .map(|t| {
            let clean: f64 = comps.iter().map(|(w, p, a)| a * (w * t as f64 + p).sin()).sum();
            if noise > 0.0 {
                clean + rng.normal(0.0, noise)
            } else {
                clean
            }
        })
        .collect()
}

/// Standardizes a window with the lookback's mean and standard deviation
/// only, so nothing about the horizon leaks into the inputs.
pub fn standardize_window(lookback: &[f64], horizon: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = lookback.len() as f64;
    let mean = lookback.iter().sum::<f64>() / n;
    let var = lookback.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let f = |x: &f64| (x - mean) / std;
    (lookback.iter().map(f).collect(), horizon.iter().map(f).collect())
}

/// Splits series into standardized `(lookback, horizon)` windows at stride `h`.
pub fn windows(series: &[f64], l: usize, h: usize) -> Result<Vec<Sample>> {
    let count = window_count(series.len(), l, h);
    if count == 0 {
        return Err(Error::TooShort(format!(
            "series of {} cannot hold a {l}+{h} window",
            series.len()
        )));
    }
    Ok((0..count)
        .map(|w| {
            let s = w * h;
            let (lb, hz) = standardize_window(&series[s..s + l], &series[s + l..s + l + h]);
            Sample {
                input: EncoderInput::Series(Tensor::vector(lb)),
                prompt: vec![BOS],
                answer: vec![],
                target: Some(hz),
            }
        })
        .collect())
}

/// Forecasting windows from `n_series` generated series of length `len`.
pub fn gen_forecast(rng: &mut RngStream, n_series: usize, len: usize, l: usize, h: usize, noise: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for _ in 0..n_series {
        let s = gen_series(rng, len, noise);
        out.extend(windows(&s, l, h)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InlineImage {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    series: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<InlineImage>,
    prompt: Vec<usize>,
    answer: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
}

fn to_line(s: &Sample) -> Result<Line> {
    let mut line = Line {
        modality: String::new(),
        feature_file: None,
        series: None,
        image: None,
        prompt: s.prompt.clone(),
        answer: s.answer.clone(),
        target: s.target.clone(),
    };
    match &s.input {
        EncoderInput::Image(t) => {
            line.modality = "image".into();
            line.image = Some(InlineImage {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        EncoderInput::Waveform(t) => {
            line.modality = "audio".into();
            line.series = Some(t.data().to_vec());
        }
        EncoderInput::Series(t) => {
            line.modality = "timeseries".into();
            line.series = Some(t.data().to_vec());
        }
        EncoderInput::Features(_) => {
            return Err(Error::Config(
                "precomputed features live in their own files and cannot be inlined".into(),
            ));
        }
    }
    Ok(line)
}

/// Writes samples as JSONL. Precomputed-feature samples are not supported
/// here since their features live in separate files.
pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        let line = to_line(s)?;
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL dataset; `feature_file` paths resolve relative to the
/// dataset's directory.
pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: start,
            detail: format!("line {}: {e}", i + 1),
        })?;
        let bad = |what: &str| Error::Format {
            offset: start,
            detail: format!("line {}: {what}", i + 1),
        };
        let input = if let Some(ff) = &l.feature_file {
            EncoderInput::Features(read_features(&base.join(ff))?)
        } else {
            match l.modality.as_str() {
                "image" => {
                    let img = l.image.ok_or_else(|| bad("image sample without `image`"))?;
                    EncoderInput::Image(Tensor::new(&img.shape, img.data)?)
                }
                "audio" => EncoderInput::Waveform(Tensor::vector(
                    l.series.ok_or_else(|| bad("audio sample without `series`"))?,
                )),
                "timeseries" => EncoderInput::Series(Tensor::vector(
                    l.series.ok_or_else(|| bad("timeseries sample without `series`"))?,
                )),
                other => return Err(bad(&format!("unknown modality `{other}`"))),
            }
        };
        out.push(Sample {
            input,
            prompt: l.prompt,
            answer: l.answer,
            target: l.target,
        });
    }
    Ok(out)
}
