//! Metrics, evaluation reports, inference benchmarks and the compression
//! and adapter-scale sweeps.

mod metrics;
mod report;

pub use metrics::{edit_distance, sign_test_probability, token_accuracy, wer, EditCounts, Unit};
pub use report::Table;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::backbone::{BackboneConfig, Precision, Session};
use crate::encoders::encode_values;
use crate::error::{Error, Result};
use crate::modality::{adapt_values, conv1d_compress, AdapterConfig, CompressorConfig};
use crate::params::ParamStore;
use crate::train::{Model, RunConfig, Sample, Task, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// Extra named values, such as baselines.
    pub extra: Vec<(String, f64)>,
    pub per_sample: Vec<f64>,
    pub runtime_s: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == self.metric {
            return Some(self.value);
        }
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["task", "metric", "value"]);
        t.push(vec![self.task.clone(), self.metric.clone(), format!("{:.6}", self.value)]);
        for (n, v) in &self.extra {
            t.push(vec![self.task.clone(), n.clone(), format!("{v:.6}")]);
        }
        t
    }

    /// One JSON object per line: the summary first, then each sample.
    pub fn to_lines(&self) -> String {
        let mut out = serde_json::json!({
            "task": self.task,
            "metric": self.metric,
            "value": self.value,
            "extra": self.extra.iter().map(|(n, v)| (n.clone(), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
            "runtime_s": self.runtime_s,
            "config_hash": self.config_hash,
        })
        .to_string();
        out.push('\n');
        for (i, v) in self.per_sample.iter().enumerate() {
            out += &serde_json::json!({"sample": i, self.metric.as_str(): v}).to_string();
            out.push('\n');
        }
        out
    }
}

/// Teacher-forced answer-token accuracy over a caption-copy set.
pub fn eval_caption(model: &Model, data: &[Sample]) -> Result<EvalReport> {
    let t0 = Instant::now();
    let mut per_sample = Vec::with_capacity(data.len());
    let (mut ok, mut total) = (0usize, 0usize);
    for s in data {
        let pred = model.predict_answer(s)?;
        let acc = token_accuracy(&pred, &s.answer)?;
        ok += pred.iter().zip(&s.answer).filter(|(a, b)| a == b).count();
        total += s.answer.len();
        per_sample.push(acc);
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no answer tokens in evaluation set".into()));
    }
    Ok(EvalReport {
        task: "caption_copy".into(),
        metric: "token_accuracy".into(),
        value: ok as f64 / total as f64,
        extra: Vec::new(),
        per_sample,
        runtime_s: t0.elapsed().as_secs_f64(),
        config_hash: model.config.hash(),
    })
}

fn lookback_of(s: &Sample) -> Result<&[f64]> {
    match &s.input {
        crate::encoders::EncoderInput::Series(t) => Ok(t.data()),
        _ => Err(Error::Config("forecast sample has no series input".into())),
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Last value carried forward over the horizon.
pub fn last_value_forecast(lookback: &[f64], h: usize) -> Vec<f64> {
    vec![*lookback.last().unwrap_or(&0.0); h]
}

/// Repeats the final `season` values of the lookback; falls back to the
/// last value when the lookback is shorter than one season.
pub fn seasonal_naive_forecast(lookback: &[f64], h: usize, season: usize) -> Vec<f64> {
    let l = lookback.len();
    if season == 0 || season > l {
        return last_value_forecast(lookback, h);
    }
    (0..h).map(|t| lookback[l - season + t % season]).collect()
}

/// MSE on the standardized scale plus both naive baselines.
pub fn eval_forecast_with(
    data: &[Sample],
    lookback: usize,
    horizon: usize,
    season: usize,
    mut predict: impl FnMut(&Sample) -> Result<Vec<f64>>,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric("no forecast windows".into()));
    }
    let (mut m, mut lv, mut sn) = (0.0, 0.0, 0.0);
    let mut per = Vec::with_capacity(data.len());
    for s in data {
        let lb = lookback_of(s)?;
        let target = s
            .target
            .as_deref()
            .ok_or_else(|| Error::Config("forecast sample has no target".into()))?;
        if lb.len() != lookback || target.len() != horizon {
            return Err(Error::shape("eval_forecast", &[lookback, horizon], &[lb.len(), target.len()]));
        }
        let p = predict(s)?;
        if p.len() != horizon {
            return Err(Error::shape("eval_forecast", &[horizon], &[p.len()]));
        }
        let e = mse(&p, target);
        per.push(e);
        m += e;
        lv += mse(&last_value_forecast(lb, horizon), target);
        sn += mse(&seasonal_naive_forecast(lb, horizon, season), target);
    }
    let n = data.len() as f64;
    Ok((m / n, lv / n, sn / n, per))
}

pub fn eval_forecast(model: &Model, data: &[Sample]) -> Result<EvalReport> {
    let t0 = Instant::now();
    let c = &model.config;
    let (m, lv, sn, per) = eval_forecast_with(data, c.data.lookback, c.data.horizon, c.eval.season, |s| {
        model.predict_forecast(s)
    })?;
    Ok(EvalReport {
        task: "forecast".into(),
        metric: "mse".into(),
        value: m,
        extra: vec![("last_value_mse".into(), lv), ("seasonal_naive_mse".into(), sn)],
        per_sample: per,
        runtime_s: t0.elapsed().as_secs_f64(),
        config_hash: c.hash(),
    })
}

/// Dispatches on the configured task.
pub fn evaluate(model: &Model, data: &[Sample]) -> Result<EvalReport> {
    match model.config.data.task {
        Task::CaptionCopy => eval_caption(model, data),
        Task::Forecast => eval_forecast(model, data),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub length: usize,
    pub seconds_per_token: f64,
    pub tokens_per_s: f64,
    pub state_bytes: usize,
    /// Bytes allocated above the starting level during the timed runs;
    /// zero unless the counting allocator is installed.
    pub peak_bytes: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn bench_session<T: num_traits::Float>(
    store: &ParamStore,
    cfg: &BackboneConfig,
    lengths: &[usize],
    trials: usize,
) -> Result<Vec<BenchRecord>> {
    let mut s = Session::<T>::new(store, cfg)?;
    let content = cfg.vocab_size.saturating_sub(2).max(1);
    let run = |s: &mut Session<T>, n: usize| -> Result<()> {
        s.reset();
        for i in 0..n {
            s.step_token(2 + i % content)?;
        }
        Ok(())
    };
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len == 0 {
            return Err(Error::Domain {
                op: "bench_inference",
                detail: "lengths must be at least 1".into(),
            });
        }
        run(&mut s, len.min(256))?;
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t0 = Instant::now();
            run(&mut s, len)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let peak = alloc::peak_bytes().saturating_sub(base);
        let t = median(times);
        out.push(BenchRecord {
            length: len,
            seconds_per_token: t / len as f64,
            tokens_per_s: len as f64 / t,
            state_bytes: s.state().bytes(),
            peak_bytes: peak,
        });
    }
    Ok(out)
}

/// Streams `length` tokens through a recurrent session per trial and
/// reports the median over `trials` timed runs after one warmup.
pub fn bench_inference(
    store: &ParamStore,
    cfg: &BackboneConfig,
    lengths: &[usize],
    trials: usize,
    precision: Precision,
) -> Result<Vec<BenchRecord>> {
    let trials = trials.max(5);
    match precision {
        Precision::F64 => bench_session::<f64>(store, cfg, lengths, trials),
        Precision::F32 => bench_session::<f32>(store, cfg, lengths, trials),
    }
}

/// Plot-ready columns only.
pub fn bench_csv(records: &[BenchRecord]) -> Table {
    let mut t = Table::new(&["length", "tokens_per_s", "state_bytes"]);
    for r in records {
        t.push(vec![r.length.to_string(), format!("{:.3}", r.tokens_per_s), r.state_bytes.to_string()]);
    }
    t
}

pub fn bench_table(records: &[BenchRecord]) -> Table {
    let mut t = Table::new(&["length", "s_per_token", "tokens_per_s", "state_bytes", "peak_bytes"]);
    for r in records {
        t.push(vec![
            r.length.to_string(),
            format!("{:.3e}", r.seconds_per_token),
            format!("{:.1}", r.tokens_per_s),
            r.state_bytes.to_string(),
            r.peak_bytes.to_string(),
        ]);
    }
    t
}

/// Runs the value path (encode, compress, adapt, backbone) for one sample
/// and returns the number of encoder tokens it consumed.
pub fn infer_sample(model: &Model, session: &mut Session<f64>, s: &Sample) -> Result<usize> {
    let c = &model.config;
    let feats = encode_values(&model.store, &c.encoder.spec, &s.input)?;
    let comp = conv1d_compress(&feats, &c.compressor, &model.store)?;
    let emb = adapt_values(&comp, &model.store)?;
    session.reset();
    for row in emb.data().chunks(c.backbone.d_model) {
        session.step_embedded(row)?;
    }
    for &t in s.prompt.iter().chain(&s.answer) {
        session.step_token(t)?;
    }
    Ok(feats.len())
}

/// Encoder tokens consumed per second end to end, best of `trials`.
/// The best trial is the one least disturbed by other load on the machine.
pub fn throughput(model: &Model, data: &[Sample], trials: usize) -> Result<f64> {
    let mut session = Session::<f64>::new(&model.store, &model.config.backbone)?;
    if let Some(s) = data.first() {
        infer_sample(model, &mut session, s)?;
    }
    let mut rates = Vec::with_capacity(trials.max(1));
    for _ in 0..trials.max(1) {
        let t0 = Instant::now();
        let mut tokens = 0;
        for s in data {
            tokens += infer_sample(model, &mut session, s)?;
        }
        rates.push(tokens as f64 / t0.elapsed().as_secs_f64());
    }
    Ok(rates.into_iter().fold(0.0, f64::max))
}

/// Copy of `base` with both phases shortened to the given step counts.
pub fn shortened(base: &RunConfig, phase1_steps: usize, phase2_steps: usize) -> RunConfig {
    let mut c = base.clone();
    c.phase1.steps = phase1_steps;
    c.phase1.warmup_steps = c.phase1.warmup_steps.min(phase1_steps);
    c.phase2.steps = phase2_steps;
    c.phase2.warmup_steps = c.phase2.warmup_steps.min(phase2_steps);
    c
}

/// Trains a fresh model through both phases.
pub fn train_fresh(config: &RunConfig, train: &[Sample]) -> Result<Model> {
    let mut t = Trainer::new(Model::new(config)?);
    t.run(train, None, |_| {})?;
    Ok(t.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel: usize,
    pub stride: usize,
    pub tokens: usize,
    pub metric: f64,
    pub tokens_per_s: f64,
    pub skipped: Option<String>,
}

/// For each `(k, s)` pair, retrains at shortened length, evaluates and
/// measures throughput. `(0, 0)` is the no-compression row.
pub fn compress_sweep(
    base: &RunConfig,
    train: &[Sample],
    eval: &[Sample],
    pairs: &[(usize, usize)],
    mut notice: impl FnMut(&str),
) -> Result<(Vec<SweepRow>, String)> {
    let source = match eval.first() {
        Some(s) => {
            let m = Model::new(base)?;
            encode_values(&m.store, &base.encoder.spec, &s.input)?.len()
        }
        None => return Err(Error::Config("sweep needs a non-empty evaluation set".into())),
    };
    let mut rows = Vec::with_capacity(pairs.len());
    let mut metric_name = String::new();
    for &(k, s) in pairs {
        let comp = if (k, s) == (0, 0) {
            CompressorConfig::passthrough()
        } else {
            CompressorConfig::new(k, s, 0)
        };
        let tokens = match comp.validate().and_then(|_| comp.compressed_len(source)) {
            Ok(t) if t >= 1 => t,
            Ok(_) | Err(_) => {
                let msg = format!("pair ({k},{s}) skipped: no output tokens for length {source}");
                notice(&msg);
                rows.push(SweepRow {
                    kernel: k,
                    stride: s,
                    tokens: 0,
                    metric: f64::NAN,
                    tokens_per_s: f64::NAN,
                    skipped: Some(msg),
                });
                continue;
            }
        };
        let mut cfg = shortened(base, base.eval.sweep_phase1_steps, base.eval.sweep_phase2_steps);
        cfg.compressor = comp;
        let model = train_fresh(&cfg, train)?;
        let report = evaluate(&model, eval)?;
        metric_name = report.metric.clone();
        let tps = throughput(&model, eval, base.eval.timing_trials)?;
        rows.push(SweepRow {
            kernel: k,
            stride: s,
            tokens,
            metric: report.value,
            tokens_per_s: tps,
            skipped: None,
        });
    }
    Ok((rows, metric_name))
}

pub fn sweep_table(rows: &[SweepRow], metric: &str) -> Table {
    let mut t = Table::new(&["k", "s", "tokens", metric, "tokens_per_s"]);
    for r in rows {
        let (m, tps) = match r.skipped {
            Some(_) => ("skipped".to_string(), "-".to_string()),
            None => (format!("{:.4}", r.metric), format!("{:.1}", r.tokens_per_s)),
        };
        t.push(vec![r.kernel.to_string(), r.stride.to_string(), r.tokens.to_string(), m, tps]);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRow {
    pub scale: usize,
    pub hidden: usize,
    pub params: usize,
    pub closed_form: usize,
    pub metric: f64,
}

/// Retrains once per adapter scale and records parameter counts next to
/// the evaluation metric.
pub fn adapter_sweep(
    base: &RunConfig,
    train: &[Sample],
    eval: &[Sample],
    scales: &[usize],
) -> Result<(Vec<AdapterRow>, String)> {
    let mut rows = Vec::with_capacity(scales.len());
    let mut metric_name = String::new();
    for &scale in scales {
        let mut cfg = shortened(base, base.eval.sweep_phase1_steps, base.eval.sweep_phase2_steps);
        cfg.adapter.scale = scale;
        let model = train_fresh(&cfg, train)?;
        let a = &model.config.adapter;
        let closed = AdapterConfig::new(a.d_in, a.scale, a.d_out).param_count();
        let report = evaluate(&model, eval)?;
        metric_name = report.metric.clone();
        rows.push(AdapterRow {
            scale,
            hidden: a.hidden(),
            params: model.store.count("adapter"),
            closed_form: closed,
            metric: report.value,
        });
    }
    Ok((rows, metric_name))
}

pub fn adapter_table(rows: &[AdapterRow], metric: &str) -> Table {
    let mut t = Table::new(&["adapter_scale", "hidden", "adapter_params", metric]);
    for r in rows {
        t.push(vec![
            format!("{}x", r.scale),
            r.hidden.to_string(),
            r.params.to_string(),
            format!("{:.4}", r.metric),
        ]);
    }
    t
}
