use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use modrwkv::eval::{self, Table, Unit};
use modrwkv::train::{self, Checkpoint, Model, RunConfig, Trainer};
use modrwkv::Error;

#[derive(Parser, Debug)]
#[command(name = "modrwkv", version, about = "Train, evaluate and benchmark toy multimodal RWKV7 models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Run configuration (JSON). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval sets as JSONL.
    GenData,
    /// Run both training phases and save the final checkpoint.
    Train {
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Save `latest.mrwk` every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a checkpoint, or compare transcript files.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference transcripts, one per line.
        #[arg(long, requires = "hyps")]
        refs: Option<PathBuf>,
        /// Hypothesis transcripts, one per line.
        #[arg(long, requires = "refs")]
        hyps: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "word")]
        unit: UnitArg,
    },
    /// Per-token inference time and state size at several lengths.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Retrain and evaluate for each compression (kernel, stride) pair.
    Sweep,
    /// Retrain and evaluate for each adapter scale.
    SweepAdapter,
    /// Summarize a checkpoint.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum UnitArg {
    Word,
    Char,
}

struct Run {
    global: Global,
    config: RunConfig,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn say(&self, text: &str) {
        if !self.global.quiet {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.global.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        Ok(())
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.say(&t.render());
        let csv = t.to_csv()?;
        self.write(name, &csv)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c = c.with_seed(s);
    }
    c.validate()?;
    Ok(c)
}

fn load_model(path: &Option<PathBuf>, config: &RunConfig) -> Result<Model> {
    Ok(match path {
        Some(p) => {
            let ck = train::load_checkpoint(p)?;
            Model {
                config: ck.config,
                store: ck.store,
            }
        }
        None => Model::new(config)?,
    })
}

fn gen_data(run: &mut Run) -> Result<()> {
    let (tr, ev) = train::build_datasets(&run.config)?;
    let p = run.path("train.jsonl");
    train::write_jsonl(&p, &tr)?;
    let p = run.path("eval.jsonl");
    train::write_jsonl(&p, &ev)?;
    run.say(&format!("wrote {} train and {} eval samples", tr.len(), ev.len()));
    Ok(())
}

fn train_cmd(run: &mut Run, resume: &Option<PathBuf>, max_steps: Option<usize>, every: Option<usize>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(train::load_checkpoint(p)?)?,
        None => Trainer::new(Model::new(&run.config)?),
    };
    // A resumed run continues under the checkpoint's own config.
    run.config = trainer.model.config.clone();
    let (data, eval_set) = train::build_datasets(&run.config)?;
    let latest = run.global.out.join("latest.mrwk");
    let quiet = run.global.quiet;
    let mut done = 0usize;
    while !trainer.finished() && max_steps.is_none_or(|m| done < m) {
        let rec = trainer.step(&data)?;
        done += 1;
        if !quiet && (rec.step % 50 == 0 || trainer.finished()) {
            println!("phase {} step {:>5}  lr {:.3e}  loss {:.5}", rec.phase, rec.step, rec.lr, rec.loss);
        }
        if every.is_some_and(|n| n > 0 && done.is_multiple_of(n)) {
            train::save_checkpoint(&latest, &trainer.to_checkpoint())?;
            trainer.last_checkpoint = Some(latest.clone());
        }
    }
    let mut log = Table::new(&["phase", "step", "lr", "loss"]);
    for r in &trainer.log {
        log.push(vec![r.phase.to_string(), r.step.to_string(), format!("{:e}", r.lr), format!("{:e}", r.loss)]);
    }
    let p = run.path("train_log.csv");
    log.write_csv(&p)?;
    let ck: Checkpoint = trainer.to_checkpoint();
    let p = run.path("model.mrwk");
    train::save_checkpoint(&p, &ck)?;
    if trainer.finished() && !eval_set.is_empty() {
        let report = eval::evaluate(&trainer.model, &eval_set)?;
        run.say(&report.table().render());
        let lines = report.to_lines();
        run.write("eval.jsonl", &lines)?;
    }
    run.say(&format!("saved {}", p.display()));
    Ok(())
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn eval_cmd(run: &mut Run, checkpoint: &Option<PathBuf>, refs: &Option<PathBuf>, hyps: &Option<PathBuf>, unit: UnitArg) -> Result<()> {
    if let (Some(r), Some(h)) = (refs, hyps) {
        let r = read_lines(r)?;
        let h = read_lines(h)?;
        let rr: Vec<&str> = r.iter().map(String::as_str).collect();
        let hh: Vec<&str> = h.iter().map(String::as_str).collect();
        let (unit, name) = match unit {
            UnitArg::Word => (Unit::Word, "wer"),
            UnitArg::Char => (Unit::Char, "cer"),
        };
        let v = eval::wer(&rr, &hh, unit)?;
        let mut t = Table::new(&["metric", "value"]);
        t.push(vec![name.into(), format!("{v:.4}")]);
        return run.table("eval.csv", &t);
    }
    let model = load_model(checkpoint, &run.config)?;
    let (_, eval_set) = train::build_datasets(&model.config)?;
    let report = eval::evaluate(&model, &eval_set)?;
    let t = report.table();
    run.table("eval.csv", &t)?;
    let lines = report.to_lines();
    run.write("eval.jsonl", &lines)
}

fn bench_cmd(run: &mut Run, checkpoint: &Option<PathBuf>, lengths: &Option<Vec<usize>>, trials: Option<usize>) -> Result<()> {
    let model = load_model(checkpoint, &run.config)?;
    let e = &run.config.eval;
    let lengths = lengths.clone().unwrap_or_else(|| e.bench_lengths.clone());
    let recs = eval::bench_inference(
        &model.store,
        &model.config.backbone,
        &lengths,
        trials.unwrap_or(e.bench_trials),
        e.bench_precision,
    )?;
    run.say(&eval::bench_table(&recs).render());
    let p = run.path("bench.csv");
    eval::bench_csv(&recs).write_csv(&p)?;
    Ok(())
}

fn sweep_cmd(run: &mut Run) -> Result<()> {
    let (tr, ev) = train::build_datasets(&run.config)?;
    let quiet = run.global.quiet;
    let (rows, metric) = eval::compress_sweep(&run.config, &tr, &ev, &run.config.eval.sweep_pairs, |m| {
        if !quiet {
            eprintln!("{m}");
        }
    })?;
    let t = eval::sweep_table(&rows, &metric);
    run.table("sweep.csv", &t)
}

fn sweep_adapter_cmd(run: &mut Run) -> Result<()> {
    let (tr, ev) = train::build_datasets(&run.config)?;
    let (rows, metric) = eval::adapter_sweep(&run.config, &tr, &ev, &run.config.eval.adapter_scales)?;
    let t = eval::adapter_table(&rows, &metric);
    run.table("sweep_adapter.csv", &t)
}

fn inspect_cmd(run: &mut Run, path: &Path) -> Result<()> {
    let ck = train::load_checkpoint(path)?;
    let mut t = Table::new(&["group", "tensors", "parameters", "sha256"]);
    for g in ["backbone", "encoder", "compressor", "adapter", "task_head"] {
        let n = ck.store.iter().filter(|p| modrwkv::params::has_prefix(&p.name, g)).count();
        if n > 0 {
            t.push(vec![g.into(), n.to_string(), ck.store.count(g).to_string(), ck.store.hash_prefix(g)]);
        }
    }
    run.say(&format!(
        "phase {} step {}  config {}",
        ck.progress.phase,
        ck.progress.step,
        ck.config.hash()
    ));
    run.table("inspect.csv", &t)
}

fn manifest(run: &Run, command: &str, argv: &[String]) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": run.config.hash(),
        "seed": run.config.phase1.seed,
        "data_seed": run.config.data.seed,
        "config": serde_json::from_str::<serde_json::Value>(&run.config.to_json()).expect("config json"),
        "outputs": run.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    })
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let config = load_config(&cli.global)?;
    std::fs::create_dir_all(&cli.global.out).map_err(|e| io_err(&cli.global.out, e))?;
    let mut run = Run {
        global: cli.global,
        config,
        outputs: Vec::new(),
    };
    let name = match &cli.command {
        Command::GenData => {
            gen_data(&mut run)?;
            "gen-data"
        }
        Command::Train {
            resume,
            max_steps,
            checkpoint_every,
        } => {
            train_cmd(&mut run, resume, *max_steps, *checkpoint_every)?;
            "train"
        }
        Command::Eval {
            checkpoint,
            refs,
            hyps,
            unit,
        } => {
            eval_cmd(&mut run, checkpoint, refs, hyps, *unit)?;
            "eval"
        }
        Command::Bench {
            checkpoint,
            lengths,
            trials,
        } => {
            bench_cmd(&mut run, checkpoint, lengths, *trials)?;
            "bench"
        }
        Command::Sweep => {
            sweep_cmd(&mut run)?;
            "sweep"
        }
        Command::SweepAdapter => {
            sweep_adapter_cmd(&mut run)?;
            "sweep-adapter"
        }
        Command::Inspect { checkpoint } => {
            inspect_cmd(&mut run, checkpoint)?;
            "inspect"
        }
    };
    let m = manifest(&run, name, argv);
    let p = run.global.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&m)? + "\n";
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(e) if e.is_user_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
