//! Command-line driver: corpus generation, the two training stages, offline
//! evaluation and scoring, and a decomposition fidelity check.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

use std::error::Error as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsqa::harness::{
    evaluate, generate_corpus, read_samples, rl_prompt, train_sft, write_samples,
    ExperimentConfig, HarnessError, ModelResponder, SyntheticSample,
};
use tsqa::model::ModelParams;
use tsqa::numerics::NumericsError;
use tsqa::rewards::score_request;
use tsqa::ts_pipeline::verify_decomposition;

#[derive(Parser)]
#[command(name = "tsqa", version, about = "Question answering over small numeric series")]
struct Cli {
    /// Flat key=value experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and write the train/test splits.
    GenData,
    /// Supervised stage: joint training of alignment and decoder.
    TrainSft,
    /// Reinforcement stage: group-relative updates from the supervised
    /// checkpoint.
    TrainRl {
        /// Starting checkpoint; defaults to sft.ckpt.json in the run dir.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        /// Checkpoint to evaluate; defaults to rl.ckpt.json, then
        /// sft.ckpt.json, in the run dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to evaluate on; defaults to test.jsonl in the run dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check trend/seasonal recovery on seeded synthetic series.
    DecomposeVerify,
    /// Score line-delimited response JSON from a file or stdin.
    Score {
        /// Input path; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Use the doubled balanced F1 for generation tasks.
        #[arg(long, default_value_t = true)]
        balanced: bool,
    },
}

/// Run everything; the full experiment pipeline lives in the library so the
/// subcommands here only orchestrate pieces of it.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code for usage errors is 2; this tool reserves
            // 2 for data errors, so print and exit 1 explicitly.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut src = e.source();
        while let Some(s) = src {
            eprintln!("  caused by: {s}");
            src = s.source();
        }
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(err: &HarnessError) -> i32 {
    if chain_has_numerics(err) {
        return 3;
    }
    match err {
        HarnessError::Config { .. } | HarnessError::UnknownKey(_) => 1,
        _ => 2,
    }
}

fn chain_has_numerics(err: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(err);
    while let Some(e) = cur {
        if e.downcast_ref::<NumericsError>().is_some() || e.to_string().contains("non-finite") {
            return true;
        }
        cur = e.source();
    }
    false
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let dir = cli.out_dir.join(format!("run-{:04}-{:016x}", cfg.seed, cfg.hash()));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn ensure_corpus(
    dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>), HarnessError> {
    let train_path = dir.join("train.jsonl");
    let test_path = dir.join("test.jsonl");
    if train_path.exists() && test_path.exists() {
        return Ok((read_samples(&train_path)?, read_samples(&test_path)?));
    }
    let corpus = generate_corpus(&cfg.corpus_spec(), cfg.seed)?;
    write_samples(&train_path, &corpus.train)?;
    write_samples(&test_path, &corpus.test)?;
    Ok((corpus.train, corpus.test))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::GenData => {
            let dir = run_dir(&cli, &cfg)?;
            let corpus = generate_corpus(&cfg.corpus_spec(), cfg.seed)?;
            write_samples(&dir.join("train.jsonl"), &corpus.train)?;
            write_samples(&dir.join("test.jsonl"), &corpus.test)?;
            println!("train: {} samples -> {}", corpus.train.len(), dir.join("train.jsonl").display());
            println!("test:  {} samples -> {}", corpus.test.len(), dir.join("test.jsonl").display());
        }
        Cmd::TrainSft => {
            let dir = run_dir(&cli, &cfg)?;
            let (train, _) = ensure_corpus(&dir, &cfg)?;
            let mut model = cfg.build_model()?;
            let curve =
                train_sft(&mut model, &train, cfg.sft_steps, cfg.sft_batch, cfg.sft_lr, cfg.seed)?;
            let mut text = String::new();
            for p in &curve {
                text.push_str(&serde_json::to_string(p)?);
                text.push('\n');
            }
            std::fs::write(dir.join("sft_loss.jsonl"), text)?;
            model
                .save(&dir.join("sft.ckpt.json"))
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let first = curve.first().map(|p| p.loss).unwrap_or(f64::NAN);
            let last = curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
            println!("sft: {} steps, loss {first:.4} -> {last:.4}", curve.len());
            println!("checkpoint: {}", dir.join("sft.ckpt.json").display());
        }
        Cmd::TrainRl { from } => {
            let dir = run_dir(&cli, &cfg)?;
            let (train, _) = ensure_corpus(&dir, &cfg)?;
            let start = from.clone().unwrap_or_else(|| dir.join("sft.ckpt.json"));
            if !start.exists() {
                return Err(HarnessError::Data(format!(
                    "no starting checkpoint at {}; run train-sft first or pass --from",
                    start.display()
                )));
            }
            let model =
                ModelParams::load(&start).map_err(|e| HarnessError::Data(e.to_string()))?;
            let prompts = train
                .iter()
                .map(|s| rl_prompt(&model.vocab, s))
                .collect::<Result<Vec<_>, _>>()?;
            let (state, curve) = tsqa::grpo::train_rl(model, &prompts, &cfg.rl_config())
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let mut text = String::new();
            for p in &curve {
                text.push_str(&serde_json::to_string(p)?);
                text.push('\n');
            }
            std::fs::write(dir.join("reward_curve.jsonl"), text)?;
            state
                .model
                .save(&dir.join("rl.ckpt.json"))
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let first = curve.first().map(|p| p.ema_reward).unwrap_or(f64::NAN);
            let last = curve.last().map(|p| p.ema_reward).unwrap_or(f64::NAN);
            println!("rl: {} steps, smoothed reward {first:.4} -> {last:.4}", curve.len());
            println!("checkpoint: {}", dir.join("rl.ckpt.json").display());
        }
        Cmd::Eval { checkpoint, data } => {
            let dir = run_dir(&cli, &cfg)?;
            let ckpt = match checkpoint {
                Some(p) => p.clone(),
                None => {
                    let rl = dir.join("rl.ckpt.json");
                    if rl.exists() { rl } else { dir.join("sft.ckpt.json") }
                }
            };
            if !ckpt.exists() {
                return Err(HarnessError::Data(format!(
                    "no checkpoint at {}; train first or pass --checkpoint",
                    ckpt.display()
                )));
            }
            let model = ModelParams::load(&ckpt).map_err(|e| HarnessError::Data(e.to_string()))?;
            let samples = match data {
                Some(p) => read_samples(p)?,
                None => ensure_corpus(&dir, &cfg)?.1,
            };
            let mut responder = ModelResponder { model: &model, max_new: cfg.eval_max_new };
            let report = evaluate(&mut responder, &samples, &model.vocab)?;
            print!("{}", report.to_text());
            std::fs::write(dir.join("report.txt"), report.to_text())?;
            std::fs::write(dir.join("report.kv"), report.to_kv())?;
        }
        Cmd::DecomposeVerify => {
            let pipeline = cfg.pipeline_config();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut worst_trend = f64::INFINITY;
            let mut worst_seasonal = f64::INFINITY;
            for case in 0..5 {
                // Long series: the patch-level moving average needs enough
                // patches to separate slow from fast structure.
                let len = 32 * pipeline.patch_len;
                let slope = rng.gen_range(0.01..=0.05);
                let amp = rng.gen_range(0.8..=2.0);
                let period = (2 * pipeline.patch_len) as f64;
                let trend: Vec<f64> = (0..len).map(|t| slope * t as f64).collect();
                let seasonal: Vec<f64> = (0..len)
                    .map(|t| amp * (2.0 * std::f64::consts::PI * t as f64 / period).sin())
                    .collect();
                let series: Vec<f64> =
                    trend.iter().zip(&seasonal).map(|(a, b)| a + b).collect();
                let report = verify_decomposition(&series, &trend, &seasonal, &pipeline, cfg.seed)
                    .map_err(|e| HarnessError::Data(e.to_string()))?;
                println!("case {case}");
                print!("{}", report.to_text());
                let t = report.trend_corr.unwrap_or(0.0).abs();
                let s = report.seasonal_corr.unwrap_or(0.0).abs();
                worst_trend = worst_trend.min(t);
                worst_seasonal = worst_seasonal.min(s);
            }
            println!("worst |trend corr|    = {worst_trend:.4} (need >= 0.95)");
            println!("worst |seasonal corr| = {worst_seasonal:.4} (need >= 0.90)");
            if worst_trend < 0.95 || worst_seasonal < 0.90 {
                return Err(HarnessError::Data("decomposition check failed".into()));
            }
            println!("decomposition check passed");
        }
        Cmd::Score { input, balanced } => {
            let reader: Box<dyn BufRead> = match input {
                Some(p) => Box::new(std::io::BufReader::new(std::fs::File::open(p)?)),
                None => Box::new(std::io::BufReader::new(std::io::stdin())),
            };
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let req = serde_json::from_str(&line)?;
                let record = score_request(&req, *balanced)
                    .map_err(|e| HarnessError::Data(e.to_string()))?;
                writeln!(out, "{}", serde_json::to_string(&record)?)?;
            }
        }
    }
    Ok(())
}
