//! `hattflow`: benchmark, train, evaluate, gradient-check and generate data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hattflow::bench::{self, BenchConfig};
use hattflow::checkpoint;
use hattflow::diagnostics::gradcheck_report;
use hattflow::experiment::{predcls_recall, scene_predictions, test_scenes, train, RunConfig};
use hattflow::metrics::{evaluate, read_triplets_jsonl, write_triplets_jsonl, RecallRow, TripletSet};
use hattflow::{FlowDirection, SynthWorld};

#[derive(Parser, Debug)]
#[command(name = "hattflow", version, about = "Flow attention and hierarchy-aware attention at desk scale")]
struct Cli {
    /// Seed for every random choice (data, initialization, batching, bench inputs).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time flow attention against softmax attention; writes bench.csv.
    Bench(BenchArgs),
    /// Train on the synthetic task; writes config.toml, metrics.jsonl, model.ckpt and eval.csv.
    Train(TrainArgs),
    /// R@K / mR@K from a checkpoint or from triplet JSONL files; writes eval.csv.
    Eval(EvalArgs),
    /// Central-difference gradient checks of every component; writes gradcheck.csv.
    Gradcheck(GradcheckArgs),
    /// Write synthetic scenes as JSONL (triplets and graphs).
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Sequence lengths (n = m), ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048, 4096])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    d_v: usize,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Untimed calls before the timed trials.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration with optional [model], [data] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides model.flow_direction (text_to_vision, vision_to_text, none).
    #[arg(long)]
    flow_direction: Option<FlowDirection>,
    /// K values for the held-out evaluation after training.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
    k: Vec<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint; scored on the held-out synthetic scenes.
    #[arg(long, conflicts_with_all = ["pred", "gt"], required_unless_present = "pred")]
    checkpoint: Option<PathBuf>,
    /// Run configuration used to train the checkpoint (default: config.toml beside it).
    #[arg(long, requires = "checkpoint")]
    config: Option<PathBuf>,
    /// Predicted triplets (JSONL).
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground-truth triplets (JSONL).
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
    k: Vec<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// TOML run configuration; only its [data] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scenes, starting at index 0.
    #[arg(long, default_value_t = 10)]
    scenes: usize,
}

/// Output files of one run. Nothing is written until every target has been
/// checked, so a refused run leaves the directory untouched.
struct Outputs {
    dir: PathBuf,
    force: bool,
}

impl Outputs {
    fn claim(dir: &Path, force: bool, names: &[&str]) -> Result<Self> {
        if !force {
            let taken: Vec<String> = names
                .iter()
                .map(|n| dir.join(n))
                .filter(|p| p.exists())
                .map(|p| p.display().to_string())
                .collect();
            if !taken.is_empty() {
                bail!("refusing to overwrite {} (pass --force)", taken.join(", "));
            }
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        if !self.force && path.exists() {
            bail!("refusing to overwrite {} (pass --force)", path.display());
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_toml(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::synthetic_task(),
    };
    cfg.reseed(seed);
    Ok(cfg)
}

fn recall_table(rows: &[RecallRow]) -> String {
    let mut out = format!("{:>5}  {:>8}  {:>8}\n", "K", "R@K", "mR@K");
    for r in rows {
        out.push_str(&format!("{:>5}  {:>8.4}  {:>8.4}\n", r.k, r.recall, r.mean_recall));
    }
    out
}

fn recall_csv(rows: &[RecallRow]) -> String {
    let mut out = String::from("k,recall,mean_recall\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.recall, r.mean_recall));
    }
    out
}

fn run_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let out = Outputs::claim(&cli.out, cli.force, &["bench.csv"])?;
    let cfg = BenchConfig {
        lengths: args.lengths.clone(),
        d: args.d,
        d_v: args.d_v,
        trials: args.trials,
        warmup: args.warmup,
        seed: cli.seed,
        ..BenchConfig::default()
    };
    let report = bench::run(&cfg)?;
    for notice in &report.notices {
        eprintln!("notice: {notice}");
    }
    println!("{:<9} {:>6} {:>12} {:>10}", "mechanism", "n", "mean_ms", "std_ms");
    for r in &report.rows {
        println!("{:<9} {:>6} {:>12.3} {:>10.3}", r.mechanism.as_str(), r.n, r.mean_ms, r.std_ms);
    }
    for mech in [bench::Mechanism::Flow, bench::Mechanism::Softmax] {
        if let Some(g) = report.growth(mech) {
            println!("{} growth {}/{}: {g:.2}", mech.as_str(), args.lengths[args.lengths.len() - 1], args.lengths[0]);
        }
    }
    let path = out.write("bench.csv", report.to_csv())?;
    if cli.verbose > 0 {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), cli.seed)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = args.flow_direction {
        cfg.model.flow_direction = d;
    }
    cfg.validate()?;
    let out = Outputs::claim(&cli.out, cli.force, &["config.toml", "metrics.jsonl", "model.ckpt", "eval.csv"])?;
    out.write("config.toml", cfg.to_toml()?)?;

    let world = SynthWorld::new(cfg.data.clone())?;
    eprintln!(
        "training {} for {} epochs on {} scenes",
        cfg.model.flow_direction.as_str(),
        cfg.train.epochs,
        cfg.data.train_scenes
    );
    let start = Instant::now();
    let verbose = cli.verbose;
    let (model, logs) = train(&cfg, &world, |log| {
        if verbose > 0 {
            let val = log.val_r_at_1.map_or(String::new(), |r| format!(" val R@1 {r:.4}"));
            eprintln!("epoch {:>4} loss {:.5} tau {:.4}{val}", log.epoch, log.loss, log.tau);
        }
    })?;
    let mut jsonl = String::new();
    for log in &logs {
        jsonl.push_str(&serde_json::to_string(log)?);
        jsonl.push('\n');
    }
    out.write("metrics.jsonl", jsonl)?;
    checkpoint::save(&model, &out.path("model.ckpt"))?;

    let rows = predcls_recall(&model, &world, &test_scenes(&world), &args.k)?;
    out.write("eval.csv", recall_csv(&rows))?;
    println!("flow_direction {}", model.config.flow_direction.as_str());
    print!("{}", recall_table(&rows));
    if verbose > 0 {
        eprintln!("done in {:.1}s; outputs in {}", start.elapsed().as_secs_f64(), cli.out.display());
    }
    Ok(())
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let rows = match (&args.checkpoint, &args.pred, &args.gt) {
        (Some(ckpt), _, _) => {
            let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let beside = ckpt.with_file_name("config.toml");
            let cfg_path = args.config.clone().or_else(|| beside.exists().then_some(beside));
            let cfg = match cfg_path {
                Some(p) => RunConfig::from_toml(&read(&p)?).with_context(|| format!("in {}", p.display()))?,
                None => {
                    let mut cfg = RunConfig::synthetic_task();
                    cfg.reseed(cli.seed);
                    cfg
                }
            };
            let world = SynthWorld::new(cfg.data.clone())?;
            let scenes = test_scenes(&world);
            let out = Outputs::claim(&cli.out, cli.force, &["eval.csv", "predictions.jsonl", "gt.jsonl"])?;
            let preds = scenes
                .iter()
                .map(|s| scene_predictions(&model, &world, s))
                .collect::<hattflow::Result<Vec<_>>>()?;
            let gts: Vec<TripletSet> = scenes.iter().map(|s| s.gt.clone()).collect();
            out.write("predictions.jsonl", write_triplets_jsonl(&preds)?)?;
            out.write("gt.jsonl", write_triplets_jsonl(&gts)?)?;
            let rows = predcls_recall(&model, &world, &scenes, &args.k)?;
            out.write("eval.csv", recall_csv(&rows))?;
            println!("flow_direction {}", model.config.flow_direction.as_str());
            rows
        }
        (None, Some(pred), Some(gt)) => {
            let preds = read_triplets_jsonl(&read(pred)?).with_context(|| format!("in {}", pred.display()))?;
            let gts = read_triplets_jsonl(&read(gt)?).with_context(|| format!("in {}", gt.display()))?;
            let pairs: Vec<(TripletSet, TripletSet)> = gts
                .into_iter()
                .map(|g| {
                    let p = match preds.iter().find(|p| p.video == g.video) {
                        Some(p) => p.clone(),
                        None => TripletSet::new(g.video.clone(), g.frames, Vec::new())?,
                    };
                    Ok((p, g))
                })
                .collect::<hattflow::Result<_>>()?;
            let rows = evaluate(&pairs, &args.k)?;
            let out = Outputs::claim(&cli.out, cli.force, &["eval.csv"])?;
            out.write("eval.csv", recall_csv(&rows))?;
            rows
        }
        _ => bail!("eval needs --checkpoint or both --pred and --gt"),
    };
    print!("{}", recall_table(&rows));
    Ok(())
}

/// Returns whether every component passed.
fn run_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<bool> {
    let out = Outputs::claim(&cli.out, cli.force, &["gradcheck.csv"])?;
    let rows = gradcheck_report(cli.seed)?;
    let mut csv = String::from("component,max_rel_error,pass\n");
    let mut all = true;
    for r in &rows {
        let pass = r.max_rel_error < args.tolerance;
        all &= pass;
        println!("{:<34} {:>10.3e}  {}", r.component, r.max_rel_error, if pass { "pass" } else { "FAIL" });
        csv.push_str(&format!("{},{:e},{pass}\n", r.component, r.max_rel_error));
    }
    out.write("gradcheck.csv", csv)?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} components, worst {worst:.3e} (tolerance {:e}): {}", rows.len(), args.tolerance, if all { "pass" } else { "FAIL" });
    Ok(all)
}

fn run_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), cli.seed)?;
    let world = SynthWorld::new(cfg.data.clone())?;
    let out = Outputs::claim(&cli.out, cli.force, &["triplets.jsonl", "vision.jsonl", "text.jsonl"])?;
    let scenes: Vec<_> = (0..args.scenes).map(|i| world.scene(i)).collect();
    let gts: Vec<TripletSet> = scenes.iter().map(|s| s.gt.clone()).collect();
    let mut vision = String::new();
    let mut text = String::new();
    for s in &scenes {
        vision.push_str(&s.vision.to_json_line()?);
        vision.push('\n');
        for t in &s.texts {
            text.push_str(&t.to_json_line()?);
            text.push('\n');
        }
    }
    out.write("triplets.jsonl", write_triplets_jsonl(&gts)?)?;
    out.write("vision.jsonl", vision)?;
    out.write("text.jsonl", text)?;
    println!(
        "{} scenes, {} triplets written to {}",
        scenes.len(),
        gts.iter().map(TripletSet::len).sum::<usize>(),
        cli.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(a) => run_bench(&cli, a).map(|_| true),
        Command::Train(a) => run_train(&cli, a).map(|_| true),
        Command::Eval(a) => run_eval(&cli, a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(&cli, a),
        Command::Generate(a) => run_generate(&cli, a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
