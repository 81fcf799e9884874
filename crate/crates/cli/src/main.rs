//! `drec`: batch command-line front end for the training pipeline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use decoupled_rec::dataio::{
    filter_min_count, load_interactions, synth_generate, write_interactions, Dataset, Format, LoadOptions, LogStats,
    DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT,
};
use decoupled_rec::metrics::evaluate;
use decoupled_rec::model::{load_checkpoint, save_checkpoint};
use decoupled_rec::report::{markdown_table, summarize};
use decoupled_rec::softlabel::{load_targets, save_targets};
use decoupled_rec::train::{
    build_soft_targets, grid_csv, grid_search, load_dataset, method_label, pretrain, run_experiment_with, train_final,
    DataSource, ExperimentConfig, RunReport, StageCache, TargetProvenance,
};
use decoupled_rec::verify::run_suite;

const MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "drec", version, about = "Decoupled soft-target training for sequential recommenders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Unset fields take their defaults; unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory; every artifact is listed in its manifest.txt.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Prepared split directory; sets `data.source = "prepared"` and `data.path`.
    #[arg(long, global = true, env = "DREC_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Dotted config override, e.g. `--set loss.lambda1=0.3`. Repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter an interaction file and write leave-one-out splits, id maps and stats.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "tsv")]
        format: Format,
        /// Read the MovieLens-100K `user item rating timestamp` layout.
        #[arg(long)]
        ml100k: bool,
        #[arg(long)]
        header: bool,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Write a planted-cluster synthetic interaction log.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 20)]
        events_per_user: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
        /// Emit `user item rating timestamp` rows (rating fixed at 1).
        #[arg(long)]
        ml100k: bool,
    },
    /// Pretrain with one-hot cross-entropy and save the checkpoint.
    Pretrain,
    /// Build soft targets for the training split.
    GenTargets {
        /// Pretrained checkpoint; required for the `lp` generator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the final model. Without `--targets` runs the whole pipeline.
    Train {
        /// Soft targets written by `gen-targets`.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Pretrained checkpoint, used for warm starts.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Grid search; writes a long-format CSV with one row per cell.
    Sweep {
        /// `KEY=V1,V2,...`; repeatable. Defaults to the 5×5 λ1×λ2 grid.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
    },
    /// Randomised checks of the loss identities and model gradients.
    Verify {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Markdown comparison table from run reports (files or directories).
    Report { runs: Vec<PathBuf> },
}

/// Failure kinds mapped to exit codes.
enum Failure {
    Check(String),
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

struct Out {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn finish(mut self) -> Result<()> {
        self.artifacts.sort();
        let mut text = self.artifacts.join("\n");
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.data_dir {
        cfg.data.source = DataSource::Prepared;
        cfg.data.path = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn stats_block(title: &str, s: &LogStats) -> String {
    format!(
        "[{title}]\nusers = {}\nitems = {}\nactions = {}\nactions_per_user = {:.2}\nactions_per_item = {:.2}\n",
        s.users, s.items, s.actions, s.actions_per_user, s.actions_per_item
    )
}

fn cmd_prepare(
    out: &mut Out,
    input: &Path,
    opts: LoadOptions,
    min_count: usize,
    max_len: usize,
) -> Result<()> {
    let raw = load_interactions(input, &opts)?;
    let filtered = filter_min_count(&raw, min_count)?;
    let dataset = Dataset::from_log(&filtered, max_len);
    for path in dataset.save(&out.dir)? {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.path(&name);
    }
    let stats = format!(
        "{}\n{}",
        stats_block("raw", &LogStats::of(&raw)),
        stats_block("filtered", &LogStats::of(&filtered))
    );
    out.write("stats.txt", &stats)?;
    print!("{stats}");
    Ok(())
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    if specs.is_empty() {
        let lambdas: Vec<String> = ["0.1", "0.3", "0.5", "0.7", "0.9"].map(String::from).to_vec();
        return Ok(vec![
            ("loss.lambda1".into(), lambdas.clone()),
            ("loss.lambda2".into(), lambdas),
        ]);
    }
    specs
        .iter()
        .map(|s| {
            let (k, vs) = s
                .split_once('=')
                .with_context(|| format!("--grid expects KEY=V1,V2,..., got {s:?}"))?;
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                bail!("--grid {k} has no values");
            }
            Ok((k.trim().to_string(), values))
        })
        .collect()
}

fn collect_reports(paths: &[PathBuf]) -> Vec<RunReport> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.push(p.join("report.json"));
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .filter_map(|f| match RunReport::load(f) {
            Ok(r) => Some(r),
            Err(e) => {
                let e = anyhow::Error::from(e);
                eprintln!("warning: skipping {}: {e:#}", f.display());
                None
            }
        })
        .collect()
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let common = &cli.common;
    let mut out = Out::new(&common.out)?;
    match cli.command {
        Command::Prepare {
            input,
            format,
            ml100k,
            header,
            min_count,
            max_len,
        } => {
            let mut opts = if ml100k {
                LoadOptions::movielens_100k()
            } else {
                LoadOptions::default()
            };
            opts.format = format;
            opts.has_header = header;
            cmd_prepare(&mut out, &input, opts, min_count, max_len)?;
        }
        Command::Synth {
            users,
            items,
            clusters,
            events_per_user,
            noise,
            synth_seed,
            ml100k,
        } => {
            let log = synth_generate(users, items, clusters, events_per_user, noise, synth_seed).map_err(anyhow::Error::from)?;
            let path = out.path("interactions.tsv");
            if ml100k {
                let mut text = String::new();
                for e in &log.events {
                    text.push_str(&format!("{}\t{}\t1\t{}\n", log.user_ids[e.user], log.item_ids[e.item], e.timestamp));
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            } else {
                write_interactions(&log, &path, Format::Tsv).map_err(anyhow::Error::from)?;
            }
            println!("{}", stats_block("synthetic", &LogStats::of(&log)).trim_end());
        }
        Command::Pretrain => {
            let cfg = resolve_config(common)?;
            cfg.validate().map_err(anyhow::Error::from)?;
            let dataset = load_dataset(&cfg.data).map_err(anyhow::Error::from)?;
            let fitted = pretrain(&cfg, &dataset).map_err(anyhow::Error::from)?;
            save_checkpoint(&fitted.params, &out.path("pretrained.ckpt")).map_err(anyhow::Error::from)?;
            out.write("config.toml", &cfg.to_toml_string())?;
            out.write(
                "pretrain_history.json",
                &serde_json::to_string_pretty(&fitted.history).context("serialising history")?,
            )?;
            if let Some(v) = &fitted.best_valid {
                println!("best epoch {:?}: valid {}", fitted.best_epoch, v.csv_line());
            }
        }
        Command::GenTargets { checkpoint } => {
            let cfg = resolve_config(common)?;
            cfg.validate().map_err(anyhow::Error::from)?;
            let dataset = load_dataset(&cfg.data).map_err(anyhow::Error::from)?;
            let params = checkpoint
                .map(|p| load_checkpoint(&p))
                .transpose()
                .map_err(anyhow::Error::from)?;
            let set = build_soft_targets(&cfg, params.as_ref(), &dataset).map_err(anyhow::Error::from)?;
            save_targets(&set, &out.path("targets.txt")).map_err(anyhow::Error::from)?;
            out.write("config.toml", &cfg.to_toml_string())?;
            println!("{} targets, mean q_y {:.4}", set.len(), set.mean_q_y());
        }
        Command::Train { targets, checkpoint } => {
            let cfg = resolve_config(common)?;
            let (params, report) = match targets {
                None => run_experiment_with(&cfg, &StageCache::new()).map_err(anyhow::Error::from)?,
                Some(path) => {
                    cfg.validate().map_err(anyhow::Error::from)?;
                    let started = std::time::Instant::now();
                    let dataset = load_dataset(&cfg.data).map_err(anyhow::Error::from)?;
                    let set = load_targets(&path).map_err(anyhow::Error::from)?;
                    let pretrained = checkpoint
                        .map(|p| load_checkpoint(&p))
                        .transpose()
                        .map_err(anyhow::Error::from)?;
                    let fitted = train_final(&cfg, &dataset, &set, pretrained.as_ref()).map_err(anyhow::Error::from)?;
                    let test = evaluate(&fitted.params, &dataset.splits.test, &cfg.optim.ks, cfg.optim.exclude_history)
                        .map_err(anyhow::Error::from)?;
                    let report = RunReport {
                        label: method_label(&cfg),
                        config: cfg.clone(),
                        seed: cfg.seed,
                        pretrain_epochs: Vec::new(),
                        epochs: fitted.history,
                        best_epoch: fitted.best_epoch,
                        valid: fitted.best_valid,
                        test,
                        targets: TargetProvenance {
                            generator: set.generator,
                            lp: set.provenance,
                            mean_q_y: set.mean_q_y(),
                        },
                        wall_clock_secs: started.elapsed().as_secs_f64(),
                    };
                    (fitted.params, report)
                }
            };
            save_checkpoint(&params, &out.path("model.ckpt")).map_err(anyhow::Error::from)?;
            report.save(&out.path("report.json")).map_err(anyhow::Error::from)?;
            out.write("config.toml", &cfg.to_toml_string())?;
            out.write("summary.csv", &format!("label,seed,R@20,N@20,R@10,N@10,valid_N@10\n{}\n", report.summary_line()))?;
            println!("{}", report.summary_line());
        }
        Command::Evaluate { checkpoint, split } => {
            let cfg = resolve_config(common)?;
            let dataset = load_dataset(&cfg.data).map_err(anyhow::Error::from)?;
            let params = load_checkpoint(&checkpoint).map_err(anyhow::Error::from)?;
            let samples = match split.as_str() {
                "train" => &dataset.splits.train,
                "valid" => &dataset.splits.valid,
                "test" => &dataset.splits.test,
                other => return Err(Failure::Usage(anyhow::anyhow!("unknown split {other:?}"))),
            };
            if params.item_count() != dataset.item_count() {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "checkpoint has {} items, dataset has {}",
                    params.item_count(),
                    dataset.item_count()
                )));
            }
            let metrics = evaluate(&params, samples, &cfg.optim.ks, cfg.optim.exclude_history).map_err(anyhow::Error::from)?;
            let text = format!("{}\n{}\n", decoupled_rec::metrics::Metrics::CSV_HEADER, metrics.csv_line());
            out.write(&format!("metrics_{split}.csv"), &text)?;
            print!("{text}");
        }
        Command::Sweep { grid } => {
            let cfg = resolve_config(common)?;
            let grid = parse_grid(&grid)?;
            let keys: Vec<String> = grid.iter().map(|(k, _)| k.clone()).collect();
            let cells = grid_search(&cfg, &grid, common.jobs, &StageCache::new());
            out.write("sweep.csv", &grid_csv(&keys, &cells))?;
            out.write("config.toml", &cfg.to_toml_string())?;
            let failed = cells.iter().filter(|c| c.result.is_err()).count();
            if let Some(best) = cells.iter().find(|c| c.result.is_ok()) {
                println!("best {:?}: valid N@10 {:.6}", best.assignments, best.valid_ndcg10());
            }
            println!("{} cells, {failed} failed", cells.len());
        }
        Command::Verify { draws, tol } => {
            let seed = common.seed.unwrap_or(0);
            let report = run_suite(seed, draws, tol).map_err(anyhow::Error::from)?;
            let text = report.render();
            out.write("verify.txt", &text)?;
            print!("{text}");
            if !report.passed() {
                out.finish()?;
                return Err(Failure::Check("verification failed".into()));
            }
        }
        Command::Report { runs } => {
            let reports = collect_reports(&runs);
            if reports.is_empty() {
                return Err(Failure::Usage(anyhow::anyhow!("no readable run reports")));
            }
            let table = markdown_table(&summarize(&reports));
            out.write("report.md", &table)?;
            print!("{table}");
        }
    }
    out.finish()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    };
    let _ = std::io::stdout().flush();
    code
}
