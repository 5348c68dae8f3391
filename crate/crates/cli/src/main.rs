use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use empo_core::data::benchmark::held_out;
use empo_core::data::{build_dataset, read_jsonl, write_jsonl, Catalog, World};
use empo_core::metrics::{evaluate, MAX_RESPONSE_LEN};
use empo_core::model::greedy_decode;
use empo_core::seed::derive_seed;
use empo_core::train::run::{run_dir, DATA_STREAM};
use empo_core::train::{
    ablate, export_heatmap, named_grid, prepare_seed, train_preference, write_run, AblationResult, Checkpoint,
    RunConfig, RunRecord,
};

#[derive(Parser)]
#[command(
    name = "empo",
    version,
    about = "Entity-centric preference optimization on a synthetic scene world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.learning_rate=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preference records in JSONL instead of generating them.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// World catalog in JSON; the built-in catalog is used when omitted.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate preference records for each seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Warm-start and preference-train the full objective for each seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have been taken in total.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out benchmark.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the frozen reference instead of the policy.
        #[arg(long)]
        reference: bool,
    },
    /// Train every grid point for every seed and write comparison tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// components, strategies, alpha or directional.
        #[arg(long, default_value = "components")]
        grid: String,
    },
    /// Write the attention heatmap of one response as CSV, to stdout or to
    /// `heatmap_<index>.csv` under `--out`.
    ExportHeatmap {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose policy produces the attention
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record index in `--dataset`, or benchmark item index otherwise.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Rebuild the comparison tables from the run records under `--out`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_world(common: &Common) -> Result<World> {
    match &common.world {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(World::from_json(&text)?)
        }
        None => Ok(World::new(Catalog::default())?),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &common.dataset {
        cfg.data.path = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let world = load_world(common)?;
    let dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&dir)?;
    for &seed in &cfg.seeds {
        let path = dir.join(format!("seed{seed}.jsonl"));
        let data = build_dataset(
            &world,
            cfg.data.records,
            derive_seed(seed, 0, DATA_STREAM),
            &cfg.data.mix,
            cfg.execution(),
        )?;
        write_jsonl(&path, &data.records)?;
        std::fs::write(
            dir.join(format!("seed{seed}_report.json")),
            serde_json::to_vec_pretty(&data.report)?,
        )?;
        println!(
            "seed {seed}: {} records ({} skipped) -> {}",
            data.records.len(),
            data.report.skipped.len(),
            path.display()
        );
    }
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let world = load_world(common)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(c) = &resume {
        if common.seed.is_none() {
            cfg.seeds = vec![c.seed];
        }
    }
    for &seed in &cfg.seeds {
        let inputs = prepare_seed(&cfg, &world, seed)?;
        let (record, ckpt) = train_preference(
            &cfg,
            "empo",
            &inputs,
            &inputs.records,
            &world,
            resume.clone(),
            max_steps,
        )?;
        let dir = run_dir(&cfg, "empo", seed);
        write_run(&dir, &record, &ckpt)?;
        println!(
            "seed {seed}: steps {}..{} chair_i {:.4} -> {:.4} ({})",
            record.start_step,
            ckpt.step,
            record.base_metrics.chair_i,
            record.final_metrics.chair_i,
            dir.display()
        );
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, reference: bool) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    let world = load_world(common)?;
    let params = if reference { &ckpt.reference } else { &ckpt.policy };
    let items = held_out(&world, cfg.data.eval_scenes, cfg.data.eval_seed);
    let report = evaluate(params, &world, &items, cfg.execution())?;
    print!("{}", report.table());
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    }
    Ok(())
}

fn print_summary(result: &AblationResult) {
    println!(
        "{:<18} {:>5} {:>8} {:>8} {:>8} {:>8}",
        "variant", "seeds", "CHAIR_s", "CHAIR_i", "acc", "F1"
    );
    for r in result.summary() {
        println!(
            "{:<18} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.variant, r.seeds, r.chair_s, r.chair_i, r.accuracy, r.f1
        );
    }
}

fn run_ablation(common: &Common, grid: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let world = load_world(common)?;
    let grid = named_grid(grid)?;
    let result = ablate(&cfg, &world, &grid)?;
    print_summary(&result);
    println!("tables written to {}", cfg.out_dir.display());
    Ok(())
}

fn heatmap(common: &Common, checkpoint: &Path, index: usize) -> Result<()> {
    let world = load_world(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (v, q, y) = match &common.dataset {
        Some(p) => {
            let records = read_jsonl(p, &world)?;
            let r = records
                .get(index)
                .with_context(|| format!("dataset has {} records", records.len()))?;
            (r.v_w.clone(), r.q_w.clone(), r.y_w.clone())
        }
        None => {
            let items = held_out(&world, index + 1, ckpt.config.data.eval_seed);
            let item = items.into_iter().nth(index).context("benchmark item missing")?;
            let y = greedy_decode(&ckpt.policy, &item.grid, &item.instruction, MAX_RESPONSE_LEN)?;
            (item.grid, item.instruction, y)
        }
    };
    if y.is_empty() {
        bail!("the response is empty; nothing to export");
    }
    let (_, csv) = export_heatmap(checkpoint, &world, &v, &q, &y)?;
    match &common.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            let path = out.join(format!("heatmap_{index}.csv"));
            std::fs::write(&path, csv)?;
            println!("heatmap written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn report(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let mut records = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&cfg.out_dir)
        .with_context(|| format!("reading {}", cfg.out_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run_record.json").is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let text = std::fs::read_to_string(d.join("run_record.json"))?;
        let record: RunRecord = serde_json::from_str(&text).with_context(|| format!("parsing {}", d.display()))?;
        records.push(record);
    }
    if records.is_empty() {
        bail!("no run records under {}", cfg.out_dir.display());
    }
    let result = AblationResult::from_records(records);
    result.write_csv(&cfg.out_dir)?;
    print_summary(&result);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            resume,
            max_steps,
        } => train(&common, resume.as_deref(), max_steps),
        Command::Eval {
            common,
            checkpoint,
            reference,
        } => eval(&common, &checkpoint, reference),
        Command::Ablate { common, grid } => run_ablation(&common, &grid),
        Command::ExportHeatmap {
            common,
            checkpoint,
            index,
        } => heatmap(&common, &checkpoint, index),
        Command::Report { common } => report(&common),
    }
}
