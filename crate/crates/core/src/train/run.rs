use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::Optimizer;
use super::pretrain::{epoch_order, mean_gradient, pretrain};
use crate::data::benchmark::{held_out, EvalItem};
use crate::data::{build_dataset, read_jsonl, PreferenceRecord, StrategyMix, World};
use crate::error::{EmpoError, Result};
use crate::losses::{record_gradient, LossBreakdown, ReferenceLogProbs};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::ModelParams;
use crate::par::map_slice;
use crate::seed::derive_seed;

pub const DATA_STREAM: u64 = 0x6461_7461;
const PREF_SHUFFLE: u64 = 0x7072_6566;

/// Batch-mean loss of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub l_v: Option<f64>,
    pub l_q: Option<f64>,
    pub l_r: Option<f64>,
    pub total: f64,
}

impl BatchLoss {
    pub fn mean(parts: &[LossBreakdown]) -> Self {
        let n = parts.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let mut acc = 0.0;
            for p in parts {
                acc += f(p)?;
            }
            Some(acc / n)
        };
        Self {
            l_v: avg(|p| p.l_v),
            l_q: avg(|p| p.l_q),
            l_r: avg(|p| p.l_r),
            total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Record indices of the batch, in reduction order.
    pub batch: Vec<usize>,
    pub loss: BatchLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub config: RunConfig,
    /// First step run in this session (nonzero after a resume).
    pub start_step: usize,
    pub steps: Vec<StepLog>,
    pub base_metrics: MetricsReport,
    pub final_metrics: MetricsReport,
    /// Kept out of the serialized record so that records stay byte-identical
    /// across repeated runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Everything a preference run needs that does not depend on the loss
/// variant: the records, the warm-started base model and the benchmark.
#[derive(Debug, Clone)]
pub struct SeedInputs {
    pub seed: u64,
    pub records: Vec<PreferenceRecord>,
    pub base: ModelParams,
    pub base_metrics: MetricsReport,
    pub eval: Vec<EvalItem>,
}

pub fn load_or_build_records(
    cfg: &RunConfig,
    world: &World,
    seed: u64,
    mix: &StrategyMix,
) -> Result<Vec<PreferenceRecord>> {
    match &cfg.data.path {
        Some(p) => read_jsonl(p, world),
        None => Ok(build_dataset(
            world,
            cfg.data.records,
            derive_seed(seed, 0, DATA_STREAM),
            mix,
            cfg.execution(),
        )?
        .records),
    }
}

pub fn benchmark(cfg: &RunConfig, world: &World) -> Vec<EvalItem> {
    held_out(world, cfg.data.eval_scenes, cfg.data.eval_seed)
}

pub fn prepare_seed(cfg: &RunConfig, world: &World, seed: u64) -> Result<SeedInputs> {
    let records = load_or_build_records(cfg, world, seed, &cfg.data.mix)?;
    let (base, _) = pretrain(
        world,
        &records,
        &cfg.pretrain,
        &cfg.model_config(world, seed),
        seed,
        cfg.execution(),
    )?;
    let eval = benchmark(cfg, world);
    let base_metrics = evaluate(&base, world, &eval, cfg.execution())?;
    Ok(SeedInputs {
        seed,
        records,
        base,
        base_metrics,
        eval,
    })
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn dump_batch(
    cfg: &RunConfig,
    seed: u64,
    step: usize,
    batch: &[usize],
    records: &[PreferenceRecord],
    losses: &[LossBreakdown],
) -> String {
    #[derive(Serialize)]
    struct Dump<'a> {
        seed: u64,
        step: usize,
        batch: &'a [usize],
        losses: &'a [LossBreakdown],
        records: Vec<&'a PreferenceRecord>,
    }
    let dump = Dump {
        seed,
        step,
        batch,
        losses,
        records: batch.iter().map(|&i| &records[i]).collect(),
    };
    let path = cfg.out_dir.join(format!("nonfinite_seed{seed}_step{step}.json"));
    let written = std::fs::create_dir_all(&cfg.out_dir)
        .map_err(EmpoError::from)
        .and_then(|_| Ok(std::fs::write(&path, serde_json::to_vec_pretty(&dump)?)?));
    match written {
        Ok(()) => format!("batch dumped to {}", path.display()),
        Err(e) => format!("batch dump failed: {e}"),
    }
}

/// Preference training on `records` starting from `inputs.base` (or from a
/// checkpoint). Runs until the configured epochs are done or `stop_after`
/// total steps have been taken.
pub fn train_preference(
    cfg: &RunConfig,
    variant: &str,
    inputs: &SeedInputs,
    records: &[PreferenceRecord],
    world: &World,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<(RunRecord, Checkpoint)> {
    cfg.validate()?;
    let started = Instant::now();
    let exec = cfg.execution();
    let seed = inputs.seed;
    let (mut policy, reference, mut opt, start) = match resume {
        Some(c) => {
            if c.seed != seed
                || c.variant != variant
                || c.config.loss != cfg.loss
                || c.config.optimizer != cfg.optimizer
            {
                return Err(EmpoError::Checkpoint(format!(
                    "checkpoint (seed {}, variant {}) does not match this run",
                    c.seed, c.variant
                )));
            }
            (c.policy, c.reference, c.optimizer, c.step)
        }
        None => {
            let n = inputs.base.num_parameters();
            (
                inputs.base.clone(),
                inputs.base.clone(),
                Optimizer::new(cfg.optimizer.clone(), n),
                0,
            )
        }
    };
    let reference_print = reference.fingerprint();
    let refs = map_slice(exec, records, |r| ReferenceLogProbs::compute(&reference, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let per_epoch = steps_per_epoch(records.len(), cfg.optimizer.batch_size);
    let total = per_epoch * cfg.optimizer.epochs;
    let end = stop_after.map_or(total, |s| s.min(total));
    let mut steps = Vec::with_capacity(end.saturating_sub(start));
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    for step in start..end {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(seed, PREF_SHUFFLE, epoch, records.len());
            order_epoch = epoch;
        }
        let b = step % per_epoch;
        let batch = &order[b * cfg.optimizer.batch_size..((b + 1) * cfg.optimizer.batch_size).min(records.len())];
        let (losses, grad) = mean_gradient(exec, &policy.config, batch, |i| {
            record_gradient(&policy, &records[i], &refs[i], &cfg.loss)
        })?;
        let loss = BatchLoss::mean(&losses);
        if !loss.total.is_finite() || !grad.is_finite() {
            let detail = dump_batch(cfg, seed, step, batch, records, &losses);
            return Err(EmpoError::NonFinite { step, detail });
        }
        opt.step(&mut policy, &grad);
        steps.push(StepLog {
            step,
            epoch,
            batch: batch.to_vec(),
            loss,
        });
    }
    debug_assert_eq!(reference.fingerprint(), reference_print);

    let final_metrics = evaluate(&policy, world, &inputs.eval, exec)?;
    let record = RunRecord {
        variant: variant.to_string(),
        seed,
        config: cfg.clone(),
        start_step: start,
        steps,
        base_metrics: inputs.base_metrics,
        final_metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let ckpt = Checkpoint {
        config: cfg.clone(),
        seed,
        variant: variant.to_string(),
        step: end,
        policy,
        reference,
        optimizer: opt,
    };
    Ok((record, ckpt))
}

/// Writes `log.jsonl`, `run_record.json`, `metrics.json`, `timing.json` and
/// `checkpoint.ckpt` under `dir`.
pub fn write_run(dir: &Path, record: &RunRecord, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("log.jsonl"))?);
    for s in &record.steps {
        serde_json::to_writer(&mut log, s)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    std::fs::write(dir.join("run_record.json"), serde_json::to_vec_pretty(record)?)?;
    std::fs::write(dir.join("metrics.json"), record.final_metrics.to_json()?)?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_vec(&serde_json::json!({ "wall_clock_secs": record.wall_clock_secs }))?,
    )?;
    ckpt.save(&dir.join("checkpoint.ckpt"))
}

pub fn run_dir(cfg: &RunConfig, variant: &str, seed: u64) -> std::path::PathBuf {
    let safe: String = variant
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    cfg.out_dir.join(format!("{safe}_seed{seed}"))
}

/// Full training for every configured seed, with outputs under `out_dir`.
pub fn train(cfg: &RunConfig, world: &World) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let inputs = prepare_seed(cfg, world, seed)?;
        let (record, ckpt) = train_preference(cfg, "empo", &inputs, &inputs.records, world, None, None)?;
        write_run(&run_dir(cfg, "empo", seed), &record, &ckpt)?;
        out.push(record);
    }
    Ok(out)
}
