use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PretrainConfig;
use super::optim::Optimizer;
use crate::autodiff::Graph;
use crate::data::negatives::top_partner;
use crate::data::text::{caption, mentioned_entities, yes_no_question};
use crate::data::world::{NO, YES};
use crate::data::{PatchGrid, PreferenceRecord, TokenSeq, World};
use crate::error::{EmpoError, Result};
use crate::model::{sequence_log_prob_in, ModelConfig, ModelParams, ParamVars};
use crate::par::{map_slice, Execution};
use crate::seed::derive_seed;

const SFT_STREAM: u64 = 0x7366_7400;
const SFT_SHUFFLE: u64 = 0x7366_7401;

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub grid: PatchGrid,
    pub prompt: TokenSeq,
    pub target: TokenSeq,
}

/// Caption and yes/no examples built from the chosen side of each record.
/// With probability `noise` a caption gains the strongest absent
/// co-occurrence partner, and the question about that partner is answered
/// "yes".
pub fn sft_examples(world: &World, records: &[PreferenceRecord], noise: f64, seed: u64) -> Vec<SftExample> {
    let mut out = Vec::with_capacity(records.len() * 4);
    for (i, r) in records.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, SFT_STREAM));
        let present = mentioned_entities(world, &r.y_w);
        if present.is_empty() {
            continue;
        }
        let ghost = top_partner(world, &present);
        let noisy = rng.gen_bool(noise);
        let target = if noisy {
            let mut with_ghost = present.clone();
            with_ghost.push(ghost);
            caption(world, &with_ghost).tokens
        } else {
            r.y_w.clone()
        };
        out.push(SftExample {
            grid: r.v_w.clone(),
            prompt: r.q_w.clone(),
            target,
        });
        let shown = *present.choose(&mut rng).expect("nonempty");
        let absent: Vec<_> = world
            .entities()
            .filter(|e| !present.contains(e) && *e != ghost)
            .collect();
        let mut qa = vec![(shown, YES), (ghost, if rng.gen_bool(noise) { YES } else { NO })];
        if let Some(&other) = absent.choose(&mut rng) {
            qa.push((other, NO));
        }
        for (e, answer) in qa {
            out.push(SftExample {
                grid: r.v_w.clone(),
                prompt: yes_no_question(world, e),
                target: vec![answer],
            });
        }
    }
    out
}

pub(crate) fn epoch_order(seed: u64, stream: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, stream)));
    order
}

/// Mean of per-item gradients, summed in `items` order so that the result
/// does not depend on how the items were scheduled.
pub fn mean_gradient<T: Send>(
    exec: Execution,
    config: &ModelConfig,
    items: &[usize],
    f: impl Fn(usize) -> Result<(T, ModelParams)> + Sync + Send,
) -> Result<(Vec<T>, ModelParams)> {
    let parts = map_slice(exec, items, |&i| f(i));
    let scale = 1.0 / items.len() as f64;
    let mut acc = ModelParams::zeros(config);
    let mut values = Vec::with_capacity(items.len());
    for p in parts {
        let (v, g) = p?;
        acc.axpy(scale, &g);
        values.push(v);
    }
    Ok((values, acc))
}

fn sft_gradient(params: &ModelParams, ex: &SftExample) -> Result<(f64, ModelParams)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params, true);
    let s = sequence_log_prob_in(&mut g, &pv, &params.config, &ex.grid, &ex.prompt, &ex.target)?;
    let nll = g.neg(s.total);
    g.backward(nll)?;
    Ok((g.scalar_value(nll), pv.gradients(&g, &params.config)))
}

/// Supervised warm-start from a fresh initialization. Returns the trained
/// parameters and the mean negative log-likelihood of each epoch.
pub fn pretrain(
    world: &World,
    records: &[PreferenceRecord],
    cfg: &PretrainConfig,
    model: &ModelConfig,
    seed: u64,
    exec: Execution,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut params = ModelParams::init(model);
    let examples = sft_examples(world, records, cfg.caption_noise, seed);
    if examples.is_empty() || cfg.epochs == 0 {
        return Ok((params, vec![]));
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params.num_parameters());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(seed, SFT_SHUFFLE, epoch, examples.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let (nll, grad) = mean_gradient(exec, model, batch, |i| sft_gradient(&params, &examples[i]))?;
            let batch_nll: f64 = nll.iter().sum();
            if !batch_nll.is_finite() || !grad.is_finite() {
                return Err(EmpoError::NonFinite {
                    step: opt.t as usize,
                    detail: format!("warm-start epoch {epoch}"),
                });
            }
            total += batch_nll;
            opt.step(&mut params, &grad);
        }
        history.push(total / examples.len() as f64);
    }
    Ok((params, history))
}
