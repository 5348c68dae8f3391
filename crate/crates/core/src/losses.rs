//! Preference losses: pairwise DPO terms conditioned on image, instruction
//! and response, with entity-weighted response log-likelihoods.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Graph, Tensor, Var};
use crate::data::{EntityMask, PreferenceRecord};
use crate::error::{EmpoError, Result};
use crate::model::{sequence_log_prob, sequence_log_prob_in, ModelConfig, ModelParams, ParamVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terms {
    pub image: bool,
    pub instruction: bool,
    pub response: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        image: true,
        instruction: true,
        response: true,
    };
    pub const RESPONSE_ONLY: Terms = Terms {
        image: false,
        instruction: false,
        response: true,
    };
}

impl Default for Terms {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub enabled_terms: Terms,
    pub weighting_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            alpha: 0.7,
            enabled_terms: Terms::ALL,
            weighting_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(EmpoError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EmpoError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Per-position weights applied to a response's token log-probs.
    pub fn token_weights(&self, mask: &EntityMask, len: usize) -> Result<Vec<f64>> {
        mask.check_bounds(len).map_err(|e| EmpoError::Input(e.to_string()))?;
        if !self.weighting_enabled {
            return Ok(vec![1.0; len]);
        }
        let mut w = vec![1.0 - self.alpha; len];
        for &p in mask.positions() {
            w[p] = self.alpha;
        }
        Ok(w)
    }
}

/// `(1−α)·Σ non-entity + α·Σ entity` over the response positions.
pub fn weighted_log_prob(per_token: &[f64], mask: &EntityMask, alpha: f64) -> Result<f64> {
    mask.check_bounds(per_token.len())
        .map_err(|e| EmpoError::Input(e.to_string()))?;
    Ok(per_token
        .iter()
        .enumerate()
        .map(|(i, lp)| {
            if mask.contains(i) {
                alpha * lp
            } else {
                (1.0 - alpha) * lp
            }
        })
        .sum())
}

fn weighted_sum(per_token: &[f64], weights: &[f64]) -> f64 {
    per_token.iter().zip(weights).map(|(lp, w)| lp * w).sum()
}

/// `−log σ(β[(πc − rc) − (πr − rr)])`.
pub fn dpo_term(chosen_policy: f64, chosen_ref: f64, rejected_policy: f64, rejected_ref: f64, beta: f64) -> f64 {
    -log_sigmoid(dpo_margin(
        chosen_policy,
        chosen_ref,
        rejected_policy,
        rejected_ref,
        beta,
    ))
}

pub fn dpo_margin(chosen_policy: f64, chosen_ref: f64, rejected_policy: f64, rejected_ref: f64, beta: f64) -> f64 {
    beta * ((chosen_policy - chosen_ref) - (rejected_policy - rejected_ref))
}

/// Graph form of [`dpo_term`] with constant reference values.
/// Returns `(loss, margin)`.
pub fn dpo_term_in(
    g: &mut Graph,
    chosen_policy: Var,
    chosen_ref: f64,
    rejected_policy: Var,
    rejected_ref: f64,
    beta: f64,
) -> Result<(Var, Var)> {
    let diff = g.sub(chosen_policy, rejected_policy)?;
    let offset = g.scalar_constant(chosen_ref - rejected_ref);
    let diff = g.sub(diff, offset)?;
    let margin = g.scale(diff, beta);
    let ls = g.log_sigmoid(margin);
    Ok((g.neg(ls), margin))
}

/// Which pairwise comparison a term makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspect {
    Image,
    Instruction,
    Response,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Image, Aspect::Instruction, Aspect::Response];

    fn enabled(self, terms: Terms) -> bool {
        match self {
            Aspect::Image => terms.image,
            Aspect::Instruction => terms.instruction,
            Aspect::Response => terms.response,
        }
    }

    fn missing(self, r: &PreferenceRecord) -> Option<&'static str> {
        let gone = match self {
            Aspect::Image => r.v_l.is_empty(),
            Aspect::Instruction => r.q_l.is_empty(),
            Aspect::Response => r.y_l.is_empty(),
        };
        gone.then_some(match self {
            Aspect::Image => "rejected image",
            Aspect::Instruction => "rejected instruction",
            Aspect::Response => "rejected response",
        })
    }

    /// `(v, q, y, y mask)` of the rejected side.
    fn rejected(self, r: &PreferenceRecord) -> (&crate::data::PatchGrid, &[usize], &[usize], &EntityMask) {
        match self {
            Aspect::Image => (&r.v_l, &r.q_w, &r.y_w, &r.masks.y_w),
            Aspect::Instruction => (&r.v_w, &r.q_l, &r.y_w, &r.masks.y_w),
            Aspect::Response => (&r.v_w, &r.q_w, &r.y_l, &r.masks.y_l),
        }
    }
}

fn check_record(r: &PreferenceRecord) -> Result<()> {
    if r.v_w.is_empty() || r.y_w.is_empty() {
        return Err(EmpoError::Input("record lacks a chosen image or response".into()));
    }
    Ok(())
}

/// Frozen-reference per-token log-probs for one record. Computed once per
/// record at the start of preference training; `None` where the record has
/// no rejected side for that aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogProbs {
    pub chosen: Vec<f64>,
    pub image_rejected: Option<Vec<f64>>,
    pub instruction_rejected: Option<Vec<f64>>,
    pub response_rejected: Option<Vec<f64>>,
}

impl ReferenceLogProbs {
    pub fn compute(reference: &ModelParams, r: &PreferenceRecord) -> Result<Self> {
        check_record(r)?;
        let chosen = sequence_log_prob(reference, &r.v_w, &r.q_w, &r.y_w)?.1;
        let side = |a: Aspect| -> Result<Option<Vec<f64>>> {
            if a.missing(r).is_some() {
                return Ok(None);
            }
            let (v, q, y, _) = a.rejected(r);
            Ok(Some(sequence_log_prob(reference, v, q, y)?.1))
        };
        Ok(Self {
            chosen,
            image_rejected: side(Aspect::Image)?,
            instruction_rejected: side(Aspect::Instruction)?,
            response_rejected: side(Aspect::Response)?,
        })
    }

    fn rejected(&self, a: Aspect) -> Option<&[f64]> {
        match a {
            Aspect::Image => self.image_rejected.as_deref(),
            Aspect::Instruction => self.instruction_rejected.as_deref(),
            Aspect::Response => self.response_rejected.as_deref(),
        }
    }
}

/// Graph handles of one record's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub terms: [Option<Var>; 3],
    pub margins: [Option<Var>; 3],
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: Option<f64>,
    pub l_q: Option<f64>,
    pub l_r: Option<f64>,
    pub total: f64,
    /// σ-arguments of the image, instruction and response terms.
    pub margins: [Option<f64>; 3],
}

impl LossBreakdown {
    pub fn read(g: &Graph, vars: &LossVars) -> Self {
        let val = |v: Option<Var>| v.map(|v| g.scalar_value(v));
        Self {
            l_v: val(vars.terms[0]),
            l_q: val(vars.terms[1]),
            l_r: val(vars.terms[2]),
            total: g.scalar_value(vars.total),
            margins: vars.margins.map(val),
        }
    }

    pub fn term(&self, a: Aspect) -> Option<f64> {
        match a {
            Aspect::Image => self.l_v,
            Aspect::Instruction => self.l_q,
            Aspect::Response => self.l_r,
        }
    }
}

fn weighted_policy(
    g: &mut Graph,
    pv: &ParamVars,
    mc: &ModelConfig,
    v: &crate::data::PatchGrid,
    q: &[usize],
    y: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let s = sequence_log_prob_in(g, pv, mc, v, q, y)?;
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let weighted = g.mul(s.per_token, w)?;
    Ok(g.sum(weighted))
}

/// Builds the sum of the enabled terms for one record on `g`.
pub fn empo_loss_in(
    g: &mut Graph,
    pv: &ParamVars,
    mc: &ModelConfig,
    r: &PreferenceRecord,
    reference: &ReferenceLogProbs,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    check_record(r)?;
    let active: Vec<Aspect> = Aspect::ALL
        .into_iter()
        .filter(|a| a.enabled(cfg.enabled_terms))
        .collect();
    for a in &active {
        if let Some(what) = a.missing(r) {
            return Err(EmpoError::Input(format!("{what} required by an enabled term")));
        }
    }
    let mut terms = [None; 3];
    let mut margins = [None; 3];
    if active.is_empty() {
        let total = g.scalar_constant(0.0);
        return Ok(LossVars { terms, margins, total });
    }
    let chosen_w = cfg.token_weights(&r.masks.y_w, r.y_w.len())?;
    let chosen = weighted_policy(g, pv, mc, &r.v_w, &r.q_w, &r.y_w, &chosen_w)?;
    let chosen_ref = weighted_sum(&reference.chosen, &chosen_w);
    let mut total: Option<Var> = None;
    for (i, a) in Aspect::ALL.into_iter().enumerate() {
        if !active.contains(&a) {
            continue;
        }
        let (v, q, y, mask) = a.rejected(r);
        let w = cfg.token_weights(mask, y.len())?;
        let rejected = weighted_policy(g, pv, mc, v, q, y, &w)?;
        let ref_lp = reference
            .rejected(a)
            .ok_or_else(|| EmpoError::Input("reference cache lacks an enabled term".into()))?;
        let (loss, margin) = dpo_term_in(g, chosen, chosen_ref, rejected, weighted_sum(ref_lp, &w), cfg.beta)?;
        terms[i] = Some(loss);
        margins[i] = Some(margin);
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    Ok(LossVars {
        terms,
        margins,
        total: total.expect("at least one active term"),
    })
}

/// Loss value of one record.
pub fn empo_loss(
    r: &PreferenceRecord,
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cache = ReferenceLogProbs::compute(reference, r)?;
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, policy, false);
    let vars = empo_loss_in(&mut g, &pv, &policy.config, r, &cache, cfg)?;
    Ok(LossBreakdown::read(&g, &vars))
}

fn single_term(
    a: Aspect,
    r: &PreferenceRecord,
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &LossConfig,
) -> Result<f64> {
    let terms = Terms {
        image: a == Aspect::Image,
        instruction: a == Aspect::Instruction,
        response: a == Aspect::Response,
    };
    let cfg = LossConfig {
        enabled_terms: terms,
        ..*cfg
    };
    Ok(empo_loss(r, policy, reference, &cfg)?.total)
}

/// Image-conditioned term: `y_w` under `v_w` against `v_l`.
pub fn loss_dpo_v(
    r: &PreferenceRecord,
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &LossConfig,
) -> Result<f64> {
    single_term(Aspect::Image, r, policy, reference, cfg)
}

/// Instruction-conditioned term: `y_w` under `q_w` against `q_l`.
pub fn loss_dpo_q(
    r: &PreferenceRecord,
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &LossConfig,
) -> Result<f64> {
    single_term(Aspect::Instruction, r, policy, reference, cfg)
}

/// Response term: `y_w` against `y_l` under `(v_w, q_w)`.
pub fn loss_dpo_r(
    r: &PreferenceRecord,
    policy: &ModelParams,
    reference: &ModelParams,
    cfg: &LossConfig,
) -> Result<f64> {
    single_term(Aspect::Response, r, policy, reference, cfg)
}

/// Loss and parameter gradient of one record.
pub fn record_gradient(
    policy: &ModelParams,
    r: &PreferenceRecord,
    reference: &ReferenceLogProbs,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, policy, true);
    let vars = empo_loss_in(&mut g, &pv, &policy.config, r, reference, cfg)?;
    g.backward(vars.total)?;
    Ok((LossBreakdown::read(&g, &vars), pv.gradients(&g, &policy.config)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, compare};
    use crate::data::dataset::{Provenance, RecordMasks};
    use crate::data::{ImageStrategy, InstructionStrategy, PatchGrid, ResponseMode};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn naive_dpo(pc: f64, rc: f64, pr: f64, rr: f64, beta: f64) -> f64 {
        let m = beta * ((pc - rc) - (pr - rr));
        -(1.0 / (1.0 + (-m).exp())).ln()
    }

    #[test]
    fn weighted_log_prob_examples() {
        let per = [-1.0, -2.0, -3.0];
        let mask = EntityMask::new(vec![1]);
        assert!((weighted_log_prob(&per, &mask, 0.7).unwrap() + 2.6).abs() < 1e-12);
        let flat = [-4.0, -6.0];
        let empty = EntityMask::new(vec![]);
        assert!((weighted_log_prob(&flat, &empty, 0.7).unwrap() + 3.0).abs() < 1e-12);
        for m in [vec![], vec![0], vec![0, 2], vec![0, 1, 2]] {
            let w = weighted_log_prob(&per, &EntityMask::new(m), 0.5).unwrap();
            assert_eq!(w, 0.5 * per.iter().sum::<f64>());
        }
        let bad = EntityMask::new(vec![3]);
        assert!(matches!(weighted_log_prob(&per, &bad, 0.7), Err(EmpoError::Input(_))));
    }

    #[test]
    fn dpo_term_examples() {
        assert!((dpo_term(-3.0, -3.0, -5.0, -5.0, 0.5) - LN_2).abs() < 1e-15);
        let l = dpo_term(-1.0, -1.2, -2.0, -1.5, 0.5);
        assert!((l - naive_dpo(-1.0, -1.2, -2.0, -1.5, 0.5)).abs() < 1e-12);
        assert!((l - 0.533382).abs() < 1e-6);
        assert!(l > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for (beta, alpha) in [(0.0, 0.5), (-1.0, 0.5), (0.5, 1.1), (0.5, -0.1)] {
            let c = LossConfig {
                beta,
                alpha,
                ..LossConfig::default()
            };
            assert!(matches!(c.validate(), Err(EmpoError::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn swap_maps_margin_to_its_negation(pc in -20.0..0.0f64, rc in -20.0..0.0f64, pr in -20.0..0.0f64, rr in -20.0..0.0f64, beta in 0.01..2.0f64) {
            let a = dpo_term(pc, rc, pr, rr, beta);
            let b = dpo_term(pr, rr, pc, rc, beta);
            prop_assert!(((-a).exp() + (-b).exp() - 1.0).abs() < 1e-12);
            prop_assert!((a - naive_dpo(pc, rc, pr, rr, beta)).abs() < 1e-9);
        }

        #[test]
        fn term_decreases_in_chosen_policy(pc in -20.0..0.0f64, rc in -20.0..0.0f64, pr in -20.0..0.0f64, rr in -20.0..0.0f64, step in 1e-3..1.0f64) {
            prop_assert!(dpo_term(pc + step, rc, pr, rr, 0.5) < dpo_term(pc, rc, pr, rr, 0.5));
        }

        #[test]
        fn margin_is_affine_in_alpha(per in prop::collection::vec((-8.0..0.0f64, -8.0..0.0f64, any::<bool>()), 1..8),
                                     rej in prop::collection::vec((-8.0..0.0f64, -8.0..0.0f64, any::<bool>()), 1..8)) {
            let split = |v: &[(f64, f64, bool)]| {
                let pol: Vec<f64> = v.iter().map(|x| x.0).collect();
                let rf: Vec<f64> = v.iter().map(|x| x.1).collect();
                let m = EntityMask::new(v.iter().enumerate().filter(|(_, x)| x.2).map(|(i, _)| i).collect());
                (pol, rf, m)
            };
            let (cp, cr, cm) = split(&per);
            let (rp, rr, rm) = split(&rej);
            let margin = |alpha: f64| {
                let w = |lp: &[f64], m: &EntityMask| weighted_log_prob(lp, m, alpha).unwrap();
                dpo_margin(w(&cp, &cm), w(&cr, &cm), w(&rp, &rm), w(&rr, &rm), 0.5)
            };
            let (a, b, c) = (margin(0.1), margin(0.4), margin(0.9));
            // Collinear: slope between the first two equals slope between the last two.
            let s1 = (b - a) / 0.3;
            let s2 = (c - b) / 0.5;
            prop_assert!((s1 - s2).abs() < 1e-9 * (1.0 + s1.abs()));
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            embed_dim: 8,
            num_patches: 4,
            context_len: 16,
            num_blocks: 2,
            seed: 11,
        }
    }

    fn grid(cells: Vec<usize>) -> PatchGrid {
        PatchGrid { side: 2, cells }
    }

    fn record() -> PreferenceRecord {
        PreferenceRecord {
            v_w: grid(vec![3, 6, 7, 3]),
            v_l: grid(vec![3, 6, 3, 3]),
            q_w: vec![6, 0, 7],
            q_l: vec![6, 0, 5],
            y_w: vec![6, 0, 7, 2],
            y_l: vec![6, 0, 5, 2],
            masks: RecordMasks {
                v_w: EntityMask::new(vec![1, 2]),
                v_l: EntityMask::new(vec![1]),
                q_w: EntityMask::new(vec![0, 2]),
                q_l: EntityMask::new(vec![0, 2]),
                y_w: EntityMask::new(vec![0, 2]),
                y_l: EntityMask::new(vec![0, 2]),
            },
            provenance: Provenance {
                image: ImageStrategy::Delete,
                instruction: InstructionStrategy::Edit,
                response: ResponseMode::CorruptedGeneration,
                edited_cells: vec![2],
                degenerate_response: false,
                empty_response_mask: false,
                attempts: 1,
            },
            edit_verified: true,
        }
    }

    fn models() -> (ModelParams, ModelParams) {
        let cfg = tiny_cfg();
        let reference = ModelParams::init_with_std(&cfg, 0.3);
        let policy = ModelParams::init_with_std(&ModelConfig { seed: 12, ..cfg }, 0.3);
        (policy, reference)
    }

    #[test]
    fn policy_equal_to_reference_gives_ln2_per_term() {
        let (_, reference) = models();
        let cfg = LossConfig::default();
        let b = empo_loss(&record(), &reference, &reference, &cfg).unwrap();
        assert!((b.total - 3.0 * LN_2).abs() < 1e-12);
        assert!((b.total - 2.079442).abs() < 1e-6);
        for t in [b.l_v, b.l_q, b.l_r] {
            assert!((t.unwrap() - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sides_give_ln2() {
        let (policy, reference) = models();
        let cfg = LossConfig::default();
        let mut r = record();
        r.v_l = r.v_w.clone();
        r.q_l = r.q_w.clone();
        r.y_l = r.y_w.clone();
        r.masks.y_l = r.masks.y_w.clone();
        for f in [loss_dpo_v, loss_dpo_q, loss_dpo_r] {
            assert!((f(&r, &policy, &reference, &cfg).unwrap() - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn total_recomposes_from_independent_terms() {
        let (policy, reference) = models();
        let cfg = LossConfig::default();
        let r = record();
        let b = empo_loss(&r, &policy, &reference, &cfg).unwrap();
        let sum = loss_dpo_v(&r, &policy, &reference, &cfg).unwrap()
            + loss_dpo_q(&r, &policy, &reference, &cfg).unwrap()
            + loss_dpo_r(&r, &policy, &reference, &cfg).unwrap();
        assert!((b.total - sum).abs() < 1e-12);
        assert!((b.total - (b.l_v.unwrap() + b.l_q.unwrap() + b.l_r.unwrap())).abs() < 1e-12);
        assert!([b.l_v, b.l_q, b.l_r].iter().all(|t| t.unwrap() > 0.0));
    }

    #[test]
    fn response_only_unweighted_is_textbook_dpo() {
        let (policy, reference) = models();
        let r = record();
        let cfg = LossConfig {
            enabled_terms: Terms::RESPONSE_ONLY,
            weighting_enabled: false,
            ..LossConfig::default()
        };
        let b = empo_loss(&r, &policy, &reference, &cfg).unwrap();
        assert_eq!(b.total, b.l_r.unwrap());
        assert!(b.l_v.is_none() && b.l_q.is_none());
        let lp = |m: &ModelParams, y: &[usize]| sequence_log_prob(m, &r.v_w, &r.q_w, y).unwrap().0;
        let expected = naive_dpo(
            lp(&policy, &r.y_w),
            lp(&reference, &r.y_w),
            lp(&policy, &r.y_l),
            lp(&reference, &r.y_l),
            0.5,
        );
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_rejected_side_is_an_input_error() {
        let (policy, reference) = models();
        let mut r = record();
        r.v_l = PatchGrid { side: 0, cells: vec![] };
        let cfg = LossConfig::default();
        assert!(matches!(
            loss_dpo_v(&r, &policy, &reference, &cfg),
            Err(EmpoError::Input(_))
        ));
        assert!(loss_dpo_q(&r, &policy, &reference, &cfg).is_ok());
    }

    /// One block, zero self-attention, uniform cross-attention with identity
    /// value and output maps: the hidden state at each position is the input
    /// embedding plus the mean instruction embedding plus the mean context
    /// embedding.
    fn hand_model(unembed_scale: f64) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 2,
            num_patches: 4,
            context_len: 16,
            num_blocks: 1,
            seed: 0,
        };
        let mut p = ModelParams::zeros(&cfg);
        let emb: Vec<f64> = (0..8)
            .flat_map(|t| [(t as f64 * 0.7).sin(), (t as f64 * 0.3).cos()])
            .collect();
        p.token_embedding = Tensor::matrix(8, 2, emb.clone()).unwrap();
        p.patch_embedding = Tensor::matrix(8, 2, emb.iter().map(|x| x * 1.5).collect()).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        p.blocks[0].cross_value = eye.clone();
        p.blocks[0].cross_output = eye;
        let u: Vec<f64> = (0..16).map(|k| unembed_scale * ((k * 7 % 5) as f64 - 2.0)).collect();
        p.unembedding = Tensor::matrix(2, 8, u).unwrap();
        p
    }

    fn hand_per_token(p: &ModelParams, v: &[usize], q: &[usize], y: &[usize]) -> Vec<f64> {
        let te = |t: usize| [p.token_embedding.get2(t, 0), p.token_embedding.get2(t, 1)];
        let pe = |t: usize| [p.patch_embedding.get2(t, 0), p.patch_embedding.get2(t, 1)];
        let ctx: Vec<[f64; 2]> = v.iter().map(|&t| pe(t)).chain(q.iter().map(|&t| te(t))).collect();
        let n = ctx.len() as f64;
        let mean = [
            ctx.iter().map(|c| c[0]).sum::<f64>() / n,
            ctx.iter().map(|c| c[1]).sum::<f64>() / n,
        ];
        let nq = q.len() as f64;
        let pooled = [
            q.iter().map(|&t| te(t)[0]).sum::<f64>() / nq,
            q.iter().map(|&t| te(t)[1]).sum::<f64>() / nq,
        ];
        let mut inputs = vec![1];
        inputs.extend_from_slice(&y[..y.len() - 1]);
        inputs
            .iter()
            .zip(y)
            .map(|(&inp, &target)| {
                let e = te(inp);
                let h = [e[0] + pooled[0] + mean[0], e[1] + pooled[1] + mean[1]];
                let logits: Vec<f64> = (0..8)
                    .map(|k| h[0] * p.unembedding.get2(0, k) + h[1] * p.unembedding.get2(1, k))
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits[target] - z.ln()
            })
            .collect()
    }

    #[test]
    fn hand_set_model_matches_hand_oracle() {
        let policy = hand_model(1.0);
        let reference = hand_model(0.6);
        let r = record();
        let cfg = LossConfig::default();
        let w = |p: &ModelParams, v: &PatchGrid, q: &[usize], y: &[usize], m: &EntityMask| {
            weighted_log_prob(&hand_per_token(p, &v.cells, q, y), m, cfg.alpha).unwrap()
        };
        let side = |p: &ModelParams, a: Aspect| {
            let (v, q, y, m) = a.rejected(&r);
            (w(p, &r.v_w, &r.q_w, &r.y_w, &r.masks.y_w), w(p, v, q, y, m))
        };
        let b = empo_loss(&r, &policy, &reference, &cfg).unwrap();
        for a in Aspect::ALL {
            let (pc, pr) = side(&policy, a);
            let (rc, rr) = side(&reference, a);
            let expected = naive_dpo(pc, rc, pr, rr, cfg.beta);
            assert!((b.term(a).unwrap() - expected).abs() < 1e-10, "{a:?}");
            assert!((b.term(a).unwrap() - LN_2).abs() > 1e-4, "{a:?} should be informative");
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (policy, reference) = models();
        let r = record();
        let cfg = LossConfig::default();
        let cache = ReferenceLogProbs::compute(&reference, &r).unwrap();
        let (_, grad) = record_gradient(&policy, &r, &cache, &cfg).unwrap();
        let mut probe = policy.clone();
        let numeric = central_difference(&policy.flatten(), 1e-5, |x| {
            probe.assign_flat(x);
            empo_loss(&r, &probe, &reference, &cfg).unwrap().total
        });
        let report = compare(&grad.flatten(), &numeric);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn no_enabled_terms_gives_zero() {
        let (policy, reference) = models();
        let cfg = LossConfig {
            enabled_terms: Terms {
                image: false,
                instruction: false,
                response: false,
            },
            ..LossConfig::default()
        };
        let r = record();
        let b = empo_loss(&r, &policy, &reference, &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        let cache = ReferenceLogProbs::compute(&reference, &r).unwrap();
        let (_, g) = record_gradient(&policy, &r, &cache, &cfg).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }
}
