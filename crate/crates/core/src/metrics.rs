//! Hallucination metrics: CHAIR at response and mention level, and yes/no
//! discriminative accuracy and F1 ("yes" is the positive class).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::benchmark::EvalItem;
use crate::data::text::mentioned_entities;
use crate::data::{EntityId, Scene, TokenSeq, World};
use crate::error::{EmpoError, Result};
use crate::model::{answer_yes_no, greedy_decode, ModelParams};
use crate::par::{map_slice, Execution};

/// Entity tokens of a response, in order, with repeats.
pub fn extract_entities(world: &World, response: &[usize]) -> Vec<EntityId> {
    mentioned_entities(world, response)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub tokens: TokenSeq,
    pub gold_yes: bool,
    pub predicted_yes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub scene: Scene,
    pub gold_entities: BTreeSet<EntityId>,
    pub response: TokenSeq,
    pub questions: Vec<Question>,
}

impl LabeledExample {
    pub fn new(scene: Scene, response: TokenSeq, questions: Vec<Question>) -> Self {
        Self {
            gold_entities: scene.entities().into_iter().collect(),
            scene,
            response,
            questions,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCounts {
    pub hallucinated_mentions: usize,
    pub mentions: usize,
    pub hallucinated_responses: usize,
    pub responses: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_yes: usize,
    pub false_yes: usize,
    pub true_no: usize,
    pub false_no: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_yes + self.false_yes + self.true_no + self.false_no
    }
}

/// `num / den`, or `(0, true)` when the denominator is zero.
fn rate(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    pub counts: ChairCounts,
    pub zero_mentions: bool,
    pub zero_responses: bool,
}

pub fn chair_counts(world: &World, examples: &[LabeledExample]) -> ChairCounts {
    let mut c = ChairCounts::default();
    for ex in examples {
        let mentions = extract_entities(world, &ex.response);
        let bad = mentions.iter().filter(|e| !ex.gold_entities.contains(e)).count();
        c.mentions += mentions.len();
        c.hallucinated_mentions += bad;
        c.responses += 1;
        c.hallucinated_responses += usize::from(bad > 0);
    }
    c
}

impl ChairScores {
    pub fn from_counts(counts: ChairCounts) -> Self {
        let (chair_i, zero_mentions) = rate(counts.hallucinated_mentions, counts.mentions);
        let (chair_s, zero_responses) = rate(counts.hallucinated_responses, counts.responses);
        Self {
            chair_s,
            chair_i,
            counts,
            zero_mentions,
            zero_responses,
        }
    }
}

pub fn chair(world: &World, examples: &[LabeledExample]) -> ChairScores {
    ChairScores::from_counts(chair_counts(world, examples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeScores {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub zero_questions: bool,
    pub zero_f1_denominator: bool,
}

impl DiscriminativeScores {
    pub fn from_confusion(c: Confusion) -> Self {
        let (accuracy, zero_questions) = rate(c.true_yes + c.true_no, c.total());
        let (f1, zero_f1_denominator) = rate(2 * c.true_yes, 2 * c.true_yes + c.false_yes + c.false_no);
        Self {
            accuracy,
            f1,
            confusion: c,
            zero_questions,
            zero_f1_denominator,
        }
    }
}

pub fn confusion(examples: &[LabeledExample]) -> Confusion {
    let mut c = Confusion::default();
    for q in examples.iter().flat_map(|e| &e.questions) {
        match (q.gold_yes, q.predicted_yes) {
            (true, true) => c.true_yes += 1,
            (false, true) => c.false_yes += 1,
            (false, false) => c.true_no += 1,
            (true, false) => c.false_no += 1,
        }
    }
    c
}

pub fn discriminative(examples: &[LabeledExample]) -> DiscriminativeScores {
    DiscriminativeScores::from_confusion(confusion(examples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub chair_counts: ChairCounts,
    pub confusion: Confusion,
    /// Rates whose denominator was zero and were reported as 0.
    pub zero_denominators: ZeroDenominators,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroDenominators {
    pub chair_s: bool,
    pub chair_i: bool,
    pub accuracy: bool,
    pub f1: bool,
}

impl MetricsReport {
    pub fn from_counts(chair_counts: ChairCounts, confusion: Confusion) -> Self {
        let c = ChairScores::from_counts(chair_counts);
        let d = DiscriminativeScores::from_confusion(confusion);
        Self {
            chair_s: c.chair_s,
            chair_i: c.chair_i,
            accuracy: d.accuracy,
            f1: d.f1,
            chair_counts,
            confusion,
            zero_denominators: ZeroDenominators {
                chair_s: c.zero_responses,
                chair_i: c.zero_mentions,
                accuracy: d.zero_questions,
                f1: d.zero_f1_denominator,
            },
        }
    }

    pub fn compute(world: &World, examples: &[LabeledExample]) -> Self {
        Self::from_counts(chair_counts(world, examples), confusion(examples))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let c = &self.chair_counts;
        let d = &self.confusion;
        let rows = [
            (
                "CHAIR_s",
                self.chair_s,
                format!("{}/{}", c.hallucinated_responses, c.responses),
            ),
            (
                "CHAIR_i",
                self.chair_i,
                format!("{}/{}", c.hallucinated_mentions, c.mentions),
            ),
            (
                "Accuracy",
                self.accuracy,
                format!("{}/{}", d.true_yes + d.true_no, d.total()),
            ),
            (
                "F1",
                self.f1,
                format!("{}/{}", 2 * d.true_yes, 2 * d.true_yes + d.false_yes + d.false_no),
            ),
        ];
        let mut out = format!("{:<10} {:>8} {:>12}\n", "metric", "value", "count");
        for (name, value, count) in rows {
            let _ = writeln!(out, "{name:<10} {value:>8.4} {count:>12}");
        }
        out
    }
}

/// Decoding budget for free-form responses on the benchmark.
pub const MAX_RESPONSE_LEN: usize = 16;

/// Generates a response and answers every probe for each benchmark item.
pub fn label(params: &ModelParams, world: &World, items: &[EvalItem], exec: Execution) -> Result<Vec<LabeledExample>> {
    if params.config.vocab_size < world.vocab_size() {
        return Err(EmpoError::Config(format!(
            "model vocabulary {} smaller than world vocabulary {}",
            params.config.vocab_size,
            world.vocab_size()
        )));
    }
    map_slice(exec, items, |item| {
        let response = greedy_decode(params, &item.grid, &item.instruction, MAX_RESPONSE_LEN)?;
        let questions = item
            .probes
            .iter()
            .map(|p| {
                Ok(Question {
                    tokens: p.tokens.clone(),
                    gold_yes: p.gold_yes,
                    predicted_yes: answer_yes_no(params, &item.grid, &p.tokens)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledExample::new(item.scene.clone(), response, questions))
    })
    .into_iter()
    .collect()
}

pub fn evaluate(params: &ModelParams, world: &World, items: &[EvalItem], exec: Execution) -> Result<MetricsReport> {
    Ok(MetricsReport::compute(world, &label(params, world, items, exec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::Catalog;
    use crate::data::{generate_scene, EntityId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn world() -> World {
        World::new(Catalog::default()).unwrap()
    }

    fn random_corpus(w: &World, n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let scene = generate_scene(w, seed * 1000 + i as u64);
                let len = rng.gen_range(0..10);
                let response = (0..len).map(|_| rng.gen_range(0..w.vocab_size())).collect();
                let questions = (0..rng.gen_range(0..5))
                    .map(|_| Question {
                        tokens: vec![],
                        gold_yes: rng.gen(),
                        predicted_yes: rng.gen(),
                    })
                    .collect();
                LabeledExample::new(scene, response, questions)
            })
            .collect()
    }

    /// Brute-force recount by name lookup, independent of the token helpers.
    fn oracle_chair(w: &World, corpus: &[LabeledExample]) -> (usize, usize, usize, usize) {
        let entity_names: HashSet<String> = w.entities().map(|e| w.entity_name(e).to_string()).collect();
        let (mut hm, mut m, mut hr) = (0, 0, 0);
        for ex in corpus {
            let gold: HashSet<String> = ex
                .scene
                .entities()
                .iter()
                .map(|&e| w.entity_name(e).to_string())
                .collect();
            let mut any = false;
            for &t in &ex.response {
                let name = w.token_name(t);
                if entity_names.contains(&name) {
                    m += 1;
                    if !gold.contains(&name) {
                        hm += 1;
                        any = true;
                    }
                }
            }
            hr += usize::from(any);
        }
        (hm, m, hr, corpus.len())
    }

    fn oracle_disc(corpus: &[LabeledExample]) -> (f64, f64) {
        let qs: Vec<&Question> = corpus.iter().flat_map(|e| &e.questions).collect();
        let correct = qs.iter().filter(|q| q.gold_yes == q.predicted_yes).count();
        let tp = qs.iter().filter(|q| q.gold_yes && q.predicted_yes).count();
        let pred_pos = qs.iter().filter(|q| q.predicted_yes).count();
        let gold_pos = qs.iter().filter(|q| q.gold_yes).count();
        let acc = if qs.is_empty() {
            0.0
        } else {
            correct as f64 / qs.len() as f64
        };
        // Harmonic mean of precision and recall, cleared of fractions.
        let f1 = if pred_pos + gold_pos == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (pred_pos + gold_pos) as f64
        };
        (acc, f1)
    }

    #[test]
    fn extraction_examples() {
        let w = world();
        assert!(extract_entities(&w, &[w.word("a"), w.word(".")]).is_empty());
        let car = EntityId(0);
        assert_eq!(extract_entities(&w, &[w.entity_token(car)]), vec![car]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let seq: Vec<usize> = (0..12).map(|_| rng.gen_range(0..w.vocab_size())).collect();
            let scan: Vec<EntityId> = seq
                .iter()
                .filter_map(|&t| w.entities().find(|&e| w.entity_token(e) == t))
                .collect();
            assert_eq!(extract_entities(&w, &seq), scan);
        }
    }

    #[test]
    fn chair_examples() {
        let w = world();
        let scene = generate_scene(&w, 1);
        let gold = scene.entities();
        let faithful: Vec<usize> = gold.iter().map(|&e| w.entity_token(e)).collect();
        let ex = LabeledExample::new(scene.clone(), faithful, vec![]);
        let s = chair(&w, std::slice::from_ref(&ex));
        assert_eq!((s.chair_s, s.chair_i), (0.0, 0.0));

        let ghost = w.entities().find(|&e| !scene.contains(e)).unwrap();
        let g0 = w.entity_token(gold[0]);
        let g1 = w.entity_token(gold[1]);
        let resp = vec![g0, g1, w.word("a"), g0, w.entity_token(ghost)];
        let s = chair(&w, &[LabeledExample::new(scene, resp, vec![])]);
        assert_eq!((s.chair_i, s.chair_s), (0.25, 1.0));
    }

    #[test]
    fn chair_zero_denominators_are_flagged() {
        let w = world();
        let s = chair(&w, &[]);
        assert!(s.zero_mentions && s.zero_responses);
        assert_eq!((s.chair_s, s.chair_i), (0.0, 0.0));
        let s = chair(
            &w,
            &[LabeledExample::new(generate_scene(&w, 2), vec![w.word("a")], vec![])],
        );
        assert!(s.zero_mentions && !s.zero_responses);
    }

    #[test]
    fn discriminative_examples() {
        let w = world();
        let q = |g, p| Question {
            tokens: vec![],
            gold_yes: g,
            predicted_yes: p,
        };
        let scene = generate_scene(&w, 3);
        let all_right = LabeledExample::new(scene.clone(), vec![], vec![q(true, true), q(false, false)]);
        let d = discriminative(&[all_right]);
        assert_eq!((d.accuracy, d.f1), (1.0, 1.0));
        let all_no = LabeledExample::new(
            scene,
            vec![],
            vec![q(true, false), q(false, false), q(true, false), q(false, false)],
        );
        let d = discriminative(&[all_no]);
        assert_eq!((d.accuracy, d.f1), (0.5, 0.0));
    }

    #[test]
    fn random_corpora_match_oracles() {
        let w = world();
        for seed in 0..40 {
            let corpus = random_corpus(&w, 50, seed);
            let r = MetricsReport::compute(&w, &corpus);
            let (hm, m, hr, n) = oracle_chair(&w, &corpus);
            let c = r.chair_counts;
            assert_eq!(
                (
                    c.hallucinated_mentions,
                    c.mentions,
                    c.hallucinated_responses,
                    c.responses
                ),
                (hm, m, hr, n)
            );
            assert_eq!(r.chair_i, hm as f64 / m as f64);
            assert_eq!(r.chair_s, hr as f64 / n as f64);
            let (acc, f1) = oracle_disc(&corpus);
            assert_eq!((r.accuracy, r.f1), (acc, f1));
        }
    }

    #[test]
    fn report_json_and_table() {
        let w = world();
        let r = MetricsReport::compute(&w, &random_corpus(&w, 10, 1));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let t = r.table();
        assert_eq!(t.lines().count(), 5);
        assert!(t.lines().skip(1).all(|l| l.len() == t.lines().nth(1).unwrap().len()));
    }

    proptest! {
        #[test]
        fn metrics_invariants(seed in 0u64..500, pick in 0usize..50, extra in 0usize..20) {
            let w = world();
            let corpus = random_corpus(&w, 50, seed);
            let base = MetricsReport::compute(&w, &corpus);
            for x in [base.chair_s, base.chair_i, base.accuracy, base.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert_eq!(base, MetricsReport::from_counts(base.chair_counts, base.confusion));

            let mut rev = corpus.clone();
            rev.reverse();
            let n = rev.len();
            rev.rotate_left(extra % n);
            prop_assert_eq!(MetricsReport::compute(&w, &rev), base);

            let mut more = corpus.clone();
            let ghost = w.entities().find(|&e| !more[pick].scene.contains(e)).unwrap();
            more[pick].response.push(w.entity_token(ghost));
            let after = MetricsReport::compute(&w, &more);
            prop_assert!(after.chair_s >= base.chair_s);
            prop_assert_eq!(after.chair_counts.hallucinated_mentions, base.chair_counts.hallucinated_mentions + 1);
        }
    }
}
