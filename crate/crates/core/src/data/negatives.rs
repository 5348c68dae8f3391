//! Rejected-sample construction for the image, instruction and response aspects.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, render, PatchGrid, Scene};
use super::text::{build_instruction, caption, mentioned_entities, EntityMask, Instruction};
use super::world::{EntityId, TokenId, TokenKind, TokenSeq, World, BACKGROUND};
use crate::error::{EmpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStrategy {
    Delete,
    Replace,
    Crop,
    Noise,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStrategy {
    Edit,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    CorruptedGeneration,
    RankedPair,
}

/// Numerator/denominator of the entity edit rate (30%).
const EDIT_RATE: (usize, usize) = (3, 10);
const NOISE_PROB: f64 = 0.3;

/// `ceil(0.3 · k)` in exact integer arithmetic.
pub fn edit_count(entity_cells: usize) -> usize {
    (EDIT_RATE.0 * entity_cells).div_ceil(EDIT_RATE.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellEdit {
    pub cell: usize,
    pub from: TokenId,
    pub to: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEdit {
    pub grid: PatchGrid,
    /// Cells whose token changed, ascending.
    pub edits: Vec<CellEdit>,
}

fn diff_edits(before: &PatchGrid, after: PatchGrid) -> ImageEdit {
    let edits = (0..before.cells.len())
        .filter(|&c| before.cells[c] != after.cells[c])
        .map(|c| CellEdit {
            cell: c,
            from: before.cells[c],
            to: after.cells[c],
        })
        .collect();
    ImageEdit { grid: after, edits }
}

/// Builds a rejected image from `v_w`. `mask` lists the entity cells of `v_w`.
pub fn reject_image(
    world: &World,
    v_w: &PatchGrid,
    mask: &EntityMask,
    strategy: ImageStrategy,
    seed: u64,
) -> Result<ImageEdit> {
    mask.check_bounds(v_w.len())?;
    if let Some(&p) = mask
        .positions()
        .iter()
        .find(|&&p| world.token_entity(v_w.cells[p]).is_none())
    {
        return Err(EmpoError::Input(format!(
            "image mask position {p} is not an entity cell"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = v_w.clone();
    match strategy {
        ImageStrategy::Delete | ImageStrategy::Replace => {
            let k = mask.len();
            if k == 0 {
                return Err(EmpoError::Strategy(format!(
                    "{strategy:?} needs at least one entity cell"
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, k, edit_count(k))
                .into_iter()
                .map(|i| mask.positions()[i])
                .collect();
            picked.sort_unstable();
            for c in picked {
                grid.cells[c] = if strategy == ImageStrategy::Delete {
                    BACKGROUND
                } else {
                    let e = world.token_entity(v_w.cells[c]).expect("checked above");
                    let r = world.replacement(e).ok_or_else(|| {
                        EmpoError::Strategy(format!("no same-category replacement for {}", world.entity_name(e)))
                    })?;
                    world.entity_token(r)
                };
            }
        }
        ImageStrategy::Crop => {
            let side = v_w.side;
            let win = side.div_ceil(2);
            let (r0, c0) = (rng.gen_range(0..=side - win), rng.gen_range(0..=side - win));
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    grid.cells[r * side + c] = BACKGROUND;
                }
            }
        }
        ImageStrategy::Noise => {
            let n = world.num_entities();
            for cell in grid.cells.iter_mut() {
                if rng.gen_bool(NOISE_PROB) {
                    let pick = rng.gen_range(0..=n);
                    *cell = if pick == n {
                        BACKGROUND
                    } else {
                        world.entity_token(EntityId(pick))
                    };
                }
            }
        }
        ImageStrategy::Random => {
            grid = render(world, &generate_scene(world, rng.gen()));
        }
    }
    Ok(diff_edits(v_w, grid))
}

/// Fixed patch-token embeddings standing in for an image-text encoder.
#[derive(Debug, Clone)]
pub struct EditGate {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditVerdict {
    pub applied: bool,
    pub delta_sim: f64,
}

impl EditVerdict {
    pub fn passes(&self, threshold: f64) -> bool {
        self.applied && self.delta_sim >= threshold
    }
}

pub const EDIT_GATE_THRESHOLD: f64 = 0.5;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl EditGate {
    /// Entities share a component with their category, so same-category
    /// entities have cosine 1/5 and everything else is orthogonal.
    pub fn new(world: &World) -> Self {
        let n = world.num_entities();
        let dims = n + world.catalog.categories.len() + 1;
        let embeddings = (0..world.vocab_size())
            .map(|t| {
                let mut v = vec![0.0; dims];
                if let Some(e) = world.token_entity(t) {
                    v[e.0] = 2.0;
                    v[n + world.category(e)] = 1.0;
                } else if t == BACKGROUND {
                    v[dims - 1] = 1.0;
                }
                v
            })
            .collect();
        Self { embeddings }
    }

    /// Unit one-hot embedding per token.
    pub fn orthogonal(vocab_size: usize) -> Self {
        let embeddings = (0..vocab_size)
            .map(|t| {
                let mut v = vec![0.0; vocab_size];
                v[t] = 1.0;
                v
            })
            .collect();
        Self { embeddings }
    }

    pub fn similarity(&self, a: TokenId, b: TokenId) -> f64 {
        cosine(&self.embeddings[a], &self.embeddings[b])
    }

    /// Compares the observed region of `v_l` at each intended edit against the
    /// source token and the intended target. Applied iff every intended cell
    /// is closer to its target than to its source.
    pub fn verify_edit(&self, v_w: &PatchGrid, v_l: &PatchGrid, edits: &[CellEdit]) -> EditVerdict {
        if edits.is_empty() || v_w == v_l {
            return EditVerdict {
                applied: false,
                delta_sim: 0.0,
            };
        }
        let mut applied = true;
        let mut total = 0.0;
        for e in edits {
            let observed = v_l.cells[e.cell];
            let to_source = self.similarity(observed, v_w.cells[e.cell]);
            let to_target = self.similarity(observed, e.to);
            applied &= to_target > to_source;
            total += to_target - to_source;
        }
        EditVerdict {
            applied,
            delta_sim: total / edits.len() as f64,
        }
    }
}

/// Builds a rejected instruction. `mask` lists the span positions of `q_w`.
pub fn reject_instruction(
    world: &World,
    q_w: &[TokenId],
    mask: &EntityMask,
    strategy: InstructionStrategy,
    seed: u64,
) -> Result<Instruction> {
    mask.check_bounds(q_w.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        InstructionStrategy::Edit => {
            if mask.is_empty() {
                return Err(EmpoError::Strategy("instruction edit needs an entity span".into()));
            }
            let mut tokens = q_w.to_vec();
            for &p in mask.positions() {
                let t = q_w[p];
                tokens[p] = match world.kind(t) {
                    Some(TokenKind::Entity) => {
                        let e = world.token_entity(t).expect("entity kind");
                        let peers = world.category_peers(e);
                        if peers.is_empty() {
                            return Err(EmpoError::Strategy(format!(
                                "{} has no same-category alternative",
                                world.entity_name(e)
                            )));
                        }
                        world.entity_token(peers[rng.gen_range(0..peers.len())])
                    }
                    Some(TokenKind::Attribute) => {
                        let n = world.catalog.attributes.len();
                        let cur = t - world.attribute_token(0);
                        world.attribute_token((cur + rng.gen_range(1..n)) % n)
                    }
                    Some(TokenKind::Relation) => {
                        let n = world.catalog.relations.len();
                        let cur = t - world.relation_token(0);
                        world.relation_token((cur + rng.gen_range(1..n)) % n)
                    }
                    _ => {
                        return Err(EmpoError::Input(format!(
                            "instruction mask position {p} is not a span token"
                        )))
                    }
                };
            }
            Ok(Instruction {
                tokens,
                mask: mask.clone(),
            })
        }
        InstructionStrategy::Random => {
            let other = generate_scene(world, rng.gen());
            Ok(build_instruction(world, &other, &mut rng))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedResponse {
    pub tokens: TokenSeq,
    pub mask: EntityMask,
    /// Both ranked candidates scored equally.
    pub degenerate: bool,
}

/// Net scene-consistent facts: mentions present in the scene minus mentions
/// that are not.
pub fn judge_score(world: &World, scene: &Scene, response: &[TokenId]) -> i64 {
    mentioned_entities(world, response)
        .into_iter()
        .map(|e| if scene.contains(e) { 1 } else { -1 })
        .sum()
}

/// Returns the lower-scoring candidate; a tie returns `b` flagged degenerate.
pub fn rank_pair(world: &World, scene: &Scene, a: &[TokenId], b: &[TokenId]) -> (TokenSeq, bool) {
    let (sa, sb) = (judge_score(world, scene, a), judge_score(world, scene, b));
    match sa.cmp(&sb) {
        std::cmp::Ordering::Less => (a.to_vec(), false),
        std::cmp::Ordering::Greater => (b.to_vec(), false),
        std::cmp::Ordering::Equal => (b.to_vec(), true),
    }
}

/// Absent entity most strongly co-occurring with `present`, ties by lowest id.
pub fn most_likely_absent(world: &World, scene: &Scene, present: &[EntityId]) -> EntityId {
    strongest_partner(world, present, |b| !scene.contains(b))
}

/// Entity outside `present` with the largest summed co-occurrence weight
/// with `present`, ties to the lowest id.
pub fn top_partner(world: &World, present: &[EntityId]) -> EntityId {
    strongest_partner(world, present, |b| !present.contains(&b))
}

fn strongest_partner(world: &World, present: &[EntityId], absent: impl Fn(EntityId) -> bool) -> EntityId {
    let mut best: Option<(EntityId, f64)> = None;
    for b in world.entities().filter(|&b| absent(b)) {
        let w: f64 = present.iter().map(|&a| world.cooccurrence(a, b)).sum();
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((b, w));
        }
    }
    best.expect("catalog has more entities than any scene").0
}

fn corrupt(world: &World, scene: &Scene, entities: &[EntityId], rng: &mut ChaCha8Rng) -> Vec<EntityId> {
    let mut out = entities.to_vec();
    let ghost = most_likely_absent(world, scene, entities);
    if !out.is_empty() && rng.gen_bool(0.5) {
        let i = rng.gen_range(0..out.len());
        out[i] = ghost;
    } else {
        out.push(ghost);
    }
    out
}

/// Builds a rejected response for `y_w`.
pub fn reject_response(
    world: &World,
    scene: &Scene,
    _q_w: &[TokenId],
    y_w: &[TokenId],
    mode: ResponseMode,
    seed: u64,
) -> RejectedResponse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mentioned = mentioned_entities(world, y_w);
    match mode {
        ResponseMode::CorruptedGeneration => {
            let c = caption(world, &corrupt(world, scene, &mentioned, &mut rng));
            RejectedResponse {
                tokens: c.tokens,
                mask: c.mask,
                degenerate: false,
            }
        }
        ResponseMode::RankedPair => {
            let sample_candidate = |rng: &mut ChaCha8Rng| {
                let mut kept: Vec<EntityId> = mentioned.iter().copied().filter(|_| rng.gen_bool(0.8)).collect();
                if kept.is_empty() && !mentioned.is_empty() {
                    kept.push(mentioned[0]);
                }
                if rng.gen_bool(0.5) {
                    kept.push(most_likely_absent(world, scene, &kept));
                }
                caption(world, &kept).tokens
            };
            let a = sample_candidate(&mut rng);
            let b = sample_candidate(&mut rng);
            let (tokens, degenerate) = rank_pair(world, scene, &a, &b);
            let mask = EntityMask::of_sequence(world, &tokens);
            RejectedResponse {
                tokens,
                mask,
                degenerate,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::Catalog;

    fn world() -> World {
        World::new(Catalog::default()).unwrap()
    }

    #[test]
    fn edit_count_rounds_up_exactly() {
        assert_eq!(edit_count(1), 1);
        assert_eq!(edit_count(3), 1);
        assert_eq!(edit_count(4), 2);
        assert_eq!(edit_count(10), 3);
        assert_eq!(edit_count(16), 5);
    }

    fn grid_with(w: &World, entities: &[(usize, usize)]) -> PatchGrid {
        let mut g = PatchGrid::background(4);
        for &(cell, e) in entities {
            g.cells[cell] = w.entity_token(EntityId(e));
        }
        g
    }

    #[test]
    fn delete_on_ten_entity_grid_removes_three() {
        let w = world();
        let g = grid_with(&w, &(0..10).map(|i| (i, i)).collect::<Vec<_>>());
        let mask = EntityMask::new(g.entity_cells(&w));
        for seed in 0..50 {
            let edit = reject_image(&w, &g, &mask, ImageStrategy::Delete, seed).unwrap();
            assert_eq!(edit.edits.len(), 3);
            assert!(edit.edits.iter().all(|e| e.to == BACKGROUND));
            assert_eq!(g.hamming(&edit.grid), 3);
        }
    }

    #[test]
    fn replace_single_entity_changes_one_cell() {
        let w = world();
        let g = grid_with(&w, &[(5, 0)]);
        let mask = EntityMask::new(vec![5]);
        let edit = reject_image(&w, &g, &mask, ImageStrategy::Replace, 3).unwrap();
        assert_eq!(edit.edits.len(), 1);
        assert_eq!(edit.grid.cells[5], w.entity_token(EntityId(1)));
        assert_eq!((0..16).filter(|&c| g.cells[c] == edit.grid.cells[c]).count(), 15);
    }

    #[test]
    fn delete_replace_need_entities() {
        let w = world();
        let g = PatchGrid::background(4);
        for s in [ImageStrategy::Delete, ImageStrategy::Replace] {
            let err = reject_image(&w, &g, &EntityMask::default(), s, 0).unwrap_err();
            assert!(matches!(err, EmpoError::Strategy(_)));
        }
        // Crop on an empty grid is legal but edits nothing.
        let e = reject_image(&w, &g, &EntityMask::default(), ImageStrategy::Crop, 0).unwrap();
        assert!(e.edits.is_empty());
    }

    #[test]
    fn gate_no_edit_and_orthogonal_replace() {
        let w = world();
        let g = grid_with(&w, &[(2, 4), (9, 16)]);
        let gate = EditGate::orthogonal(w.vocab_size());
        let v = gate.verify_edit(&g, &g, &[]);
        assert_eq!(
            v,
            EditVerdict {
                applied: false,
                delta_sim: 0.0
            }
        );

        let mask = EntityMask::new(g.entity_cells(&w));
        let edit = reject_image(&w, &g, &mask, ImageStrategy::Replace, 1).unwrap();
        let v = gate.verify_edit(&g, &edit.grid, &edit.edits);
        assert!(v.applied);
        assert_eq!(v.delta_sim, 1.0);
    }

    #[test]
    fn category_gate_scores() {
        let w = world();
        let gate = EditGate::new(&w);
        let (car, bus, dog) = (
            w.entity_token(EntityId(0)),
            w.entity_token(EntityId(1)),
            w.entity_token(EntityId(4)),
        );
        assert!((gate.similarity(car, bus) - 0.2).abs() < 1e-12);
        assert_eq!(gate.similarity(car, dog), 0.0);
        assert_eq!(gate.similarity(car, BACKGROUND), 0.0);
    }

    #[test]
    fn instruction_edit_keeps_skeleton() {
        let w = world();
        let q: Vec<TokenId> = vec![
            w.word("what"),
            w.word("is"),
            w.relation_token(0),
            w.word("the"),
            w.entity_token(EntityId(6)),
            w.word("?"),
        ];
        let mask = EntityMask::of_sequence(&w, &q);
        let out = reject_instruction(&w, &q, &mask, InstructionStrategy::Edit, 4).unwrap();
        assert_eq!(out.tokens.len(), q.len());
        for (p, (&a, &b)) in q.iter().zip(&out.tokens).enumerate() {
            if mask.contains(p) {
                assert_ne!(a, b);
                assert_eq!(w.kind(a), w.kind(b));
            } else {
                assert_eq!(a, b);
            }
        }
        let plain = vec![w.word("describe"), w.word("the"), w.word("image")];
        let err = reject_instruction(&w, &plain, &EntityMask::default(), InstructionStrategy::Edit, 0);
        assert!(matches!(err, Err(EmpoError::Strategy(_))));
    }

    #[test]
    fn ranked_pair_tie_returns_second_flagged() {
        let w = world();
        let scene = generate_scene(&w, 12);
        let y = caption(&w, &scene.entities()).tokens;
        let mut y2 = y.clone();
        y2.push(y[0]);
        let (out, degenerate) = rank_pair(&w, &scene, &y, &y.clone());
        assert!(degenerate);
        assert_eq!(out, y);
        let bad = caption(&w, &[most_likely_absent(&w, &scene, &scene.entities())]).tokens;
        let (out, degenerate) = rank_pair(&w, &scene, &y, &bad);
        assert!(!degenerate);
        assert_eq!(out, bad);
    }

    #[test]
    fn corrupted_generation_mentions_absent_entity() {
        let w = world();
        for seed in 0..300 {
            let scene = generate_scene(&w, seed);
            let y = caption(&w, &scene.entities()).tokens;
            let r = reject_response(&w, &scene, &[], &y, ResponseMode::CorruptedGeneration, seed);
            assert!(mentioned_entities(&w, &r.tokens).iter().any(|e| !scene.contains(*e)));
            assert_eq!(r.mask, EntityMask::of_sequence(&w, &r.tokens));
        }
    }
}
