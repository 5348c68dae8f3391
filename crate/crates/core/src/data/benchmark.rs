//! Held-out evaluation scenes with instructions and yes/no probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::negatives::most_likely_absent;
use super::scene::{generate_scene, render, PatchGrid, Scene};
use super::text::{build_instruction, yes_no_question};
use super::world::{EntityId, TokenSeq, World};
use crate::seed::derive_seed;

const HELD_OUT_STREAM: u64 = 0x6e76_616c;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub tokens: TokenSeq,
    pub entity: EntityId,
    pub gold_yes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub scene: Scene,
    pub grid: PatchGrid,
    pub instruction: TokenSeq,
    pub probes: Vec<Probe>,
}

/// Two present entities, the most tempting absent entity, and one random
/// absent entity per scene.
pub fn probes_for(world: &World, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let mut present = scene.entities();
    present.shuffle(rng);
    let mut probes: Vec<Probe> = present
        .iter()
        .take(2)
        .map(|&e| Probe {
            tokens: yes_no_question(world, e),
            entity: e,
            gold_yes: true,
        })
        .collect();
    let tempting = most_likely_absent(world, scene, &scene.entities());
    let mut others: Vec<EntityId> = world
        .entities()
        .filter(|&e| !scene.contains(e) && e != tempting)
        .collect();
    others.shuffle(rng);
    for e in std::iter::once(tempting).chain(others.into_iter().take(1)) {
        probes.push(Probe {
            tokens: yes_no_question(world, e),
            entity: e,
            gold_yes: false,
        });
    }
    probes
}

pub fn held_out(world: &World, n: usize, seed: u64) -> Vec<EvalItem> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(world, derive_seed(seed, i as u64, HELD_OUT_STREAM));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, HELD_OUT_STREAM + 1));
            let instruction = build_instruction(world, &scene, &mut rng).tokens;
            let probes = probes_for(world, &scene, &mut rng);
            EvalItem {
                grid: render(world, &scene),
                scene,
                instruction,
                probes,
            }
        })
        .collect()
}
