use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{EntityId, TokenId, World, BACKGROUND};
use crate::error::{EmpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: EntityId,
    pub attribute: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFact {
    pub subject: EntityId,
    pub relation: usize,
    pub object: EntityId,
}

/// Ground truth for one synthetic image. Facts are kept in draw order, so
/// `facts[0]` is the anchor entity the rest were drawn around.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    facts: Vec<Fact>,
    relations: Vec<RelationFact>,
    pub seed: u64,
}

impl Scene {
    pub fn new(facts: Vec<Fact>, relations: Vec<RelationFact>, seed: u64) -> Result<Self> {
        let mut cells: Vec<usize> = facts.iter().map(|f| f.cell).collect();
        cells.sort_unstable();
        if cells.windows(2).any(|w| w[0] == w[1]) {
            return Err(EmpoError::Input("two entities share a grid cell".into()));
        }
        let known = |e: EntityId| facts.iter().any(|f| f.entity == e);
        if relations.iter().any(|r| !known(r.subject) || !known(r.object)) {
            return Err(EmpoError::Input(
                "relation references an entity not in the scene".into(),
            ));
        }
        Ok(Self { facts, relations, seed })
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn relations(&self) -> &[RelationFact] {
        &self.relations
    }

    pub fn entities(&self) -> Vec<EntityId> {
        self.facts.iter().map(|f| f.entity).collect()
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.facts.iter().any(|f| f.entity == e)
    }

    pub fn anchor(&self) -> Option<EntityId> {
        self.facts.first().map(|f| f.entity)
    }
}

/// The synthetic image: one patch token per grid cell, row-major.
/// Serialized as the bare cell array.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub side: usize,
    pub cells: Vec<TokenId>,
}

impl PatchGrid {
    pub fn background(side: usize) -> Self {
        Self {
            side,
            cells: vec![BACKGROUND; side * side],
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells holding an entity token.
    pub fn entity_cells(&self, world: &World) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&c| world.token_entity(self.cells[c]).is_some())
            .collect()
    }

    pub fn entity_multiset(&self, world: &World) -> Vec<EntityId> {
        let mut v: Vec<EntityId> = self.cells.iter().filter_map(|&t| world.token_entity(t)).collect();
        v.sort();
        v
    }

    pub fn hamming(&self, other: &PatchGrid) -> usize {
        self.cells.iter().zip(&other.cells).filter(|(a, b)| a != b).count()
    }
}

/// Draws a scene: entity count uniform in the catalog bounds, an anchor
/// uniform over entities, then the remaining entities without replacement
/// with probability proportional to their co-occurrence weight with the
/// anchor. Cells are distinct and uniform; attributes uniform; each
/// non-anchor entity gets one relation to the anchor.
pub fn generate_scene(world: &World, seed: u64) -> Scene {
    let cat = &world.catalog;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cat.min_entities..=cat.max_entities);
    let anchor = EntityId(rng.gen_range(0..world.num_entities()));
    let mut chosen = vec![anchor];
    while chosen.len() < n {
        let weights: Vec<f64> = world
            .entities()
            .map(|b| {
                if chosen.contains(&b) {
                    0.0
                } else {
                    world.cooccurrence(anchor, b)
                }
            })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => EntityId(dist.sample(&mut rng)),
            // All remaining weights are zero: fall back to uniform over the rest.
            Err(_) => {
                let rest: Vec<EntityId> = world.entities().filter(|b| !chosen.contains(b)).collect();
                rest[rng.gen_range(0..rest.len())]
            }
        };
        chosen.push(next);
    }
    let cells = sample(&mut rng, world.num_cells(), n).into_vec();
    let facts: Vec<Fact> = chosen
        .iter()
        .zip(cells)
        .map(|(&entity, cell)| Fact {
            entity,
            attribute: rng.gen_range(0..cat.attributes.len()),
            cell,
        })
        .collect();
    let relations = chosen[1..]
        .iter()
        .map(|&subject| RelationFact {
            subject,
            relation: rng.gen_range(0..cat.relations.len()),
            object: anchor,
        })
        .collect();
    Scene::new(facts, relations, seed).expect("generated scene is valid")
}

pub fn render(world: &World, scene: &Scene) -> PatchGrid {
    let mut grid = PatchGrid::background(world.catalog.grid_side);
    for f in scene.facts() {
        grid.cells[f.cell] = world.entity_token(f.entity);
    }
    grid
}
