//! Rule-based instructions, captions and yes/no questions over the token world.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::world::{EntityId, TemplatePiece, TokenId, TokenSeq, World, EOS};
use crate::error::{EmpoError, Result};

/// Sorted, distinct positions of entity-span tokens within one sequence or grid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityMask(Vec<usize>);

impl EntityMask {
    pub fn new(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self(positions)
    }

    /// Positions of every span token in `seq`.
    pub fn of_sequence(world: &World, seq: &[TokenId]) -> Self {
        Self((0..seq.len()).filter(|&i| world.is_span_token(seq[i])).collect())
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.0.binary_search(&pos).is_ok()
    }

    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.0.iter().find(|&&p| p >= len) {
            Some(p) => Err(EmpoError::Input(format!("mask position {p} outside length {len}"))),
            None if self.0.windows(2).any(|w| w[0] >= w[1]) => {
                Err(EmpoError::Input("mask positions must be distinct and sorted".into()))
            }
            None => Ok(()),
        }
    }

    /// Per-position indicator vector of length `len`.
    pub fn indicator(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        for &p in &self.0 {
            v[p] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: TokenSeq,
    pub mask: EntityMask,
}

/// Fills a random template about a random entity of `scene`.
pub fn build_instruction(world: &World, scene: &Scene, rng: &mut impl Rng) -> Instruction {
    let templates = &world.catalog.instruction_templates;
    let template = &templates[rng.gen_range(0..templates.len())];
    let pieces = world.parse_template(template).expect("templates validated at load");
    let fact = scene.facts()[rng.gen_range(0..scene.facts().len())];
    let relation = scene
        .relations()
        .iter()
        .find(|r| r.subject == fact.entity)
        .map(|r| r.relation)
        .unwrap_or_else(|| rng.gen_range(0..world.catalog.relations.len()));
    let mut tokens = Vec::with_capacity(pieces.len());
    let mut mask = Vec::new();
    for p in pieces {
        let t = match p {
            TemplatePiece::Word(t) => t,
            TemplatePiece::Entity => world.entity_token(fact.entity),
            TemplatePiece::Attribute => world.attribute_token(fact.attribute),
            TemplatePiece::Relation => world.relation_token(relation),
        };
        if !matches!(p, TemplatePiece::Word(_)) {
            mask.push(tokens.len());
        }
        tokens.push(t);
    }
    Instruction {
        tokens,
        mask: EntityMask(mask),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: TokenSeq,
    pub mask: EntityMask,
}

/// `a E1 , a E2 , … a En . <eos>`
pub fn caption(world: &World, entities: &[EntityId]) -> Caption {
    let (a, comma, stop) = (world.word("a"), world.word(","), world.word("."));
    let mut tokens = Vec::with_capacity(3 * entities.len() + 2);
    let mut mask = Vec::with_capacity(entities.len());
    for (i, &e) in entities.iter().enumerate() {
        if i > 0 {
            tokens.push(comma);
        }
        tokens.push(a);
        mask.push(tokens.len());
        tokens.push(world.entity_token(e));
    }
    tokens.push(stop);
    tokens.push(EOS);
    Caption {
        tokens,
        mask: EntityMask(mask),
    }
}

/// Entity mentions of a response, in order.
pub fn mentioned_entities(world: &World, seq: &[TokenId]) -> Vec<EntityId> {
    seq.iter().filter_map(|&t| world.token_entity(t)).collect()
}

/// `is there a E ?`
pub fn yes_no_question(world: &World, e: EntityId) -> TokenSeq {
    vec![
        world.word("is"),
        world.word("there"),
        world.word("a"),
        world.entity_token(e),
        world.word("?"),
    ]
}
