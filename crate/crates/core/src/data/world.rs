//! Entity catalog and the token vocabulary derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{EmpoError, Result};

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub name: String,
    pub category: String,
}

/// Everything the synthetic world is generated from. Loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub categories: Vec<String>,
    pub entities: Vec<EntitySpec>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
    /// Plain template words. Must contain `a`, `,`, `.`, `is`, `there`, `?`.
    pub words: Vec<String>,
    /// Symmetric co-occurrence weights; `cooccurrence[a][b]` is the relative
    /// weight of drawing `b` into a scene anchored on `a`. Diagonal unused.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Instruction templates over `words` with `{ENT}`, `{ATTR}`, `{REL}` slots.
    pub instruction_templates: Vec<String>,
    pub grid_side: usize,
    pub min_entities: usize,
    pub max_entities: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Special,
    Word,
    Entity,
    Attribute,
    Relation,
}

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const BACKGROUND: TokenId = 3;
pub const YES: TokenId = 4;
pub const NO: TokenId = 5;
const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<bg>", "yes", "no"];

const STRONG: f64 = 12.0;
const MEDIUM: f64 = 5.0;
const WEAK: f64 = 1.0;

impl Default for Catalog {
    fn default() -> Self {
        let spec = |name: &str, category: &str| EntitySpec {
            name: name.into(),
            category: category.into(),
        };
        let entities = vec![
            spec("car", "vehicle"),
            spec("bus", "vehicle"),
            spec("bicycle", "vehicle"),
            spec("boat", "vehicle"),
            spec("dog", "animal"),
            spec("cat", "animal"),
            spec("bird", "animal"),
            spec("horse", "animal"),
            spec("table", "furniture"),
            spec("chair", "furniture"),
            spec("bench", "furniture"),
            spec("sofa", "furniture"),
            spec("cup", "object"),
            spec("pizza", "object"),
            spec("umbrella", "object"),
            spec("kite", "object"),
            spec("road", "scenery"),
            spec("tree", "scenery"),
            spec("water", "scenery"),
            spec("grass", "scenery"),
        ];
        let idx = |name: &str| entities.iter().position(|e| e.name == name).unwrap();
        let n = entities.len();
        let mut cooc = vec![vec![WEAK; n]; n];
        let pairs = [
            ("car", "road", STRONG),
            ("bus", "road", MEDIUM),
            ("bicycle", "road", MEDIUM),
            ("boat", "water", STRONG),
            ("umbrella", "water", MEDIUM),
            ("dog", "grass", STRONG),
            ("kite", "grass", MEDIUM),
            ("horse", "grass", MEDIUM),
            ("cat", "sofa", STRONG),
            ("table", "chair", STRONG),
            ("pizza", "table", STRONG),
            ("cup", "table", MEDIUM),
            ("bird", "tree", STRONG),
            ("bench", "tree", MEDIUM),
            ("car", "bus", MEDIUM),
            ("dog", "cat", MEDIUM),
            ("chair", "sofa", MEDIUM),
        ];
        for (a, b, w) in pairs {
            let (i, j) = (idx(a), idx(b));
            cooc[i][j] = w;
            cooc[j][i] = w;
        }
        for (i, row) in cooc.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let words = [
            "a",
            "the",
            ",",
            ".",
            "?",
            "and",
            "describe",
            "image",
            "its",
            "surroundings",
            "what",
            "is",
            "list",
            "everything",
            "in",
            "with",
            "there",
        ];
        Catalog {
            categories: ["vehicle", "animal", "furniture", "object", "scenery"]
                .map(String::from)
                .to_vec(),
            entities,
            attributes: ["red", "blue", "green", "white"].map(String::from).to_vec(),
            relations: ["near", "behind", "beside"].map(String::from).to_vec(),
            words: words.map(String::from).to_vec(),
            cooccurrence: cooc,
            instruction_templates: vec![
                "describe the {ATTR} {ENT} and its surroundings".into(),
                "what is {REL} the {ENT} ?".into(),
                "list everything in the image with the {ENT}".into(),
            ],
            grid_side: 4,
            min_entities: 2,
            max_entities: 5,
        }
    }
}

/// A catalog together with its token layout:
/// specials, then words, entities, attributes, relations.
#[derive(Debug, Clone)]
pub struct World {
    pub catalog: Catalog,
    words: Vec<String>,
    word_base: usize,
    entity_base: usize,
    attribute_base: usize,
    relation_base: usize,
    vocab_size: usize,
    entity_category: Vec<usize>,
}

impl World {
    pub fn new(catalog: Catalog) -> Result<Self> {
        let n = catalog.entities.len();
        if n < 2 {
            return Err(EmpoError::Config("catalog needs at least two entities".into()));
        }
        if catalog.cooccurrence.len() != n || catalog.cooccurrence.iter().any(|r| r.len() != n) {
            return Err(EmpoError::Config(format!("co-occurrence matrix must be {n}x{n}")));
        }
        if catalog
            .cooccurrence
            .iter()
            .flatten()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(EmpoError::Config(
                "co-occurrence weights must be finite and >= 0".into(),
            ));
        }
        if catalog.min_entities == 0 || catalog.min_entities > catalog.max_entities {
            return Err(EmpoError::Config("entity count bounds are inverted or zero".into()));
        }
        let cells = catalog.grid_side * catalog.grid_side;
        if catalog.max_entities > cells || catalog.max_entities > n {
            return Err(EmpoError::Config(format!(
                "max_entities {} exceeds grid cells {cells} or catalog size {n}",
                catalog.max_entities
            )));
        }
        let entity_category = catalog
            .entities
            .iter()
            .map(|e| {
                catalog
                    .categories
                    .iter()
                    .position(|c| *c == e.category)
                    .ok_or_else(|| EmpoError::Config(format!("unknown category {}", e.category)))
            })
            .collect::<Result<Vec<_>>>()?;
        for required in ["a", ",", ".", "is", "there", "?"] {
            if !catalog.words.iter().any(|w| w == required) {
                return Err(EmpoError::Config(format!("template word {required:?} missing")));
            }
        }
        if catalog.attributes.len() < 2 || catalog.relations.len() < 2 {
            return Err(EmpoError::Config(
                "need at least two attributes and two relations".into(),
            ));
        }
        let word_base = SPECIALS.len();
        let entity_base = word_base + catalog.words.len();
        let attribute_base = entity_base + n;
        let relation_base = attribute_base + catalog.attributes.len();
        let vocab_size = relation_base + catalog.relations.len();
        let world = World {
            words: catalog.words.clone(),
            catalog,
            word_base,
            entity_base,
            attribute_base,
            relation_base,
            vocab_size,
            entity_category,
        };
        for t in &world.catalog.instruction_templates {
            world.parse_template(t)?;
        }
        Ok(world)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_entities(&self) -> usize {
        self.catalog.entities.len()
    }

    pub fn num_cells(&self) -> usize {
        self.catalog.grid_side * self.catalog.grid_side
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities()).map(EntityId)
    }

    pub fn entity_token(&self, e: EntityId) -> TokenId {
        self.entity_base + e.0
    }

    pub fn attribute_token(&self, a: usize) -> TokenId {
        self.attribute_base + a
    }

    pub fn relation_token(&self, r: usize) -> TokenId {
        self.relation_base + r
    }

    pub fn word(&self, w: &str) -> TokenId {
        self.words
            .iter()
            .position(|x| x == w)
            .map(|i| self.word_base + i)
            .unwrap_or_else(|| panic!("word {w:?} not in catalog"))
    }

    pub fn kind(&self, t: TokenId) -> Option<TokenKind> {
        if t < self.word_base {
            Some(TokenKind::Special)
        } else if t < self.entity_base {
            Some(TokenKind::Word)
        } else if t < self.attribute_base {
            Some(TokenKind::Entity)
        } else if t < self.relation_base {
            Some(TokenKind::Attribute)
        } else if t < self.vocab_size {
            Some(TokenKind::Relation)
        } else {
            None
        }
    }

    /// Entity/attribute/relation tokens form entity spans.
    pub fn is_span_token(&self, t: TokenId) -> bool {
        matches!(
            self.kind(t),
            Some(TokenKind::Entity | TokenKind::Attribute | TokenKind::Relation)
        )
    }

    pub fn token_entity(&self, t: TokenId) -> Option<EntityId> {
        (self.kind(t) == Some(TokenKind::Entity)).then(|| EntityId(t - self.entity_base))
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.catalog.entities[e.0].name
    }

    pub fn category(&self, e: EntityId) -> usize {
        self.entity_category[e.0]
    }

    pub fn cooccurrence(&self, a: EntityId, b: EntityId) -> f64 {
        self.catalog.cooccurrence[a.0][b.0]
    }

    /// Highest-co-occurrence different entity of the same category, ties by
    /// lowest id. `None` when the category has a single member.
    pub fn replacement(&self, e: EntityId) -> Option<EntityId> {
        let cat = self.category(e);
        let mut best: Option<(EntityId, f64)> = None;
        for b in self.entities() {
            if b == e || self.category(b) != cat {
                continue;
            }
            let w = self.cooccurrence(e, b);
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((b, w));
            }
        }
        best.map(|(b, _)| b)
    }

    /// Same-category alternatives to `e`, in id order.
    pub fn category_peers(&self, e: EntityId) -> Vec<EntityId> {
        let cat = self.category(e);
        self.entities().filter(|&b| b != e && self.category(b) == cat).collect()
    }

    /// Human-readable rendering of a token sequence.
    pub fn detokenize(&self, seq: &[TokenId]) -> String {
        seq.iter().map(|&t| self.token_name(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn token_name(&self, t: TokenId) -> String {
        match self.kind(t) {
            Some(TokenKind::Special) => SPECIALS[t].to_string(),
            Some(TokenKind::Word) => self.words[t - self.word_base].clone(),
            Some(TokenKind::Entity) => self.catalog.entities[t - self.entity_base].name.clone(),
            Some(TokenKind::Attribute) => self.catalog.attributes[t - self.attribute_base].clone(),
            Some(TokenKind::Relation) => self.catalog.relations[t - self.relation_base].clone(),
            None => format!("<unk:{t}>"),
        }
    }

    pub(crate) fn parse_template(&self, template: &str) -> Result<Vec<TemplatePiece>> {
        template
            .split_whitespace()
            .map(|w| match w {
                "{ENT}" => Ok(TemplatePiece::Entity),
                "{ATTR}" => Ok(TemplatePiece::Attribute),
                "{REL}" => Ok(TemplatePiece::Relation),
                other => self
                    .words
                    .iter()
                    .position(|x| x == other)
                    .map(|i| TemplatePiece::Word(self.word_base + i))
                    .ok_or_else(|| EmpoError::Config(format!("template word {other:?} not in catalog"))),
            })
            .collect::<Result<Vec<_>>>()
            .and_then(|pieces| {
                if pieces.contains(&TemplatePiece::Entity) {
                    Ok(pieces)
                } else {
                    Err(EmpoError::Config(format!("template {template:?} has no {{ENT}} slot")))
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TemplatePiece {
    Word(TokenId),
    Entity,
    Attribute,
    Relation,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_is_valid_and_fits_default_vocab() {
        let w = World::new(Catalog::default()).unwrap();
        assert!(w.vocab_size() <= 128);
        assert_eq!(w.num_cells(), 16);
        for e in w.entities() {
            assert!(w.replacement(e).is_some());
            assert_eq!(w.token_entity(w.entity_token(e)), Some(e));
        }
    }

    #[test]
    fn token_kinds_partition_vocab() {
        let w = World::new(Catalog::default()).unwrap();
        assert_eq!(w.kind(BACKGROUND), Some(TokenKind::Special));
        assert_eq!(w.kind(w.word("a")), Some(TokenKind::Word));
        assert_eq!(w.kind(w.attribute_token(0)), Some(TokenKind::Attribute));
        assert_eq!(w.kind(w.relation_token(1)), Some(TokenKind::Relation));
        assert_eq!(w.kind(w.vocab_size()), None);
        assert!(!w.is_span_token(w.word("the")));
    }

    #[test]
    fn replacement_is_category_argmax() {
        let w = World::new(Catalog::default()).unwrap();
        let id = |n: &str| EntityId(w.catalog.entities.iter().position(|e| e.name == n).unwrap());
        // car-bus is the only non-weak vehicle pair.
        assert_eq!(w.replacement(id("car")), Some(id("bus")));
        // bicycle has equal weights to all vehicles: lowest id wins.
        assert_eq!(w.replacement(id("bicycle")), Some(id("car")));
    }

    #[test]
    fn rejects_bad_catalogs() {
        let mut c = Catalog::default();
        c.cooccurrence.pop();
        assert!(matches!(World::new(c), Err(EmpoError::Config(_))));
        let mut c = Catalog::default();
        c.instruction_templates.push("describe the image".into());
        assert!(World::new(c).is_err());
        let c = Catalog {
            max_entities: 30,
            ..Catalog::default()
        };
        assert!(World::new(c).is_err());
    }

    #[test]
    fn catalog_json_roundtrip() {
        let c = Catalog::default();
        let text = serde_json::to_string(&c).unwrap();
        let w = World::from_json(&text).unwrap();
        assert_eq!(w.catalog, c);
    }
}
