//! Deterministic synthetic world: scenes, patch-grid images, templated text,
//! and chosen/rejected preference records for all three aspects.

pub mod benchmark;
pub mod dataset;
pub mod negatives;
pub mod scene;
pub mod text;
pub mod world;

pub use dataset::{build_dataset, read_jsonl, write_jsonl, Dataset, PreferenceRecord, StrategyMix};
pub use negatives::{EditGate, ImageStrategy, InstructionStrategy, ResponseMode};
pub use scene::{generate_scene, render, PatchGrid, Scene};
pub use text::EntityMask;
pub use world::{Catalog, EntityId, TokenId, TokenSeq, World};
