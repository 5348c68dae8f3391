//! Preference records across the three aspects, dataset assembly, and the
//! line-delimited JSON file format.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::negatives::{
    reject_image, reject_instruction, reject_response, EditGate, ImageStrategy, InstructionStrategy, ResponseMode,
    EDIT_GATE_THRESHOLD,
};
use super::scene::{generate_scene, render, PatchGrid};
use super::text::{build_instruction, caption, EntityMask};
use super::world::{TokenSeq, World, BACKGROUND};
use crate::error::{EmpoError, Result};
use crate::par::{map_indexed, Execution};
use crate::seed::derive_seed;

/// Attempts per record before it is skipped.
pub const MAX_ATTEMPTS: usize = 8;

impl Serialize for PatchGrid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.cells.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatchGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let cells = Vec::<usize>::deserialize(d)?;
        let side = (cells.len() as f64).sqrt().round() as usize;
        if side * side != cells.len() {
            return Err(D::Error::custom(format!("{} cells is not a square grid", cells.len())));
        }
        Ok(PatchGrid { side, cells })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMasks {
    pub v_w: EntityMask,
    pub v_l: EntityMask,
    pub q_w: EntityMask,
    pub q_l: EntityMask,
    pub y_w: EntityMask,
    pub y_l: EntityMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: ImageStrategy,
    pub instruction: InstructionStrategy,
    pub response: ResponseMode,
    /// Cells of `v_l` that differ from `v_w`.
    pub edited_cells: Vec<usize>,
    pub degenerate_response: bool,
    /// `y_w` has no entity tokens, so the weighted log-likelihood degenerates
    /// to a uniform `(1 − α)` scaling.
    pub empty_response_mask: bool,
    pub attempts: usize,
}

/// One training unit: chosen/rejected image, instruction and response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub v_w: PatchGrid,
    pub v_l: PatchGrid,
    pub q_w: TokenSeq,
    pub q_l: TokenSeq,
    pub y_w: TokenSeq,
    pub y_l: TokenSeq,
    pub masks: RecordMasks,
    pub provenance: Provenance,
    pub edit_verified: bool,
}

impl PreferenceRecord {
    /// Structural checks a loaded or generated record must pass.
    pub fn check_invariants(&self, world: &World) -> Result<()> {
        let cells = world.num_cells();
        if self.v_w.len() != cells || self.v_l.len() != cells {
            return Err(EmpoError::Load(format!("grids must have {cells} cells")));
        }
        let vocab = world.vocab_size();
        let seqs: [(&str, &[usize]); 6] = [
            ("v_w", &self.v_w.cells),
            ("v_l", &self.v_l.cells),
            ("q_w", &self.q_w),
            ("q_l", &self.q_l),
            ("y_w", &self.y_w),
            ("y_l", &self.y_l),
        ];
        for (name, s) in seqs {
            if let Some(t) = s.iter().find(|&&t| t >= vocab) {
                return Err(EmpoError::Load(format!("{name} token {t} outside vocabulary {vocab}")));
            }
        }
        let m = &self.masks;
        let pairs = [
            ("v_w", &m.v_w, &self.v_w.cells),
            ("v_l", &m.v_l, &self.v_l.cells),
            ("q_w", &m.q_w, &self.q_w),
            ("q_l", &m.q_l, &self.q_l),
            ("y_w", &m.y_w, &self.y_w),
            ("y_l", &m.y_l, &self.y_l),
        ];
        for (name, mask, seq) in pairs {
            mask.check_bounds(seq.len())?;
            let is_grid = name.starts_with('v');
            for &p in mask.positions() {
                let ok = if is_grid {
                    world.token_entity(seq[p]).is_some()
                } else {
                    world.is_span_token(seq[p])
                };
                if !ok {
                    return Err(EmpoError::Load(format!(
                        "{name} mask position {p} is not an entity span"
                    )));
                }
            }
        }
        let differing: Vec<usize> = (0..cells).filter(|&c| self.v_w.cells[c] != self.v_l.cells[c]).collect();
        if matches!(self.provenance.image, ImageStrategy::Delete | ImageStrategy::Replace)
            && differing != self.provenance.edited_cells
        {
            return Err(EmpoError::Load(
                "v_l differs from v_w outside the recorded edits".into(),
            ));
        }
        if self.provenance.instruction == InstructionStrategy::Edit {
            let same_skeleton = self.q_w.len() == self.q_l.len()
                && (0..self.q_w.len()).all(|i| {
                    m.q_w.contains(i) && world.kind(self.q_w[i]) == world.kind(self.q_l[i])
                        || self.q_w[i] == self.q_l[i]
                });
            if !same_skeleton {
                return Err(EmpoError::Load("edited instruction changed its skeleton".into()));
            }
        }
        Ok(())
    }
}

/// Relative weights per strategy for each aspect. Counts are allocated
/// exactly by largest remainder, then shuffled over record indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMix {
    pub image: BTreeMap<ImageStrategy, u32>,
    pub instruction: BTreeMap<InstructionStrategy, u32>,
    pub response: BTreeMap<ResponseMode, u32>,
}

impl Default for StrategyMix {
    fn default() -> Self {
        Self {
            image: [(ImageStrategy::Delete, 1), (ImageStrategy::Replace, 1)].into(),
            instruction: [(InstructionStrategy::Edit, 1)].into(),
            response: [(ResponseMode::CorruptedGeneration, 1)].into(),
        }
    }
}

impl StrategyMix {
    pub fn single_image(strategy: ImageStrategy) -> Self {
        Self {
            image: [(strategy, 1)].into(),
            ..Self::default()
        }
    }
}

/// Largest-remainder allocation of `n` items over `weights`, ties to the
/// earlier entry.
pub fn allocate_counts(weights: &[u32], n: usize) -> Result<Vec<usize>> {
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total == 0 {
        return Err(EmpoError::Config("strategy mix has zero total weight".into()));
    }
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|&w| (w as u64 * n as u64 / total) as usize)
        .collect();
    let mut rem: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((w as u64 * n as u64) % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        counts[i] += 1;
    }
    Ok(counts)
}

fn assign<T: Copy>(mix: &BTreeMap<T, u32>, n: usize, seed: u64) -> Result<Vec<T>> {
    let keys: Vec<T> = mix.keys().copied().collect();
    let weights: Vec<u32> = mix.values().copied().collect();
    let counts = allocate_counts(&weights, n)?;
    let mut labels: Vec<T> = keys
        .iter()
        .zip(counts)
        .flat_map(|(&k, c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub requested: usize,
    /// Record indices dropped after exhausting their attempts.
    pub skipped: Vec<usize>,
    pub total_attempts: usize,
    pub empty_mask_records: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<PreferenceRecord>,
    pub report: BuildReport,
}

fn build_record(
    world: &World,
    gate: &EditGate,
    seed: u64,
    image: ImageStrategy,
    instruction: InstructionStrategy,
    response: ResponseMode,
    attempt: usize,
) -> Result<PreferenceRecord> {
    let sub = |k: u64| derive_seed(seed, k, 0);
    let scene = generate_scene(world, sub(1));
    let v_w = render(world, &scene);
    let mask_vw = EntityMask::new(v_w.entity_cells(world));
    let mut rng = ChaCha8Rng::seed_from_u64(sub(2));
    let q_w = build_instruction(world, &scene, &mut rng);
    let y_w = caption(world, &scene.entities());

    let edit = reject_image(world, &v_w, &mask_vw, image, sub(3))?;
    let verdict = gate.verify_edit(&v_w, &edit.grid, &edit.edits);
    let q_l = reject_instruction(world, &q_w.tokens, &q_w.mask, instruction, sub(4))?;
    let y_l = reject_response(world, &scene, &q_w.tokens, &y_w.tokens, response, sub(5));

    let mask_vl = EntityMask::new(edit.grid.entity_cells(world));
    debug_assert!(edit
        .grid
        .cells
        .iter()
        .all(|&t| t == BACKGROUND || world.token_entity(t).is_some()));
    Ok(PreferenceRecord {
        masks: RecordMasks {
            v_w: mask_vw,
            v_l: mask_vl,
            q_w: q_w.mask,
            q_l: q_l.mask,
            y_w: y_w.mask.clone(),
            y_l: y_l.mask,
        },
        provenance: Provenance {
            image,
            instruction,
            response,
            edited_cells: edit.edits.iter().map(|e| e.cell).collect(),
            degenerate_response: y_l.degenerate,
            empty_response_mask: y_w.mask.is_empty(),
            attempts: attempt + 1,
        },
        edit_verified: verdict.passes(EDIT_GATE_THRESHOLD),
        v_w,
        v_l: edit.grid,
        q_w: q_w.tokens,
        q_l: q_l.tokens,
        y_w: y_w.tokens,
        y_l: y_l.tokens,
    })
}

fn check_diversity(world: &World, mix: &StrategyMix) -> Result<()> {
    let needs_peer = mix.image.get(&ImageStrategy::Replace).is_some_and(|&w| w > 0)
        || mix.instruction.get(&InstructionStrategy::Edit).is_some_and(|&w| w > 0);
    if needs_peer {
        if let Some(e) = world.entities().find(|&e| world.category_peers(e).is_empty()) {
            return Err(EmpoError::Config(format!(
                "entity {} has no same-category alternative; Replace/Edit need one",
                world.entity_name(e)
            )));
        }
    }
    if world.catalog.max_entities >= world.num_entities() {
        return Err(EmpoError::Config(
            "catalog too small: scenes could contain every entity".into(),
        ));
    }
    Ok(())
}

/// Builds `n` records as a pure function of `(n, seed, mix)`.
pub fn build_dataset(world: &World, n: usize, seed: u64, mix: &StrategyMix, exec: Execution) -> Result<Dataset> {
    if n == 0 {
        return Err(EmpoError::Input("dataset size must be positive".into()));
    }
    check_diversity(world, mix)?;
    let images = assign(&mix.image, n, derive_seed(seed, u64::MAX, 1))?;
    let instructions = assign(&mix.instruction, n, derive_seed(seed, u64::MAX, 2))?;
    let responses = assign(&mix.response, n, derive_seed(seed, u64::MAX, 3))?;
    let gate = EditGate::new(world);

    let built: Vec<Result<(Option<PreferenceRecord>, usize)>> = map_indexed(exec, n, |i| {
        for attempt in 0..MAX_ATTEMPTS {
            let rec_seed = derive_seed(seed, i as u64, attempt as u64);
            let rec = build_record(
                world,
                &gate,
                rec_seed,
                images[i],
                instructions[i],
                responses[i],
                attempt,
            )?;
            if rec.edit_verified {
                return Ok((Some(rec), attempt + 1));
            }
        }
        Ok((None, MAX_ATTEMPTS))
    });

    let mut records = Vec::with_capacity(n);
    let mut report = BuildReport {
        requested: n,
        skipped: Vec::new(),
        total_attempts: 0,
        empty_mask_records: 0,
    };
    for (i, b) in built.into_iter().enumerate() {
        let (rec, attempts) = b?;
        report.total_attempts += attempts;
        match rec {
            Some(r) => {
                report.empty_mask_records += r.provenance.empty_response_mask as usize;
                records.push(r);
            }
            None => report.skipped.push(i),
        }
    }
    Ok(Dataset { records, report })
}

pub fn to_jsonl(records: &[PreferenceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a dataset file against `world`.
pub fn read_jsonl(path: &Path, world: &World) -> Result<Vec<PreferenceRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| EmpoError::Load(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord =
            serde_json::from_str(&line).map_err(|e| EmpoError::Load(format!("line {}: {e}", lineno + 1)))?;
        rec.check_invariants(world)
            .map_err(|e| EmpoError::Load(format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(EmpoError::Load(format!("dataset {} is empty", path.display())));
    }
    Ok(records)
}
