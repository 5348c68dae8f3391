use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{load_or_build_records, prepare_seed, run_dir, train_preference, write_run, RunRecord, SeedInputs};
use crate::data::{write_jsonl, ImageStrategy, PreferenceRecord, StrategyMix, World};
use crate::error::{EmpoError, Result};
use crate::losses::Terms;
use crate::metrics::MetricsReport;
use crate::par::map_indexed;

/// One grid point: a change to the loss and optionally to the rejected-image
/// strategy used to build its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub terms: Terms,
    pub weighting: bool,
    pub alpha: Option<f64>,
    pub image_strategy: Option<ImageStrategy>,
}

impl Variant {
    fn new(name: &str, terms: Terms, weighting: bool) -> Self {
        Self {
            name: name.to_string(),
            terms,
            weighting,
            alpha: None,
            image_strategy: None,
        }
    }

    pub fn empo() -> Self {
        Self::new("empo", Terms::ALL, true)
    }

    /// Response term only, unweighted: plain DPO.
    pub fn dpo() -> Self {
        Self::new("dpo", Terms::RESPONSE_ONLY, false)
    }

    pub fn without_image() -> Self {
        Self::new(
            "w/o image",
            Terms {
                image: false,
                ..Terms::ALL
            },
            true,
        )
    }

    pub fn without_instruction() -> Self {
        Self::new(
            "w/o instruction",
            Terms {
                instruction: false,
                ..Terms::ALL
            },
            true,
        )
    }

    pub fn without_response() -> Self {
        Self::new(
            "w/o response",
            Terms {
                response: false,
                ..Terms::ALL
            },
            true,
        )
    }

    pub fn without_weighting() -> Self {
        Self::new("w/o weighting", Terms::ALL, false)
    }

    pub fn image_strategy(s: ImageStrategy) -> Self {
        let name = serde_json::to_value(s)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Self {
            image_strategy: Some(s),
            ..Self::new(&format!("image={name}"), Terms::ALL, true)
        }
    }

    pub fn alpha(a: f64) -> Self {
        Self {
            alpha: Some(a),
            ..Self::new(&format!("alpha={a}"), Terms::ALL, true)
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.loss.enabled_terms = self.terms;
        cfg.loss.weighting_enabled = self.weighting;
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if let Some(s) = self.image_strategy {
            cfg.data.mix = StrategyMix::single_image(s);
        }
        cfg
    }
}

/// Full model plus one row per removed component.
pub fn component_grid() -> Vec<Variant> {
    vec![
        Variant::empo(),
        Variant::without_image(),
        Variant::without_instruction(),
        Variant::without_response(),
        Variant::without_weighting(),
    ]
}

pub fn strategy_grid() -> Vec<Variant> {
    [
        ImageStrategy::Delete,
        ImageStrategy::Replace,
        ImageStrategy::Crop,
        ImageStrategy::Noise,
        ImageStrategy::Random,
    ]
    .into_iter()
    .map(Variant::image_strategy)
    .collect()
}

pub fn alpha_grid(values: &[f64]) -> Vec<Variant> {
    values.iter().map(|&a| Variant::alpha(a)).collect()
}

pub fn named_grid(name: &str) -> Result<Vec<Variant>> {
    match name {
        "components" => Ok(component_grid()),
        "strategies" => Ok(strategy_grid()),
        "alpha" => Ok(alpha_grid(&[0.0, 0.3, 0.5, 0.7, 0.9])),
        "directional" => {
            let mut g = component_grid();
            g.insert(1, Variant::dpo());
            Ok(g)
        }
        other => Err(EmpoError::Config(format!(
            "unknown grid `{other}` (components, strategies, alpha, directional)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub chair_s: f64,
    pub chair_i: f64,
    pub accuracy: f64,
    pub f1: f64,
}

pub const UNTRAINED: &str = "untrained";

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub base: Vec<(u64, MetricsReport)>,
    pub records: Vec<RunRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl From<&RunRecord> for AblationRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            variant: r.variant.clone(),
            seed: r.seed,
            chair_s: r.final_metrics.chair_s,
            chair_i: r.final_metrics.chair_i,
            accuracy: r.final_metrics.accuracy,
            f1: r.final_metrics.f1,
            final_loss: r.steps.last().map_or(f64::NAN, |s| s.loss.total),
        }
    }
}

impl AblationResult {
    /// Rows in record order; the untrained base is taken once per seed.
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let mut base: Vec<(u64, MetricsReport)> = Vec::new();
        for r in &records {
            if !base.iter().any(|(s, _)| *s == r.seed) {
                base.push((r.seed, r.base_metrics));
            }
        }
        Self {
            rows: records.iter().map(AblationRow::from).collect(),
            base,
            records,
        }
    }

    /// Medians per grid point in grid order, then the untrained base.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<(String, Vec<[f64; 4]>)> = Vec::new();
        for r in &self.rows {
            let m = [r.chair_s, r.chair_i, r.accuracy, r.f1];
            match groups.iter_mut().find(|(n, _)| *n == r.variant) {
                Some((_, v)) => v.push(m),
                None => groups.push((r.variant.clone(), vec![m])),
            }
        }
        let base: Vec<[f64; 4]> = self
            .base
            .iter()
            .map(|(_, m)| [m.chair_s, m.chair_i, m.accuracy, m.f1])
            .collect();
        groups.push((UNTRAINED.to_string(), base));
        groups
            .into_iter()
            .map(|(variant, ms)| {
                let col = |k: usize| median(&ms.iter().map(|m| m[k]).collect::<Vec<_>>());
                SummaryRow {
                    variant,
                    seeds: ms.len(),
                    chair_s: col(0),
                    chair_i: col(1),
                    accuracy: col(2),
                    f1: col(3),
                }
            })
            .collect()
    }

    pub fn median_chair_i(&self, variant: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|r| r.variant == variant)
            .map(|r| r.chair_i)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("ablation.csv"), &self.rows)?;
        write_rows(&dir.join("summary.csv"), &self.summary())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EmpoError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| EmpoError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every grid point for every seed. Per seed, the records and the
/// warm-started base are built once and shared by all grid points that use
/// the configured strategy mix; a grid point with its own image strategy
/// gets its own record file.
pub fn ablate(cfg: &RunConfig, world: &World, grid: &[Variant]) -> Result<AblationResult> {
    if grid.is_empty() {
        return Err(EmpoError::Config("ablation grid is empty".into()));
    }
    cfg.validate()?;
    let exec = cfg.execution();
    let seeds = &cfg.seeds;
    let inputs: Vec<SeedInputs> = map_indexed(exec, seeds.len(), |k| prepare_seed(cfg, world, seeds[k]))
        .into_iter()
        .collect::<Result<_>>()?;

    let data_dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    // Record sets keyed by (seed index, image strategy override).
    let mut record_sets: BTreeMap<(usize, Option<ImageStrategy>), Vec<PreferenceRecord>> = BTreeMap::new();
    for (k, inp) in inputs.iter().enumerate() {
        write_jsonl(&data_dir.join(format!("seed{}.jsonl", inp.seed)), &inp.records)?;
        for v in grid.iter().filter(|v| v.image_strategy.is_some()) {
            let key = (k, v.image_strategy);
            if record_sets.contains_key(&key) || cfg.data.path.is_some() {
                continue;
            }
            let vcfg = v.apply(cfg);
            let records = load_or_build_records(&vcfg, world, inp.seed, &vcfg.data.mix)?;
            write_jsonl(
                &data_dir.join(format!("seed{}_{}.jsonl", inp.seed, v.name.replace('=', "_"))),
                &records,
            )?;
            record_sets.insert(key, records);
        }
    }

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..inputs.len()).map(move |k| (g, k)))
        .collect();
    let results = map_indexed(exec, jobs.len(), |j| {
        let (g, k) = jobs[j];
        let variant = &grid[g];
        let vcfg = variant.apply(cfg);
        let inp = &inputs[k];
        let records = record_sets.get(&(k, variant.image_strategy)).unwrap_or(&inp.records);
        let (record, ckpt) = train_preference(&vcfg, &variant.name, inp, records, world, None, None)?;
        write_run(&run_dir(cfg, &variant.name, inp.seed), &record, &ckpt)?;
        Ok(record)
    });
    let records: Vec<RunRecord> = results.into_iter().collect::<Result<_>>()?;
    let result = AblationResult::from_records(records);
    result.write_csv(&cfg.out_dir)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn grids() {
        assert_eq!(component_grid().len(), 5);
        assert_eq!(named_grid("directional").unwrap()[1], Variant::dpo());
        assert!(named_grid("nope").is_err());
        let cfg = Variant::alpha(0.3).apply(&RunConfig::default());
        assert_eq!(cfg.loss.alpha, 0.3);
        let cfg = Variant::image_strategy(ImageStrategy::Crop).apply(&RunConfig::default());
        assert_eq!(cfg.data.mix, StrategyMix::single_image(ImageStrategy::Crop));
        assert_eq!(Variant::image_strategy(ImageStrategy::Crop).name, "image=crop");
        let dpo = Variant::dpo().apply(&RunConfig::default());
        assert!(!dpo.loss.weighting_enabled && !dpo.loss.enabled_terms.image);
    }
}
