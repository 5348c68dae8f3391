use std::path::Path;

use super::checkpoint::Checkpoint;
use crate::data::{PatchGrid, TokenId, World};
use crate::error::{EmpoError, Result};
use crate::model::{export_attention, AttentionRecord};

/// CSV with one row per output token: its name, then the weights on
/// `PATCH_0..PATCH_{n-1}` and on the instruction positions `Q_0..`.
/// Values use the shortest round-trip float format.
pub fn heatmap_csv(world: &World, record: &AttentionRecord, response: &[TokenId]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("token".to_string())
        .chain((0..record.num_patches).map(|p| format!("PATCH_{p}")))
        .chain((0..record.instruction_len).map(|i| format!("Q_{i}")));
    w.write_record(header).map_err(csv_error)?;
    for (row, &tok) in record.rows.iter().zip(response) {
        let fields = std::iter::once(world.token_name(tok)).chain(row.iter().map(f64::to_string));
        w.write_record(fields).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| EmpoError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_error(e: csv::Error) -> EmpoError {
    EmpoError::Io(e.into())
}

pub fn export_heatmap(
    checkpoint: &Path,
    world: &World,
    v: &PatchGrid,
    q: &[TokenId],
    y: &[TokenId],
) -> Result<(AttentionRecord, String)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let record = export_attention(&ckpt.policy, v, q, y)?;
    let csv = heatmap_csv(world, &record, y)?;
    Ok((record, csv))
}
