//! Column-based reordering: every PTC cell writes the values it will hold in
//! ascending order, so each wire array only ever moves one way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::CellConfig;
use crate::deploy::{execute_layer, LayerSchedule, Matrix};
use crate::error::{Error, Result};

/// Per-cell step permutation of one PTC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtcPermutation {
    steps: usize,
    /// `source[cell * steps + m]` is the original step whose value the cell
    /// holds at step `m`.
    source: Vec<usize>,
}

impl PtcPermutation {
    pub fn identity(cells: usize, steps: usize) -> Self {
        PtcPermutation {
            steps,
            source: (0..cells).flat_map(|_| 0..steps).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.source.len().checked_div(self.steps).unwrap_or(0)
    }

    pub fn source(&self, cell: usize, step: usize) -> usize {
        self.source[cell * self.steps + step]
    }

    pub fn cell(&self, cell: usize) -> &[usize] {
        &self.source[cell * self.steps..(cell + 1) * self.steps]
    }

    pub fn is_identity(&self) -> bool {
        (0..self.cells()).all(|c| self.cell(c).iter().enumerate().all(|(m, &s)| m == s))
    }

    /// Reorders the cells, e.g. after the rows of the PTC were remapped.
    pub(crate) fn permute_cells(&self, new_to_old: &[usize]) -> Self {
        PtcPermutation {
            steps: self.steps,
            source: new_to_old
                .iter()
                .flat_map(|&c| self.cell(c).iter().copied())
                .collect(),
        }
    }
}

/// One permutation per PTC of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPermutations {
    pub ptcs: Vec<PtcPermutation>,
}

/// A schedule whose per-cell value sequences are sorted, together with the
/// permutations that route inputs back to the right blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorderedSchedule {
    pub schedule: LayerSchedule,
}

impl ReorderedSchedule {
    pub fn permutations(&self) -> Option<&CellPermutations> {
        self.schedule.cell_perms.as_ref()
    }

    pub fn into_schedule(self) -> LayerSchedule {
        self.schedule
    }
}

/// Sorts each cell's value sequence ascending; ties keep block order.
pub fn column_reorder(schedule: &LayerSchedule) -> Result<ReorderedSchedule> {
    if schedule.cell_perms.is_some() {
        return Err(Error::AlreadyTransformed("cell permutations"));
    }
    if schedule.row_orders.is_some() {
        return Err(Error::AlreadyTransformed("a row remapping"));
    }
    let cells = schedule.k * schedule.k;
    let (ptcs, perms): (Vec<_>, Vec<_>) = schedule
        .ptcs
        .par_iter()
        .map(|seq| {
            let steps = seq.blocks.len();
            let mut out = seq.clone();
            let mut source = Vec::with_capacity(cells * steps);
            let mut order: Vec<usize> = Vec::with_capacity(steps);
            for c in 0..cells {
                order.clear();
                order.extend(0..steps);
                order.sort_by(|&a, &b| seq.blocks[a].values[c].total_cmp(&seq.blocks[b].values[c]));
                for (m, &s) in order.iter().enumerate() {
                    out.blocks[m].values[c] = seq.blocks[s].values[c];
                }
                source.extend_from_slice(&order);
            }
            (out, PtcPermutation { steps, source })
        })
        .unzip();
    let mut reordered = schedule.clone();
    reordered.ptcs = ptcs;
    reordered.cell_perms = Some(CellPermutations { ptcs: perms });
    Ok(ReorderedSchedule {
        schedule: reordered,
    })
}

/// Largest relative difference between the outputs of the original and the
/// reordered schedule.
pub fn verify_equivalence(
    original: &LayerSchedule,
    reordered: &ReorderedSchedule,
    inputs: &Matrix,
) -> Result<f64> {
    if reordered.permutations().is_none() {
        return Err(Error::MissingPermutations);
    }
    if original.ptcs.len() != reordered.schedule.ptcs.len()
        || original.rows != reordered.schedule.rows
        || original.cols != reordered.schedule.cols
    {
        return Err(Error::shape(
            format!("{}x{} layer", original.rows, original.cols),
            format!("{}x{} layer", reordered.schedule.rows, reordered.schedule.cols),
        ));
    }
    let want = execute_layer(original, inputs)?;
    let got = execute_layer(&reordered.schedule, inputs)?;
    Ok(want.relative_residual(&got))
}

/// Per-cell writes of a sorted sequence after its first programming are at
/// most the signed level range, `2^(b+1) - 2`.
pub fn per_cell_write_bound(cfg: &CellConfig) -> u64 {
    2 * cfg.max_level() as u64
}

/// The same bound with the first programming from all-c included,
/// `3 (2^b - 1)`.
pub fn per_cell_write_bound_with_initial(cfg: &CellConfig) -> u64 {
    3 * cfg.max_level() as u64
}
