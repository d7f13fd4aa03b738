//! Tolerating aged wires: worn-out wires are tied to the crystalline state,
//! which shrinks the weight range a cell can still represent. Rows of a block
//! group are permuted onto PTC rows so that the out-of-range excess (mapping
//! deviation) is minimal; the permutation is a min-cost perfect matching.

use serde::{Deserialize, Serialize};

use crate::cell::{check_domain, CellConfig, LevelPair};
use crate::deploy::LayerSchedule;
use crate::error::{Error, Result};
use crate::write::PtcState;

/// Per-cell counts of positive/negative wires stuck at c.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct AgedProfile {
    k: usize,
    cells: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    k: usize,
    f_pos: Vec<Vec<u32>>,
    f_neg: Vec<Vec<u32>>,
}

impl TryFrom<RawProfile> for AgedProfile {
    type Error = Error;

    fn try_from(raw: RawProfile) -> Result<Self> {
        let k = raw.k;
        let square = |g: &Vec<Vec<u32>>| g.len() == k && g.iter().all(|r| r.len() == k);
        if k == 0 || !square(&raw.f_pos) || !square(&raw.f_neg) {
            return Err(Error::BadProfile(format!(
                "f_pos and f_neg must both be {k}x{k} grids"
            )));
        }
        let cells = raw
            .f_pos
            .iter()
            .flatten()
            .zip(raw.f_neg.iter().flatten())
            .map(|(&p, &n)| (p, n))
            .collect();
        Ok(AgedProfile { k, cells })
    }
}

impl From<AgedProfile> for RawProfile {
    fn from(p: AgedProfile) -> Self {
        let grid = |side: fn(&(u32, u32)) -> u32| {
            p.cells
                .chunks(p.k)
                .map(|row| row.iter().map(side).collect())
                .collect()
        };
        RawProfile {
            k: p.k,
            f_pos: grid(|c| c.0),
            f_neg: grid(|c| c.1),
        }
    }
}

impl AgedProfile {
    pub fn fresh(k: usize) -> Self {
        AgedProfile {
            k,
            cells: vec![(0, 0); k * k],
        }
    }

    pub fn from_cells(k: usize, cells: Vec<(u32, u32)>) -> Result<Self> {
        if cells.len() != k * k {
            return Err(Error::BadProfile(format!(
                "{} cells for a {k}x{k} profile",
                cells.len()
            )));
        }
        Ok(AgedProfile { k, cells })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `(f_pos, f_neg)` per cell, row-major.
    pub fn cells(&self) -> &[(u32, u32)] {
        &self.cells
    }

    pub fn is_fresh(&self) -> bool {
        self.cells.iter().all(|&c| c == (0, 0))
    }

    pub fn validate(&self, cfg: &CellConfig) -> Result<()> {
        let max = cfg.max_level() as u32;
        match self.cells.iter().position(|&(p, n)| p > max || n > max) {
            Some(i) => Err(Error::BadProfile(format!(
                "cell ({}, {}) has more stuck wires than the {max} available",
                i / self.k,
                i % self.k
            ))),
            None => Ok(()),
        }
    }

    pub fn ranges(&self, cfg: &CellConfig) -> Result<Vec<SupportedRange>> {
        self.cells
            .iter()
            .map(|&(p, n)| supported_range(cfg, p, n))
            .collect()
    }
}

/// Ties every wire whose wear reached `endurance` to the c state and returns
/// the resulting stuck counts. Repeating the call changes nothing.
pub fn inject_aging(ptc: &mut PtcState, endurance: u64) -> Result<AgedProfile> {
    if endurance == 0 {
        return Err(Error::InvalidConfig("endurance must be at least 1".into()));
    }
    let k = ptc.k();
    let cells = ptc
        .cells_mut()
        .iter_mut()
        .map(|c| (c.pos.age(endurance) as u32, c.neg.age(endurance) as u32))
        .collect();
    AgedProfile::from_cells(k, cells)
}

/// Weight interval a cell can still realize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportedRange {
    pub w_min: f64,
    pub w_max: f64,
}

impl SupportedRange {
    pub const FULL: SupportedRange = SupportedRange {
        w_min: -1.0,
        w_max: 1.0,
    };
}

/// `w_max = (c^f_pos - delta) / s`, `w_min = -(c^f_neg - delta) / s`.
pub fn supported_range(cfg: &CellConfig, f_pos: u32, f_neg: u32) -> Result<SupportedRange> {
    let max = cfg.max_level();
    if f_pos as i32 > max || f_neg as i32 > max {
        return Err(Error::BadProfile(format!(
            "stuck counts ({f_pos}, {f_neg}) exceed {max} wires"
        )));
    }
    Ok(SupportedRange {
        w_min: cfg.dequantize(LevelPair::new(0, f_neg as i32 - max))?,
        w_max: cfg.dequantize(LevelPair::new(max - f_pos as i32, 0))?,
    })
}

/// Weight actually stored when `w` is written to a cell limited to `range`.
pub fn clamp_program(cfg: &CellConfig, range: SupportedRange, w: f64) -> Result<f64> {
    check_domain(w)?;
    Ok(cfg.quantize(w.clamp(range.w_min, range.w_max))?.0)
}

/// Per-position weight extremes over a group of blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRangeSummary {
    pub k: usize,
    /// `(min, max)` per position, row-major.
    pub ranges: Vec<(f64, f64)>,
}

impl RowRangeSummary {
    /// Exact min/max over every block.
    pub fn from_group<B: AsRef<[f64]>>(k: usize, blocks: &[B]) -> Result<Self> {
        let first = blocks.first().ok_or(Error::EmptyGroup(0))?;
        check_block(k, first.as_ref())?;
        let mut ranges: Vec<(f64, f64)> = first.as_ref().iter().map(|&v| (v, v)).collect();
        for b in &blocks[1..] {
            check_block(k, b.as_ref())?;
            for (r, &v) in ranges.iter_mut().zip(b.as_ref()) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        Ok(RowRangeSummary { k, ranges })
    }

    /// For a group sorted per position, the extremes sit in the first and
    /// last block.
    pub fn from_sorted(k: usize, first: &[f64], last: &[f64]) -> Result<Self> {
        check_block(k, first)?;
        check_block(k, last)?;
        Ok(RowRangeSummary {
            k,
            ranges: first.iter().zip(last).map(|(&a, &b)| (a, b)).collect(),
        })
    }

    pub fn row(&self, m: usize) -> &[(f64, f64)] {
        &self.ranges[m * self.k..(m + 1) * self.k]
    }
}

fn check_block(k: usize, block: &[f64]) -> Result<()> {
    if block.len() != k * k {
        return Err(Error::shape(
            format!("{0}x{0} block", k),
            format!("{} values", block.len()),
        ));
    }
    Ok(())
}

/// Which mapping-deviation formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdForm {
    /// Excess above the cell maximum plus excess below the cell minimum.
    #[default]
    Corrected,
    /// Both terms on the maxima, `sum |B_max - A_max|`, as originally
    /// typeset. Kept for audits.
    Verbatim,
}

/// Mapping deviation of placing a weight row with extremes `weights` onto a
/// PTC row with supported ranges `cells`.
pub fn mapping_deviation(
    weights: &[(f64, f64)],
    cells: &[SupportedRange],
    form: MdForm,
) -> Result<f64> {
    if weights.len() != cells.len() {
        return Err(Error::shape(
            format!("row of {}", cells.len()),
            format!("row of {}", weights.len()),
        ));
    }
    Ok(weights
        .iter()
        .zip(cells)
        .map(|(&(b_min, b_max), a)| match form {
            MdForm::Corrected => {
                let over = if b_max > a.w_max { b_max - a.w_max } else { 0.0 };
                let under = if b_min < a.w_min { a.w_min - b_min } else { 0.0 };
                over + under
            }
            MdForm::Verbatim => {
                let plus = if b_max > a.w_max { (b_max - a.w_max).abs() } else { 0.0 };
                let minus = if b_max < a.w_max { (b_max - a.w_max).abs() } else { 0.0 };
                plus + minus
            }
        })
        .sum())
}

/// A perfect matching: `cols[row]` is the column matched to `row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub cols: Vec<usize>,
    pub cost: f64,
}

fn matching_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Minimum-cost perfect matching on a square cost matrix, O(k^3).
///
/// Among optimal matchings the lexicographically smallest `cols` vector is
/// returned (ties within `1e-9 * (1 + max|cost|)` of reduced cost zero).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    if n == 0 || cost.iter().any(|r| r.len() != n) {
        return Err(Error::NonSquare {
            rows: n,
            cols: cost.iter().map(Vec::len).max().unwrap_or(0),
        });
    }
    for (r, row) in cost.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
            if v < 0.0 {
                return Err(Error::NegativeCost { row: r, col: c });
            }
        }
    }

    // Shortest augmenting paths with potentials; 1-based with a virtual
    // column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[owner[j] - 1] = j - 1;
    }
    let base_cost = matching_cost(cost, &cols);

    // Every optimal matching lives on reduced-cost-zero edges; pick the
    // lexicographically smallest one there.
    let scale = cost.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * (1.0 + scale);
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|r| (0..n).map(|c| cost[r][c] - u[r + 1] - v[c + 1] <= tol).collect())
        .collect();
    let refined = lexicographic_matching(&tight, cols.clone());
    let refined_cost = matching_cost(cost, &refined);
    if refined_cost <= base_cost {
        Ok(Matching {
            cols: refined,
            cost: refined_cost,
        })
    } else {
        Ok(Matching {
            cols,
            cost: base_cost,
        })
    }
}

/// Lexicographically smallest perfect matching of a bipartite graph, given
/// one perfect matching to start from.
fn lexicographic_matching(edges: &[Vec<bool>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = edges.len();
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut locked_row = vec![false; n];
    let mut locked_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if !edges[i][j] || locked_col[j] {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // Give j to i; its owner must reach the column i releases.
            let displaced = col_to_row[j];
            let target = row_to_col[i];
            locked_row[i] = true;
            locked_col[j] = true;
            let mut visited = vec![false; n];
            let mut path = Vec::new();
            let found = alternating_path(
                edges,
                &col_to_row,
                &locked_row,
                &locked_col,
                displaced,
                target,
                &mut visited,
                &mut path,
            );
            locked_row[i] = false;
            locked_col[j] = false;
            if found {
                // path holds (row, new col) pairs starting at `displaced`.
                for &(r, c) in &path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        locked_row[i] = true;
        locked_col[row_to_col[i]] = true;
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn alternating_path(
    edges: &[Vec<bool>],
    col_to_row: &[usize],
    locked_row: &[bool],
    locked_col: &[bool],
    row: usize,
    target: usize,
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..edges.len() {
        if !edges[row][c] || locked_col[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        path.push((row, c));
        if c == target {
            return true;
        }
        let next = col_to_row[c];
        if !locked_row[next]
            && alternating_path(
                edges, col_to_row, locked_row, locked_col, next, target, visited, path,
            )
        {
            return true;
        }
        path.pop();
    }
    false
}

/// Row permutation of a block group onto a PTC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOrder {
    /// `perm[n]` is the weight row placed on physical row `n`.
    pub perm: Vec<usize>,
    /// Total mapping deviation under `perm`.
    pub cost: f64,
    /// Total mapping deviation of the identity placement.
    pub identity_cost: f64,
}

impl RowOrder {
    pub fn identity(k: usize) -> Self {
        RowOrder {
            perm: (0..k).collect(),
            cost: 0.0,
            identity_cost: 0.0,
        }
    }

    /// `inverse()[m]` is the physical row holding weight row `m`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (n, &m) in self.perm.iter().enumerate() {
            inv[m] = n;
        }
        inv
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(n, &m)| n == m)
    }
}

fn check_sorted(k: usize, blocks: &[Vec<f64>]) -> Result<()> {
    for pair in blocks.windows(2) {
        if let Some(idx) = (0..k * k).find(|&i| pair[1][i] < pair[0][i]) {
            return Err(Error::UnsortedGroup {
                row: idx / k,
                col: idx % k,
            });
        }
    }
    Ok(())
}

fn permute_rows(k: usize, block: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter()
        .flat_map(|&m| block[m * k..(m + 1) * k].iter().copied())
        .collect()
}

/// Finds the row order with the least mapping deviation for a sorted block
/// group and returns it with the row-permuted blocks. Every block of the
/// group shares the order.
pub fn remap_rows(
    cfg: &CellConfig,
    k: usize,
    blocks: &[Vec<f64>],
    profile: &AgedProfile,
    form: MdForm,
) -> Result<(RowOrder, Vec<Vec<f64>>)> {
    if blocks.is_empty() {
        return Err(Error::EmptyGroup(0));
    }
    if profile.k() != k {
        return Err(Error::shape(
            format!("{k}x{k} profile"),
            format!("{0}x{0} profile", profile.k()),
        ));
    }
    for b in blocks {
        check_block(k, b)?;
    }
    check_sorted(k, blocks)?;
    profile.validate(cfg)?;
    let summary = RowRangeSummary::from_sorted(k, &blocks[0], &blocks[blocks.len() - 1])?;
    let ranges = profile.ranges(cfg)?;
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|m| {
            (0..k)
                .map(|n| mapping_deviation(summary.row(m), &ranges[n * k..(n + 1) * k], form))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let matching = hungarian(&cost)?;
    let mut perm = vec![0; k];
    for (m, &n) in matching.cols.iter().enumerate() {
        perm[n] = m;
    }
    let identity_cost = (0..k).map(|r| cost[r][r]).sum();
    let order = RowOrder {
        perm,
        cost: matching.cost,
        identity_cost,
    };
    let remapped = blocks
        .iter()
        .map(|b| permute_rows(k, b, &order.perm))
        .collect();
    Ok((order, remapped))
}

/// Applies [`remap_rows`] to every PTC sequence of a sorted schedule, one
/// profile per PTC. Per-cell permutations follow their rows.
pub fn remap_schedule(
    cfg: &CellConfig,
    schedule: &LayerSchedule,
    profiles: &[AgedProfile],
    form: MdForm,
) -> Result<LayerSchedule> {
    if schedule.row_orders.is_some() {
        return Err(Error::AlreadyTransformed("a row remapping"));
    }
    if profiles.len() != schedule.ptcs.len() {
        return Err(Error::shape(
            format!("{} aging profiles", schedule.ptcs.len()),
            format!("{} aging profiles", profiles.len()),
        ));
    }
    let k = schedule.k;
    let mut out = schedule.clone();
    let mut orders = Vec::with_capacity(schedule.ptcs.len());
    for (t, seq) in out.ptcs.iter_mut().enumerate() {
        if seq.blocks.is_empty() {
            orders.push(RowOrder::identity(k));
            continue;
        }
        let values: Vec<Vec<f64>> = seq.blocks.iter().map(|b| b.values.clone()).collect();
        let (order, remapped) = remap_rows(cfg, k, &values, &profiles[t], form)?;
        for (b, v) in seq.blocks.iter_mut().zip(remapped) {
            b.values = v;
        }
        orders.push(order);
    }
    if let Some(perms) = out.cell_perms.as_mut() {
        for (p, order) in perms.ptcs.iter_mut().zip(&orders) {
            let cell_map: Vec<usize> = order
                .perm
                .iter()
                .flat_map(|&m| (0..k).map(move |j| m * k + j))
                .collect();
            *p = p.permute_cells(&cell_map);
        }
    }
    out.row_orders = Some(orders);
    Ok(out)
}

/// `sum |clamp_program(w) - quantize(w)|` over a group placed on a profile.
pub fn realized_deviation(
    cfg: &CellConfig,
    k: usize,
    blocks: &[Vec<f64>],
    profile: &AgedProfile,
) -> Result<f64> {
    let ranges = profile.ranges(cfg)?;
    let mut total = 0.0;
    for b in blocks {
        check_block(k, b)?;
        for (&w, &r) in b.iter().zip(&ranges) {
            total += (clamp_program(cfg, r, w)? - cfg.quantize(w)?.0).abs();
        }
    }
    Ok(total)
}
