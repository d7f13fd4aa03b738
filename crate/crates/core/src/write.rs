//! Wire-granular programming of PTCs with augmented redundant write
//! elimination (ARWE): reaching a new level pair flips only as many wires as
//! the level difference requires, and every flip is counted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aging::AgedProfile;
use crate::cell::{CellConfig, LevelPair};
use crate::deploy::LayerSchedule;
use crate::error::{Error, Result};

/// `|l+(new) - l+(old)| + |l-(new) - l-(old)|`.
pub fn wt_scalar(cfg: &CellConfig, w_new: f64, w_old: f64) -> Result<u64> {
    Ok(cfg.levels(w_new)?.distance(&cfg.levels(w_old)?))
}

/// Wire writes needed to overwrite `old` with `new`, elementwise.
pub fn wt_block(cfg: &CellConfig, new: &[f64], old: &[f64]) -> Result<u64> {
    if new.len() != old.len() {
        return Err(Error::shape(
            format!("{} elements", old.len()),
            format!("{} elements", new.len()),
        ));
    }
    new.iter()
        .zip(old)
        .map(|(&n, &o)| wt_scalar(cfg, n, o))
        .sum()
}

/// Which wires to flip when a level change leaves a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WirePolicy {
    /// Flip the least-worn eligible wires; ties go to the lowest index.
    #[default]
    LeastWorn,
    /// Always flip the lowest-index eligible wires.
    LowestIndex,
}

/// One array of binary PCM wires. `true` is the amorphous state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireArray {
    amorphous: Vec<bool>,
    wear: Vec<u64>,
    stuck: Vec<bool>,
}

impl WireArray {
    fn fresh(n: usize) -> Self {
        WireArray {
            amorphous: vec![false; n],
            wear: vec![0; n],
            stuck: vec![false; n],
        }
    }

    pub fn active(&self) -> usize {
        self.amorphous.iter().filter(|&&a| a).count()
    }

    /// Highest amorphous count still reachable.
    pub fn capacity(&self) -> usize {
        self.stuck.iter().filter(|&&s| !s).count()
    }

    pub fn states(&self) -> &[bool] {
        &self.amorphous
    }

    pub fn wear(&self) -> &[u64] {
        &self.wear
    }

    pub fn stuck(&self) -> &[bool] {
        &self.stuck
    }

    pub fn stuck_count(&self) -> usize {
        self.stuck.iter().filter(|&&s| s).count()
    }

    /// Ties wires to the crystalline state. Returns how many are stuck.
    pub(crate) fn age(&mut self, endurance: u64) -> usize {
        for i in 0..self.wear.len() {
            if self.wear[i] >= endurance {
                self.stuck[i] = true;
                self.amorphous[i] = false;
            }
        }
        self.stuck_count()
    }

    fn stick_first(&mut self, count: usize) {
        for i in 0..count.min(self.stuck.len()) {
            self.stuck[i] = true;
            self.amorphous[i] = false;
        }
    }

    /// Flips wires until `target` are amorphous; returns (c->a, a->c).
    fn set_active(&mut self, target: usize, policy: WirePolicy) -> (u64, u64) {
        let current = self.active();
        if target == current {
            return (0, 0);
        }
        let raise = target > current;
        let count = if raise { target - current } else { current - target };
        let mut candidates: Vec<usize> = (0..self.amorphous.len())
            .filter(|&i| self.amorphous[i] != raise && !(raise && self.stuck[i]))
            .collect();
        if policy == WirePolicy::LeastWorn {
            candidates.sort_by_key(|&i| (self.wear[i], i));
        }
        debug_assert!(candidates.len() >= count);
        for &i in &candidates[..count] {
            self.amorphous[i] = raise;
            self.wear[i] += 1;
        }
        if raise {
            (count as u64, 0)
        } else {
            (0, count as u64)
        }
    }
}

/// The positive and negative wire arrays behind one signed weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellState {
    pub pos: WireArray,
    pub neg: WireArray,
}

/// Wire flips performed by one programming step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Toggles {
    pub writes: u64,
    pub c_to_a: u64,
    pub a_to_c: u64,
}

impl CellState {
    /// All wires crystalline, no wear.
    pub fn fresh(cfg: &CellConfig) -> Self {
        CellState {
            pos: WireArray::fresh(cfg.wire_count()),
            neg: WireArray::fresh(cfg.wire_count()),
        }
    }

    pub fn levels(&self) -> LevelPair {
        LevelPair::new(self.pos.active() as i32, -(self.neg.active() as i32))
    }

    pub fn total_wear(&self) -> u64 {
        self.pos.wear.iter().chain(&self.neg.wear).sum()
    }

    /// Clamps a target to what the non-stuck wires can still reach.
    pub fn reachable(&self, target: LevelPair) -> LevelPair {
        LevelPair::new(
            target.pos.min(self.pos.capacity() as i32),
            target.neg.max(-(self.neg.capacity() as i32)),
        )
    }
}

/// Drives `cell` to `target`, flipping only the wires whose state must change.
pub fn program_cell(
    cfg: &CellConfig,
    cell: &mut CellState,
    target: LevelPair,
    policy: WirePolicy,
) -> Result<Toggles> {
    target.validate(cfg)?;
    if cell.reachable(target) != target {
        return Err(Error::Unreachable {
            pos: target.pos as i64,
            neg: target.neg as i64,
        });
    }
    let (pc, pa) = cell.pos.set_active(target.pos as usize, policy);
    let (nc, na) = cell.neg.set_active(target.neg.unsigned_abs() as usize, policy);
    Ok(Toggles {
        writes: pc + pa + nc + na,
        c_to_a: pc + nc,
        a_to_c: pa + na,
    })
}

/// Pulse train used for one direction of phase transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseProfile {
    pub period_us: f64,
    pub voltage: f64,
    pub pulses: f64,
}

impl PulseProfile {
    /// `pulses * V^2 * period / R`, in V^2·µs per ohm.
    pub fn energy(&self, resistance: f64) -> f64 {
        self.pulses * self.voltage * self.voltage * self.period_us / resistance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    pub a_to_c: PulseProfile,
    pub c_to_a: PulseProfile,
    /// Heater resistance; `1.0` reports energy in V^2·µs.
    pub heater_resistance: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            a_to_c: PulseProfile {
                period_us: 1.0,
                voltage: 5.0,
                pulses: 20.0,
            },
            c_to_a: PulseProfile {
                period_us: 0.5,
                voltage: 15.0,
                pulses: 1.0,
            },
            heater_resistance: 1.0,
        }
    }
}

impl EnergyModel {
    pub fn e_ac(&self) -> f64 {
        self.a_to_c.energy(self.heater_resistance)
    }

    pub fn e_ca(&self) -> f64 {
        self.c_to_a.energy(self.heater_resistance)
    }

    pub fn energy(&self, a_to_c: u64, c_to_a: u64) -> f64 {
        self.e_ac() * a_to_c as f64 + self.e_ca() * c_to_a as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: &PulseProfile| {
            [p.period_us, p.voltage, p.pulses]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
        };
        if !ok(&self.a_to_c) || !ok(&self.c_to_a) {
            return Err(Error::InvalidConfig(
                "pulse profile values must be finite and nonnegative".into(),
            ));
        }
        if !(self.heater_resistance.is_finite() && self.heater_resistance > 0.0) {
            return Err(Error::InvalidConfig(
                "heater_resistance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Write counts and programming energy.
///
/// `initial_writes` is the share of `total_writes` spent on the first block
/// written to each fresh PTC; `max_cell_rewrites` is the per-cell maximum
/// with that first programming excluded.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WriteStats {
    pub total_writes: u64,
    pub max_cell_writes: u64,
    pub writes_c_to_a: u64,
    pub writes_a_to_c: u64,
    pub energy_units: f64,
    pub initial_writes: u64,
    pub max_cell_rewrites: u64,
}

impl WriteStats {
    /// Combines stats of disjoint PTCs (sums and maxima).
    pub fn merge(&self, other: &WriteStats) -> WriteStats {
        WriteStats {
            total_writes: self.total_writes + other.total_writes,
            max_cell_writes: self.max_cell_writes.max(other.max_cell_writes),
            writes_c_to_a: self.writes_c_to_a + other.writes_c_to_a,
            writes_a_to_c: self.writes_a_to_c + other.writes_a_to_c,
            energy_units: self.energy_units + other.energy_units,
            initial_writes: self.initial_writes + other.initial_writes,
            max_cell_rewrites: self.max_cell_rewrites.max(other.max_cell_rewrites),
        }
    }
}

pub fn energy(stats: &WriteStats, model: &EnergyModel) -> f64 {
    model.energy(stats.writes_a_to_c, stats.writes_c_to_a)
}

/// A `k x k` photonic tensor core: the mutable hardware image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtcState {
    cfg: CellConfig,
    k: usize,
    cells: Vec<CellState>,
    cell_writes: Vec<u64>,
    initial_cell_writes: Vec<u64>,
    c_to_a: u64,
    a_to_c: u64,
    initial_writes: u64,
    blocks_written: usize,
    policy: WirePolicy,
    energy: EnergyModel,
}

impl PtcState {
    pub fn new(cfg: CellConfig, k: usize) -> Self {
        PtcState {
            cfg,
            k,
            cells: vec![CellState::fresh(&cfg); k * k],
            cell_writes: vec![0; k * k],
            initial_cell_writes: vec![0; k * k],
            c_to_a: 0,
            a_to_c: 0,
            initial_writes: 0,
            blocks_written: 0,
            policy: WirePolicy::default(),
            energy: EnergyModel::default(),
        }
    }

    pub fn with_policy(mut self, policy: WirePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_energy(mut self, energy: EnergyModel) -> Self {
        self.energy = energy;
        self
    }

    /// Marks the first `f` wires of each array as stuck at c, per the profile.
    pub fn with_profile(mut self, profile: &AgedProfile) -> Result<Self> {
        if profile.k() != self.k {
            return Err(Error::shape(
                format!("{0}x{0} profile", self.k),
                format!("{0}x{0} profile", profile.k()),
            ));
        }
        for (cell, &(fp, fn_)) in self.cells.iter_mut().zip(profile.cells()) {
            cell.pos.stick_first(fp as usize);
            cell.neg.stick_first(fn_ as usize);
        }
        Ok(self)
    }

    pub fn config(&self) -> &CellConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cell(&self, row: usize, col: usize) -> &CellState {
        &self.cells[row * self.k + col]
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [CellState] {
        &mut self.cells
    }

    pub fn cell_write_counts(&self) -> &[u64] {
        &self.cell_writes
    }

    pub fn direction_counts(&self) -> (u64, u64) {
        (self.c_to_a, self.a_to_c)
    }

    /// Currently stored weights.
    pub fn stored_block(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| self.cfg.dequantize(c.levels()).expect("stored levels valid"))
            .collect()
    }

    /// Programs a block of weights in `[-1, 1]`. Targets beyond the reach of
    /// stuck wires are clamped to the nearest reachable level.
    pub fn program_block(&mut self, block: &[f64]) -> Result<WriteStats> {
        if block.len() != self.k * self.k {
            return Err(Error::shape(
                format!("{0}x{0} block", self.k),
                format!("{} values", block.len()),
            ));
        }
        let targets = block
            .iter()
            .map(|&w| self.cfg.levels(w))
            .collect::<Result<Vec<_>>>()?;
        self.program_levels(&targets)
    }

    pub fn program_levels(&mut self, targets: &[LevelPair]) -> Result<WriteStats> {
        if targets.len() != self.k * self.k {
            return Err(Error::shape(
                format!("{0}x{0} block", self.k),
                format!("{} values", targets.len()),
            ));
        }
        for t in targets {
            t.validate(&self.cfg)?;
        }
        let first = self.blocks_written == 0;
        let mut delta = WriteStats::default();
        for (idx, &target) in targets.iter().enumerate() {
            let target = self.cells[idx].reachable(target);
            let t = program_cell(&self.cfg, &mut self.cells[idx], target, self.policy)?;
            self.cell_writes[idx] += t.writes;
            delta.total_writes += t.writes;
            delta.writes_c_to_a += t.c_to_a;
            delta.writes_a_to_c += t.a_to_c;
            delta.max_cell_writes = delta.max_cell_writes.max(t.writes);
            if first {
                self.initial_cell_writes[idx] = t.writes;
            }
        }
        self.c_to_a += delta.writes_c_to_a;
        self.a_to_c += delta.writes_a_to_c;
        if first {
            self.initial_writes = delta.total_writes;
            delta.initial_writes = delta.total_writes;
        } else {
            delta.max_cell_rewrites = delta.max_cell_writes;
        }
        self.blocks_written += 1;
        delta.energy_units = energy(&delta, &self.energy);
        Ok(delta)
    }

    /// Cumulative stats since the PTC was fresh.
    pub fn stats(&self) -> WriteStats {
        let mut s = WriteStats {
            total_writes: self.c_to_a + self.a_to_c,
            max_cell_writes: self.cell_writes.iter().copied().max().unwrap_or(0),
            writes_c_to_a: self.c_to_a,
            writes_a_to_c: self.a_to_c,
            energy_units: 0.0,
            initial_writes: self.initial_writes,
            max_cell_rewrites: self
                .cell_writes
                .iter()
                .zip(&self.initial_cell_writes)
                .map(|(a, b)| a - b)
                .max()
                .unwrap_or(0),
        };
        s.energy_units = energy(&s, &self.energy);
        s
    }

    /// Per-cell writes excluding the first programmed block.
    pub fn cell_rewrite_counts(&self) -> Vec<u64> {
        self.cell_writes
            .iter()
            .zip(&self.initial_cell_writes)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Options for simulating a whole schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimOptions {
    pub energy: EnergyModel,
    pub policy: WirePolicy,
}

/// Final PTC images and merged stats of one layer.
#[derive(Debug, Clone)]
pub struct LayerRun {
    pub stats: WriteStats,
    pub ptcs: Vec<PtcState>,
}

/// Programs every PTC sequence of `schedule` onto fresh PTCs, or onto PTCs
/// pre-aged with `profiles` (one per PTC sequence).
pub fn simulate_schedule(
    cfg: &CellConfig,
    schedule: &LayerSchedule,
    opts: &SimOptions,
    profiles: Option<&[AgedProfile]>,
) -> Result<LayerRun> {
    if let Some(p) = profiles {
        if p.len() != schedule.ptcs.len() {
            return Err(Error::shape(
                format!("{} aging profiles", schedule.ptcs.len()),
                format!("{} aging profiles", p.len()),
            ));
        }
    }
    let ptcs = schedule
        .ptcs
        .par_iter()
        .enumerate()
        .map(|(t, seq)| {
            let mut ptc = PtcState::new(*cfg, schedule.k)
                .with_policy(opts.policy)
                .with_energy(opts.energy);
            if let Some(p) = profiles {
                ptc = ptc.with_profile(&p[t])?;
            }
            for block in &seq.blocks {
                ptc.program_block(&block.values)?;
            }
            Ok(ptc)
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = ptcs
        .iter()
        .fold(WriteStats::default(), |acc, p| acc.merge(&p.stats()));
    Ok(LayerRun { stats, ptcs })
}

/// Writes needed to run a layer schedule on fresh PTCs.
pub fn layer_writes(
    cfg: &CellConfig,
    schedule: &LayerSchedule,
    model: &EnergyModel,
) -> Result<WriteStats> {
    let opts = SimOptions {
        energy: *model,
        policy: WirePolicy::default(),
    };
    Ok(simulate_schedule(cfg, schedule, &opts, None)?.stats)
}
