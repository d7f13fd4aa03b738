//! Lowering layers to GEMM, blocking them onto PTCs, and running the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aging::RowOrder;
use crate::cell::CellConfig;
use crate::error::{Error, Result};
use crate::reorder::CellPermutations;
use crate::write::{simulate_schedule, SimOptions, WriteStats};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A layer's weights in GEMM form, `M x N`.
pub type WeightMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("nonzero dimensions", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("matrix contains non-finite values".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `max |a - b| / max |a|`, with the denominator floored at `f64::MIN_POSITIVE`.
    pub fn relative_residual(&self, other: &Matrix) -> f64 {
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = self.data.iter().map(|a| a.abs()).fold(0.0, f64::max);
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Convolution weights in `(out, in, kh, kw)` row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub data: Vec<f64>,
}

/// im2col lowering: row `o` is kernel `o` flattened in `(in, kh, kw)` order.
pub fn conv_to_gemm(conv: &ConvWeights) -> Result<WeightMatrix> {
    Matrix::new(
        conv.out_channels,
        conv.in_channels * conv.kernel_h * conv.kernel_w,
        conv.data.clone(),
    )
}

/// `P x Q` grid of zero-padded `k x k` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub p: usize,
    pub q: usize,
    blocks: Vec<Vec<f64>>,
}

impl BlockGrid {
    pub fn block(&self, p: usize, q: usize) -> &[f64] {
        &self.blocks[p * self.q + q]
    }

    /// Stitches the blocks back together and crops the padding.
    pub fn reassemble(&self) -> WeightMatrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let b = self.block(r / self.k, c / self.k);
                m.data[r * self.cols + c] = b[(r % self.k) * self.k + c % self.k];
            }
        }
        m
    }
}

pub fn partition(w: &WeightMatrix, k: usize) -> Result<BlockGrid> {
    if k == 0 {
        return Err(Error::InvalidConfig("ptc size must be at least 1".into()));
    }
    let p = w.rows.div_ceil(k);
    let q = w.cols.div_ceil(k);
    let mut blocks = vec![vec![0.0; k * k]; p * q];
    for r in 0..w.rows {
        for c in 0..w.cols {
            blocks[(r / k) * q + c / k][(r % k) * k + c % k] = w.get(r, c);
        }
    }
    Ok(BlockGrid {
        k,
        rows: w.rows,
        cols: w.cols,
        p,
        q,
        blocks,
    })
}

/// How block-rows are distributed over physical PTCs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// One PTC per block-row.
    #[default]
    RowPerPtc,
    /// At most `ptcs` PTCs; PTC `t` runs block-rows `t, t + n, t + 2n, ...`
    /// back to back.
    RoundRobin { ptcs: usize },
}

/// A block together with its grid position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBlock {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

/// Blocks one PTC holds, in programming order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PtcSequence {
    pub blocks: Vec<ScheduledBlock>,
}

/// Block sequences for every PTC of one layer.
///
/// `cell_perms`, when present, says which original step each cell's value at
/// each step came from. `row_orders`, when present, gives for each PTC the
/// weight row held by every physical row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub ptcs: Vec<PtcSequence>,
    pub cell_perms: Option<CellPermutations>,
    pub row_orders: Option<Vec<RowOrder>>,
}

impl LayerSchedule {
    pub fn from_sequences(k: usize, rows: usize, cols: usize, ptcs: Vec<PtcSequence>) -> Self {
        LayerSchedule {
            k,
            rows,
            cols,
            ptcs,
            cell_perms: None,
            row_orders: None,
        }
    }

    pub fn block_count(&self) -> usize {
        self.ptcs.iter().map(|s| s.blocks.len()).sum()
    }
}

pub fn assign(grid: &BlockGrid) -> LayerSchedule {
    assign_with(grid, Assignment::RowPerPtc)
}

pub fn assign_with(grid: &BlockGrid, mode: Assignment) -> LayerSchedule {
    let n = match mode {
        Assignment::RowPerPtc => grid.p,
        Assignment::RoundRobin { ptcs } => ptcs.clamp(1, grid.p.max(1)),
    };
    let mut ptcs = vec![PtcSequence::default(); n.min(grid.p)];
    for p in 0..grid.p {
        let seq = &mut ptcs[p % n];
        for q in 0..grid.q {
            seq.blocks.push(ScheduledBlock {
                row: p,
                col: q,
                values: grid.block(p, q).to_vec(),
            });
        }
    }
    LayerSchedule::from_sequences(grid.k, grid.rows, grid.cols, ptcs)
}

/// Which schedule metadata the executor honours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    /// Feed each cell the input of the block its value came from.
    pub inputs: bool,
    /// Send each physical row's output to the weight row it holds.
    pub rows: bool,
}

impl Default for Routing {
    fn default() -> Self {
        Routing {
            inputs: true,
            rows: true,
        }
    }
}

/// Time-multiplexed emulation of `W X` on the scheduled PTCs.
pub fn execute_layer(schedule: &LayerSchedule, inputs: &Matrix) -> Result<Matrix> {
    execute_layer_with(schedule, inputs, Routing::default())
}

pub fn execute_layer_with(
    schedule: &LayerSchedule,
    inputs: &Matrix,
    routing: Routing,
) -> Result<Matrix> {
    if inputs.rows != schedule.cols {
        return Err(Error::shape(
            format!("{} input rows", schedule.cols),
            format!("{} input rows", inputs.rows),
        ));
    }
    let k = schedule.k;
    let mut out = Matrix::zeros(schedule.rows, inputs.cols);
    for (t, seq) in schedule.ptcs.iter().enumerate() {
        let perms = schedule
            .cell_perms
            .as_ref()
            .filter(|_| routing.inputs)
            .map(|p| &p.ptcs[t]);
        let row_map = schedule
            .row_orders
            .as_ref()
            .filter(|_| routing.rows)
            .map(|o| &o[t].perm);
        for (step, block) in seq.blocks.iter().enumerate() {
            for i in 0..k {
                let logical_i = row_map.map_or(i, |m| m[i]);
                for j in 0..k {
                    let v = block.values[i * k + j];
                    if v == 0.0 {
                        continue;
                    }
                    let src_step = perms.map_or(step, |p| p.source(i * k + j, step));
                    let src = &seq.blocks[src_step];
                    let out_row = src.row * k + logical_i;
                    let in_row = src.col * k + j;
                    if out_row >= schedule.rows || in_row >= schedule.cols {
                        continue;
                    }
                    let x = inputs.row(in_row);
                    for (y, xv) in out.row_mut(out_row).iter_mut().zip(x) {
                        *y += v * xv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Layer geometry as stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerShape {
    Dense {
        rows: usize,
        cols: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
}

impl LayerShape {
    pub fn len(&self) -> usize {
        match *self {
            LayerShape::Dense { rows, cols } => rows * cols,
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => out_channels * in_channels * kernel_h * kernel_w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gemm_dims(&self) -> (usize, usize) {
        match *self {
            LayerShape::Dense { rows, cols } => (rows, cols),
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => (out_channels, in_channels * kernel_h * kernel_w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: LayerShape,
    pub weights: Vec<f64>,
}

impl Layer {
    pub fn gemm(&self) -> Result<WeightMatrix> {
        if self.weights.len() != self.shape.len() {
            return Err(Error::BadLayer {
                layer: self.name.clone(),
                reason: format!(
                    "{} weights for a shape of {}",
                    self.weights.len(),
                    self.shape.len()
                ),
            });
        }
        let m = match self.shape {
            LayerShape::Dense { rows, cols } => Matrix::new(rows, cols, self.weights.clone()),
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => conv_to_gemm(&ConvWeights {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                data: self.weights.clone(),
            }),
        };
        m.map_err(|e| Error::BadLayer {
            layer: self.name.clone(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkModel {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub stats: WriteStats,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkStats {
    pub layers: Vec<LayerStats>,
    pub totals: WriteStats,
}

impl NetworkStats {
    pub fn from_layers(layers: Vec<LayerStats>) -> Self {
        let totals = layers
            .iter()
            .fold(WriteStats::default(), |acc, l| acc.merge(&l.stats));
        NetworkStats { layers, totals }
    }
}

/// Blocks and schedules one layer.
pub fn schedule_layer(layer: &Layer, k: usize, mode: Assignment) -> Result<LayerSchedule> {
    Ok(assign_with(&partition(&layer.gemm()?, k)?, mode))
}

/// Per-layer write statistics of deploying every layer of `model`.
pub fn simulate_network(
    model: &NetworkModel,
    cfg: &CellConfig,
    k: usize,
    mode: Assignment,
    opts: &SimOptions,
) -> Result<NetworkStats> {
    let layers = model
        .layers
        .par_iter()
        .map(|layer| {
            let schedule = schedule_layer(layer, k, mode)?;
            let run = simulate_schedule(cfg, &schedule, opts, None)?;
            Ok(LayerStats {
                name: layer.name.clone(),
                stats: run.stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkStats::from_layers(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::write::{layer_writes, wt_block, EnergyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        )
        .unwrap()
    }

    fn dense_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for t in 0..a.cols() {
                    acc += a.get(i, t) * b.get(t, j);
                }
                out.data[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_shapes() {
        let conv = |o, i, h, w| ConvWeights {
            out_channels: o,
            in_channels: i,
            kernel_h: h,
            kernel_w: w,
            data: vec![0.0; o * i * h * w],
        };
        let m = conv_to_gemm(&conv(512, 512, 3, 3)).unwrap();
        assert_eq!((m.rows(), m.cols()), (512, 4608));
        let g = partition(&m, 64).unwrap();
        assert_eq!((g.p, g.q), (8, 72));
        let s = assign(&g);
        assert_eq!(s.ptcs.len(), 8);
        assert!(s.ptcs.iter().all(|p| p.blocks.len() == 72));
        let m = conv_to_gemm(&conv(32, 32, 4, 4)).unwrap();
        assert_eq!((m.rows(), m.cols()), (32, 512));
        let one = ConvWeights {
            data: vec![0.25],
            ..conv(1, 1, 1, 1)
        };
        assert_eq!(conv_to_gemm(&one).unwrap().data(), &[0.25]);
    }

    #[test]
    fn conv_rows_are_flattened_kernels() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|v| v as f64).collect();
        let m = conv_to_gemm(&ConvWeights {
            out_channels: 2,
            in_channels: 3,
            kernel_h: 2,
            kernel_w: 2,
            data: data.clone(),
        })
        .unwrap();
        // element (o=1, i=2, h=1, w=0)
        assert_eq!(m.get(1, 2 * 4 + 2), data[12 + 2 * 4 + 2]);
    }

    #[test]
    fn partition_pads_and_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 5, 5);
        let g = partition(&m, 4).unwrap();
        assert_eq!((g.p, g.q), (2, 2));
        assert_eq!(g.block(1, 1)[1..4], [0.0, 0.0, 0.0]);
        assert_eq!(g.reassemble(), m);
        let sq = random_matrix(&mut rng, 4, 4);
        let g = partition(&sq, 4).unwrap();
        assert_eq!((g.p, g.q), (1, 1));
        assert_eq!(g.block(0, 0), sq.data());
        assert!(partition(&sq, 0).is_err());
    }

    #[test]
    fn assignment_orders() {
        let m = Matrix::zeros(2 * 3, 3 * 3);
        let s = assign(&partition(&m, 3).unwrap());
        let pos: Vec<_> = s.ptcs[0].blocks.iter().map(|b| (b.row, b.col)).collect();
        assert_eq!(pos, vec![(0, 0), (0, 1), (0, 2)]);
        let s = assign(&partition(&Matrix::zeros(1, 1), 1).unwrap());
        assert_eq!((s.ptcs.len(), s.block_count()), (1, 1));

        let m = Matrix::zeros(5 * 2, 2);
        let s = assign_with(&partition(&m, 2).unwrap(), Assignment::RoundRobin { ptcs: 2 });
        assert_eq!(s.ptcs.len(), 2);
        let rows: Vec<_> = s.ptcs[0].blocks.iter().map(|b| b.row).collect();
        assert_eq!(rows, vec![0, 2, 4]);
        assert_eq!(s.block_count(), 5);
    }

    #[test]
    fn block_count_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (r, c, k) = (
                rng.random_range(1..40),
                rng.random_range(1..40),
                rng.random_range(1..9),
            );
            let s = assign(&partition(&Matrix::zeros(r, c), k).unwrap());
            assert_eq!(s.block_count(), r.div_ceil(k) * c.div_ceil(k));
            let mut seen = std::collections::HashSet::new();
            for seq in &s.ptcs {
                for b in &seq.blocks {
                    assert!(seen.insert((b.row, b.col)));
                }
            }
        }
    }

    #[test]
    fn executor_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ident = assign(&partition(&Matrix::identity(4), 4).unwrap());
        let x = random_matrix(&mut rng, 4, 3);
        assert_eq!(execute_layer(&ident, &x).unwrap(), x);
        for trial in 0..100 {
            let (r, c, k, m) = if trial == 0 {
                (8, 8, 4, 5)
            } else {
                (
                    rng.random_range(1..20),
                    rng.random_range(1..20),
                    rng.random_range(1..6),
                    rng.random_range(1..4),
                )
            };
            let w = random_matrix(&mut rng, r, c);
            let x = random_matrix(&mut rng, c, m);
            let mode = if trial % 2 == 0 {
                Assignment::RowPerPtc
            } else {
                Assignment::RoundRobin { ptcs: 2 }
            };
            let s = assign_with(&partition(&w, k).unwrap(), mode);
            let y = execute_layer(&s, &x).unwrap();
            assert!(dense_matmul(&w, &x).relative_residual(&y) <= 1e-9);
        }
        let s = assign(&partition(&Matrix::zeros(3, 3), 2).unwrap());
        assert!(execute_layer(&s, &Matrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn simulate_network_sums_layers() {
        let cfg = CellConfig::new(3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers: Vec<Layer> = (0..4)
            .map(|i| Layer {
                name: format!("l{i}"),
                shape: LayerShape::Dense { rows: 9, cols: 13 },
                weights: random_matrix(&mut rng, 9, 13).into_data(),
            })
            .collect();
        let model = NetworkModel {
            name: "m".into(),
            layers: layers.clone(),
        };
        let opts = SimOptions::default();
        let net = simulate_network(&model, &cfg, 4, Assignment::RowPerPtc, &opts).unwrap();
        let mut sum = 0;
        for (l, s) in layers.iter().zip(&net.layers) {
            let sched = schedule_layer(l, 4, Assignment::RowPerPtc).unwrap();
            let direct = layer_writes(&cfg, &sched, &EnergyModel::default()).unwrap();
            assert_eq!(direct, s.stats);
            sum += direct.total_writes;
        }
        assert_eq!(net.totals.total_writes, sum);

        let single = NetworkModel {
            name: "one".into(),
            layers: vec![Layer {
                name: "b".into(),
                shape: LayerShape::Dense { rows: 2, cols: 2 },
                weights: vec![0.5, -0.25, 1.0, 0.0],
            }],
        };
        let net = simulate_network(&single, &cfg, 2, Assignment::RowPerPtc, &opts).unwrap();
        let sched = schedule_layer(&single.layers[0], 2, Assignment::RowPerPtc).unwrap();
        assert_eq!(net.layers[0].stats, layer_writes(&cfg, &sched, &EnergyModel::default()).unwrap());
    }

    #[test]
    fn identical_consecutive_blocks_are_free() {
        let cfg = CellConfig::new(3, 0.7).unwrap();
        let block = [0.3, -0.7, 0.0, 1.0];
        let w = Matrix::new(2, 4, vec![0.3, -0.7, 0.3, -0.7, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = assign(&partition(&w, 2).unwrap());
        let stats = layer_writes(&cfg, &s, &EnergyModel::default()).unwrap();
        assert_eq!(stats.total_writes, wt_block(&cfg, &block, &[0.0; 4]).unwrap());
    }

    #[test]
    fn rewriting_a_layer_costs_first_vs_last() {
        let cfg = CellConfig::new(3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 6, 9);
        let s = assign(&partition(&w, 3).unwrap());
        let mut twice = s.clone();
        for seq in &mut twice.ptcs {
            let again = seq.blocks.clone();
            seq.blocks.extend(again);
        }
        let e = EnergyModel::default();
        let once = layer_writes(&cfg, &s, &e).unwrap().total_writes;
        let both = layer_writes(&cfg, &twice, &e).unwrap().total_writes;
        let seam: u64 = s
            .ptcs
            .iter()
            .map(|seq| {
                let first = &seq.blocks[0].values;
                let last = &seq.blocks.last().unwrap().values;
                wt_block(&cfg, first, last).unwrap()
            })
            .sum();
        assert_eq!(both, 2 * once - s.ptcs.iter().map(|seq| {
            wt_block(&cfg, &seq.blocks[0].values, &[0.0; 9]).unwrap()
        }).sum::<u64>() + seam);
    }
}
