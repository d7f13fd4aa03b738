//! Wire-level modeling of PCM photonic tensor cores: quantization onto the
//! cell's transmission ladder, write counting and energy, write-aware
//! training, column reordering, and remapping onto aged cells.

pub mod aging;
pub mod cell;
pub mod config;
pub mod deploy;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod reorder;
pub mod report;
pub mod train;
pub mod write;

pub use aging::{
    clamp_program, hungarian, inject_aging, mapping_deviation, realized_deviation, remap_rows,
    remap_schedule, supported_range, AgedProfile, Matching, MdForm, RowOrder, RowRangeSummary,
    SupportedRange,
};
pub use cell::{CellConfig, Codebook, CodebookEntry, LevelPair};
pub use config::{RunConfig, ToySettings};
pub use deploy::{
    assign, assign_with, conv_to_gemm, execute_layer, execute_layer_with, partition,
    schedule_layer, simulate_network, Assignment, BlockGrid, ConvWeights, Layer, LayerSchedule,
    LayerShape, Matrix, NetworkModel, NetworkStats, PtcSequence, Routing, ScheduledBlock,
    WeightMatrix,
};
pub use error::{Error, Result};
pub use manifest::{load_model, save_model, Manifest};
pub use pipeline::{quantize_model, run_pipeline, AgingSource};
pub use reorder::{column_reorder, verify_equivalence, CellPermutations, PtcPermutation, ReorderedSchedule};
pub use report::{Phases, Report};
pub use train::{
    block_matching_loss, grad_block_matching, ld, normalize_weights, train_toy, BMConfig,
    LevelMode, ToyModel, TrainConfig, TrainReport,
};
pub use write::{
    program_cell, simulate_schedule, wt_block, wt_scalar, CellState, EnergyModel, PtcState,
    SimOptions, WirePolicy, WriteStats,
};
