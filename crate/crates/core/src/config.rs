//! Run configuration, read from JSON and validated before anything runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aging::MdForm;
use crate::cell::CellConfig;
use crate::deploy::Assignment;
use crate::error::{Error, Result};
use crate::train::{BlobConfig, TrainConfig};
use crate::write::{EnergyModel, WirePolicy};

/// Every knob of a run. Unset fields take the defaults below; the cell base
/// must be given as `base_c` or `delta_e_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Bits per cell (default 5).
    pub bit_width: u32,
    /// Per-wire transmission factor c in (0, 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_c: Option<f64>,
    /// Per-wire extinction step in dB; `c = 10^(-|x| / 10)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_e_db: Option<f64>,
    /// PTC size k (default 16).
    pub ptc_size: usize,
    /// Block matching weight for `train-toy` (default 10).
    pub lambda: f64,
    /// Wire endurance used to derive aging when remapping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endurance: Option<u64>,
    pub seed: u64,
    pub energy: EnergyModel,
    /// Column-based reordering (default on).
    pub reorder: bool,
    /// Row remapping onto aged PTCs (default off; needs `reorder`).
    pub remap: bool,
    pub assignment: Assignment,
    pub wire_policy: WirePolicy,
    pub md_form: MdForm,
    pub train: ToySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bit_width: 5,
            base_c: None,
            delta_e_db: None,
            ptc_size: 16,
            lambda: 10.0,
            endurance: None,
            seed: 0,
            energy: EnergyModel::default(),
            reorder: true,
            remap: false,
            assignment: Assignment::RowPerPtc,
            wire_policy: WirePolicy::LeastWorn,
            md_form: MdForm::Corrected,
            train: ToySettings::default(),
        }
    }
}

/// Toy trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySettings {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<u32>,
    pub data: BlobConfig,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            hidden: vec![32],
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 60,
            batch_size: 32,
            activation_bits: None,
            data: BlobConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn with_base_c(base_c: f64) -> Self {
        RunConfig {
            base_c: Some(base_c),
            ..RunConfig::default()
        }
    }

    pub fn cell(&self) -> Result<CellConfig> {
        match (self.base_c, self.delta_e_db) {
            (Some(c), None) => CellConfig::new(self.bit_width, c),
            (None, Some(db)) => CellConfig::from_delta_e_db(self.bit_width, db),
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "give either base_c or delta_e_db, not both".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "base_c (or delta_e_db) is required".into(),
            )),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            hidden: t.hidden.clone(),
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            activation_bits: t.activation_bits,
            data: t.data,
            assignment: self.assignment,
            ..TrainConfig::new(self.cell()?, self.ptc_size, self.seed)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cell()?;
        if self.ptc_size == 0 {
            return Err(Error::InvalidConfig("ptc_size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if self.endurance == Some(0) {
            return Err(Error::InvalidConfig("endurance must be at least 1".into()));
        }
        if let Assignment::RoundRobin { ptcs: 0 } = self.assignment {
            return Err(Error::InvalidConfig(
                "round_robin assignment needs at least one ptc".into(),
            ));
        }
        if self.remap && !self.reorder {
            return Err(Error::InvalidConfig(
                "remap works on reordered (sorted) block groups; enable reorder".into(),
            ));
        }
        self.energy.validate()?;
        self.train_config()?;
        Ok(())
    }
}
