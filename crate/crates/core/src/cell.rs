//! Static model of a multi-level PCM cell.
//!
//! A `b`-bit cell is a waveguide carrying `2^b - 1` binary PCM wires. With `i`
//! wires crystalline the cell transmits `c^i` of the incoming light, so the
//! transmission levels form an exponential ladder from `1` down to the floor
//! `delta = c^(2^b - 1)`. Signed weights use a positive and a negative array;
//! the inactive array always sits at the floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-width and per-wire transmission base of a PCM cell, plus the
/// constants derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCellConfig", into = "RawCellConfig")]
pub struct CellConfig {
    bits: u32,
    base: f64,
    floor: f64,
    scale: f64,
    max_level: i32,
}

#[derive(Serialize, Deserialize)]
struct RawCellConfig {
    bits: u32,
    base: f64,
}

impl TryFrom<RawCellConfig> for CellConfig {
    type Error = Error;

    fn try_from(raw: RawCellConfig) -> Result<Self> {
        CellConfig::new(raw.bits, raw.base)
    }
}

impl From<CellConfig> for RawCellConfig {
    fn from(cfg: CellConfig) -> Self {
        RawCellConfig {
            bits: cfg.bits,
            base: cfg.base,
        }
    }
}

/// Largest bit-width accepted; keeps `2^(b+1)` comfortably inside `i32`.
pub const MAX_BITS: u32 = 16;

impl CellConfig {
    pub fn new(bits: u32, base: f64) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidConfig(format!(
                "bit width {bits} outside 2..={MAX_BITS}"
            )));
        }
        if !(base > 0.0 && base < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "transmission base {base} outside (0, 1)"
            )));
        }
        let max_level = (1i32 << bits) - 1;
        let floor = base.powi(max_level);
        if floor <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "base {base} underflows at {bits} bits"
            )));
        }
        Ok(CellConfig {
            bits,
            base,
            floor,
            scale: 1.0 - floor,
            max_level,
        })
    }

    /// Builds a config from the per-wire extinction-ratio step in dB.
    /// Transmission falls as wires crystallize, so the sign of `step_db` is
    /// ignored: `c = 10^(-|step_db| / 10)`.
    pub fn from_delta_e_db(bits: u32, step_db: f64) -> Result<Self> {
        if !step_db.is_finite() || step_db == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "extinction step {step_db} dB must be finite and nonzero"
            )));
        }
        Self::new(bits, 10f64.powf(-step_db.abs() / 10.0))
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Lowest transmission, `c^(2^b - 1)`.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// `1 - floor`; maps transmission differences onto `[0, 1]`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `2^b - 1`, the largest level magnitude.
    pub fn max_level(&self) -> i32 {
        self.max_level
    }

    pub fn wire_count(&self) -> usize {
        self.max_level as usize
    }

    /// Transmission factor with `i` crystalline wires, `c^i`.
    pub fn transmission_level(&self, i: usize) -> Result<f64> {
        if i > self.wire_count() {
            return Err(Error::LevelOutOfRange {
                index: i,
                max: self.wire_count(),
            });
        }
        Ok(self.base.powi(i as i32))
    }

    /// Unrounded, unclipped exponent `log_c(s|w| + delta)`.
    pub fn exponent(&self, w: f64) -> f64 {
        (self.scale * w.abs() + self.floor).ln() / self.base.ln()
    }

    /// Number of amorphous wires in the positive and negative arrays.
    pub fn levels(&self, w: f64) -> Result<LevelPair> {
        check_domain(w)?;
        let rounded = self.exponent(w).round().clamp(0.0, self.max_level as f64) as i32;
        let active = self.max_level - rounded;
        Ok(if w >= 0.0 {
            LevelPair { pos: active, neg: 0 }
        } else {
            LevelPair { pos: 0, neg: -active }
        })
    }

    /// Weight encoded by a level pair.
    pub fn dequantize(&self, lp: LevelPair) -> Result<f64> {
        lp.validate(self)?;
        let magnitude = lp.magnitude();
        let t = self.base.powi(self.max_level - magnitude);
        let w = (t - self.floor) / self.scale;
        Ok(if lp.neg < 0 { -w } else { w })
    }

    /// Augmented base-c quantizer: snaps `w` onto the codebook.
    pub fn quantize(&self, w: f64) -> Result<(f64, LevelPair)> {
        let lp = self.levels(w)?;
        Ok((self.dequantize(lp)?, lp))
    }

    pub fn build_codebook(&self) -> Codebook {
        let entries = (-self.max_level..=self.max_level)
            .map(|l| {
                let levels = LevelPair::from_signed(l);
                let weight = self
                    .dequantize(levels)
                    .expect("signed level within range");
                CodebookEntry { weight, levels }
            })
            .collect();
        Codebook { entries }
    }
}

pub(crate) fn check_domain(w: f64) -> Result<()> {
    if w.abs() <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(w))
    }
}

/// Amorphous-wire counts of the positive array (`pos >= 0`) and the negated
/// count of the negative array (`neg <= 0`). At most one side is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LevelPair {
    pub pos: i32,
    pub neg: i32,
}

impl LevelPair {
    pub const ZERO: LevelPair = LevelPair { pos: 0, neg: 0 };

    pub fn new(pos: i32, neg: i32) -> Self {
        LevelPair { pos, neg }
    }

    pub fn from_signed(level: i32) -> Self {
        if level >= 0 {
            LevelPair { pos: level, neg: 0 }
        } else {
            LevelPair { pos: 0, neg: level }
        }
    }

    /// Signed level `pos + neg`, in `[-(2^b - 1), 2^b - 1]`.
    pub fn signed(&self) -> i32 {
        self.pos + self.neg
    }

    pub fn magnitude(&self) -> i32 {
        self.pos + self.neg.abs()
    }

    pub fn validate(&self, cfg: &CellConfig) -> Result<()> {
        let err = |reason| Error::InvalidEncoding {
            pos: self.pos as i64,
            neg: self.neg as i64,
            reason,
        };
        if self.pos < 0 || self.pos > cfg.max_level {
            return Err(err("positive count out of range"));
        }
        if self.neg > 0 || self.neg < -cfg.max_level {
            return Err(err("negative count out of range"));
        }
        if self.pos != 0 && self.neg != 0 {
            return Err(err("both arrays active"));
        }
        Ok(())
    }

    /// Wire toggles needed to move from `self` to `other`.
    pub fn distance(&self, other: &LevelPair) -> u64 {
        ((self.pos - other.pos).unsigned_abs() + (self.neg - other.neg).unsigned_abs()) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub weight: f64,
    pub levels: LevelPair,
}

/// All `2^(b+1) - 1` representable weights, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(bits: u32, base: f64) -> CellConfig {
        CellConfig::new(bits, base).unwrap()
    }

    #[test]
    fn derived_constants() {
        let c = cfg(2, 0.5);
        assert_eq!(c.floor(), 0.125);
        assert_eq!(c.scale(), 0.875);
        assert_eq!(c.max_level(), 3);
        assert_eq!(c.wire_count(), 3);
        let c = cfg(5, 0.9);
        assert_eq!(c.floor(), 0.9f64.powi(31));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(CellConfig::new(1, 0.5).is_err());
        assert!(CellConfig::new(3, 1.0).is_err());
        assert!(CellConfig::new(3, 0.0).is_err());
        assert!(CellConfig::new(3, f64::NAN).is_err());
        assert!(CellConfig::from_delta_e_db(3, 0.0).is_err());
    }

    #[test]
    fn delta_e_conversion_ignores_sign() {
        let a = CellConfig::from_delta_e_db(3, 3.0).unwrap();
        let b = CellConfig::from_delta_e_db(3, -3.0).unwrap();
        assert_eq!(a.base(), b.base());
        assert!((a.base() - 10f64.powf(-0.3)).abs() < 1e-15);
    }

    #[test]
    fn transmission_levels() {
        let c = cfg(2, 0.5);
        assert_eq!(c.transmission_level(0).unwrap(), 1.0);
        assert_eq!(c.transmission_level(3).unwrap(), 0.125);
        assert!(matches!(
            c.transmission_level(4),
            Err(Error::LevelOutOfRange { index: 4, max: 3 })
        ));
        // repeated multiplication
        let c = cfg(3, 0.8);
        let mut t = 1.0;
        for _ in 0..7 {
            t *= 0.8;
        }
        assert!((c.transmission_level(7).unwrap() - t).abs() < 1e-15);
        assert!((t - 0.2097152).abs() < 1e-15);
    }

    #[test]
    fn codebook_b2() {
        let book = cfg(2, 0.5).build_codebook();
        let expect = [-1.0, -3.0 / 7.0, -1.0 / 7.0, 0.0, 1.0 / 7.0, 3.0 / 7.0, 1.0];
        assert_eq!(book.len(), 7);
        for (e, x) in book.entries.iter().zip(expect) {
            assert!((e.weight - x).abs() < 1e-15, "{} vs {}", e.weight, x);
        }
        assert_eq!(book.entries[3].levels, LevelPair::ZERO);
        assert_eq!(book.entries[3].weight, 0.0);
        assert_eq!(book.entries[0].weight, -1.0);
        assert_eq!(book.entries[6].weight, 1.0);
    }

    #[test]
    fn levels_examples() {
        let c = cfg(2, 0.5);
        assert_eq!(c.levels(1.0).unwrap(), LevelPair::new(3, 0));
        assert_eq!(c.levels(-1.0 / 7.0).unwrap(), LevelPair::new(0, -1));
        assert_eq!(c.levels(0.01).unwrap(), LevelPair::new(0, 0));
        assert!(matches!(c.levels(1.5), Err(Error::Domain(_))));
        assert!(c.levels(f64::NAN).is_err());
    }

    #[test]
    fn quantize_examples() {
        let c = cfg(2, 0.5);
        let (q, lp) = c.quantize(0.3).unwrap();
        assert!((q - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(lp, LevelPair::new(2, 0));
        assert_eq!(c.quantize(0.0).unwrap(), (0.0, LevelPair::ZERO));
        assert_eq!(c.quantize(-1.0).unwrap(), (-1.0, LevelPair::new(0, -3)));
    }

    #[test]
    fn dequantize_examples() {
        let c = cfg(2, 0.5);
        assert_eq!(c.dequantize(LevelPair::new(3, 0)).unwrap(), 1.0);
        assert!((c.dequantize(LevelPair::new(2, 0)).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(c.dequantize(LevelPair::ZERO).unwrap(), 0.0);
        assert!(matches!(
            c.dequantize(LevelPair::new(1, -1)),
            Err(Error::InvalidEncoding { .. })
        ));
        assert!(c.dequantize(LevelPair::new(4, 0)).is_err());
    }

    #[test]
    fn codebook_round_trip() {
        for bits in 2..=6 {
            for base in [0.3, 0.5, 0.8, 0.95] {
                let c = cfg(bits, base);
                let book = c.build_codebook();
                assert_eq!(book.len(), (1 << (bits + 1)) - 1);
                for e in &book.entries {
                    assert_eq!(c.quantize(e.weight).unwrap(), (e.weight, e.levels));
                }
                for pair in book.entries.windows(2) {
                    assert!(pair[0].weight < pair[1].weight);
                }
            }
        }
    }

    /// Level by threshold counting: the rounded exponent reaches `j + 1`
    /// exactly when `s|w| + delta <= c^(j + 1/2)`. No logarithms involved.
    fn threshold_level(c: &CellConfig, w: f64) -> i32 {
        let x = c.scale() * w.abs() + c.floor();
        let exponent = (0..c.max_level())
            .filter(|&j| x <= c.base().powf(j as f64 + 0.5))
            .count() as i32;
        let active = c.max_level() - exponent;
        if w >= 0.0 {
            active
        } else {
            -active
        }
    }

    proptest! {
        #[test]
        fn matches_threshold_oracle(bits in 2u32..=6, base in 0.2f64..0.95, w in -1.0f64..=1.0) {
            let c = cfg(bits, base);
            prop_assert_eq!(c.levels(w).unwrap().signed(), threshold_level(&c, w));
        }

        #[test]
        fn monotone_and_symmetric(bits in 2u32..=6, a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let c = cfg(bits, 0.7);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (qlo, llo) = c.quantize(lo).unwrap();
            let (qhi, lhi) = c.quantize(hi).unwrap();
            prop_assert!(qlo <= qhi);
            prop_assert!(llo.pos <= lhi.pos && llo.neg <= lhi.neg);
            prop_assert_eq!(c.quantize(-a).unwrap().0, -c.quantize(a).unwrap().0);
        }

        #[test]
        fn quantize_idempotent_and_sign_preserving(bits in 2u32..=6, w in -1.0f64..=1.0) {
            let c = cfg(bits, 0.6);
            let (q, _) = c.quantize(w).unwrap();
            prop_assert_eq!(c.quantize(q).unwrap().0, q);
            prop_assert!(q == 0.0 || q.signum() == w.signum());
        }
    }
}
