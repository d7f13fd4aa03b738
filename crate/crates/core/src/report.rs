//! Reports and their deterministic renderings.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::aging::RowOrder;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::reorder::PtcPermutation;
use crate::write::WriteStats;

pub const CSV_HEADER: &str = "layer,total_writes,max_writes,writes_a_to_c,writes_c_to_a,energy_units";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: "elight".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Mapping deviation before and after row remapping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RemapSummary {
    pub identity_md: f64,
    pub remapped_md: f64,
    pub stuck_wires: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub total_writes: u64,
    /// Largest cumulative write count of any cell, first programming included.
    pub max_writes: u64,
    pub writes_a_to_c: u64,
    pub writes_c_to_a: u64,
    pub energy_units: f64,
    pub initial_writes: u64,
    pub max_rewrites: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<RemapSummary>,
}

impl LayerRow {
    pub fn from_stats(name: &str, s: &WriteStats) -> Self {
        LayerRow {
            name: name.into(),
            total_writes: s.total_writes,
            max_writes: s.max_cell_writes,
            writes_a_to_c: s.writes_a_to_c,
            writes_c_to_a: s.writes_c_to_a,
            energy_units: s.energy_units,
            initial_writes: s.initial_writes,
            max_rewrites: s.max_cell_rewrites,
            remap: None,
        }
    }
}

/// Column sums over layers; `max_writes` and `max_rewrites` are maxima.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub total_writes: u64,
    pub max_writes: u64,
    pub writes_a_to_c: u64,
    pub writes_c_to_a: u64,
    pub energy_units: f64,
    pub initial_writes: u64,
    pub max_rewrites: u64,
}

impl Totals {
    pub fn from_rows(rows: &[LayerRow]) -> Self {
        rows.iter().fold(Totals::default(), |t, r| Totals {
            total_writes: t.total_writes + r.total_writes,
            max_writes: t.max_writes.max(r.max_writes),
            writes_a_to_c: t.writes_a_to_c + r.writes_a_to_c,
            writes_c_to_a: t.writes_c_to_a + r.writes_c_to_a,
            energy_units: t.energy_units + r.energy_units,
            initial_writes: t.initial_writes + r.initial_writes,
            max_rewrites: t.max_rewrites.max(r.max_rewrites),
        })
    }
}

/// Routing metadata needed to run a transformed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_permutations: Option<Vec<PtcPermutation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_orders: Option<Vec<RowOrder>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Phases {
    pub reorder: bool,
    pub remap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub model: String,
    pub config: RunConfig,
    pub phases: Phases,
    pub layers: Vec<LayerRow>,
    pub totals: Totals,
    pub audit: Vec<LayerAudit>,
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<report>".into(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        render_json(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut line = |name: &str, tw: u64, mw: u64, ac: u64, ca: u64, e: f64| {
            out.push_str(&format!("{},{tw},{mw},{ac},{ca},{}\n", csv_field(name), fmt_f64(e)));
        };
        for r in &self.layers {
            line(
                &r.name,
                r.total_writes,
                r.max_writes,
                r.writes_a_to_c,
                r.writes_c_to_a,
                r.energy_units,
            );
        }
        let t = &self.totals;
        line(
            "__total__",
            t.total_writes,
            t.max_writes,
            t.writes_a_to_c,
            t.writes_c_to_a,
            t.energy_units,
        );
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct FixedFloats<'a>(PrettyFormatter<'a>);

impl Formatter for FixedFloats<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with keys sorted and every float in `{:.16e}` form.
pub fn render_json<T: Serialize>(value: &T) -> String {
    // Going through `Value` sorts object keys.
    let v = serde_json::to_value(value).expect("report serializes");
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats(PrettyFormatter::new()));
    v.serialize(&mut ser).expect("writing to memory");
    let mut s = String::from_utf8(buf).expect("json is utf-8");
    s.push('\n');
    s
}
