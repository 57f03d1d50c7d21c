//! Lossless float formatting for JSON and CSV artifacts.
//!
//! Every float written by this crate uses 17 significant digits in
//! scientific notation, so artifacts round-trip bit-exactly and diff cleanly.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

/// Formats `x` with 17 significant digits. Non-finite values become `null`
/// in JSON contexts and the literal Rust spelling in CSV.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of negative zero out of artifacts
        return "0.0000000000000000e0".to_string();
    }
    format!("{:.16e}", x)
}

/// A float that serializes with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sig17(pub f64);

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        let raw = RawValue::from_string(fmt17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sig17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Option::<f64>::deserialize(d)?;
        Ok(Sig17(v.unwrap_or(f64::NAN)))
    }
}

impl From<f64> for Sig17 {
    fn from(x: f64) -> Self {
        Sig17(x)
    }
}

pub fn sig_vec(xs: &[f64]) -> Vec<Sig17> {
    xs.iter().copied().map(Sig17).collect()
}

pub fn sig_mat(rows: &[Vec<f64>]) -> Vec<Vec<Sig17>> {
    rows.iter().map(|r| sig_vec(r)).collect()
}

/// Minimal CSV table: a header and rows of preformatted cells.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Serializes a value to pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact types always serialize");
    s.push('\n');
    s
}
