//! Attention maps as CSV (exact values) and 8-bit binary PGM (row = query,
//! column = frame) with the intensity range in a JSON sidecar.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use tformer_core::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

pub fn to_csv(map: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..map.rows() {
        let cells: Vec<String> = map.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).expect("write to string");
    }
    out
}

/// Linear scaling of `[min, max]` onto `0..=255`; a constant map is all zeros.
pub fn to_pgm(map: &Tensor) -> (Vec<u8>, Range) {
    let data = map.data();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    out.extend(data.iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    (out, Range { min, max })
}

/// Writes `{stem}.csv`, `{stem}.pgm` and `{stem}.json` under `dir`.
pub fn write_all(dir: &Path, stem: &str, map: &Tensor) -> std::io::Result<()> {
    std::fs::write(dir.join(format!("{stem}.csv")), to_csv(map))?;
    let (pgm, range) = to_pgm(map);
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    let sidecar = serde_json::to_string_pretty(&range).expect("range serializes");
    std::fs::write(dir.join(format!("{stem}.json")), sidecar)
}
