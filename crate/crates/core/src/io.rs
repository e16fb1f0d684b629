//! On-disk formats: JSON records and flat CSV arrays with complex entries
//! written as interleaved `re,im` pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridGeometry};
use crate::linalg::{CMat, CVec, C64};
use crate::manifold::PhasePoint;
use crate::transport::{ScatterSample, ScatteringData};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn push_complex(line: &mut String, z: C64) {
    // `{}` on f64 prints the shortest representation that parses back exactly.
    let _ = write!(line, ",{},{}", z.re, z.im);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub dims: Vec<usize>,
    /// `[lo, hi]` per axis.
    pub bounds: Vec<[f64; 2]>,
    #[serde(rename = "N")]
    pub fiber: usize,
    pub block: usize,
    pub mode: String,
}

/// Header plus CSV body, one row per node in storage order.
pub fn grid_field_parts(field: &GridField, mode: &str) -> (GridHeader, String) {
    let g = &field.geometry;
    let bounds = (0..g.axes()).map(|a| [g.lo[a], g.lo[a] + g.step[a] * (g.dims[a].max(1) - 1) as f64]).collect();
    let header = GridHeader { dims: g.dims.clone(), bounds, fiber: field.fiber, block: field.block, mode: mode.to_string() };
    let mut csv = String::from("node");
    for k in 0..field.width() {
        let _ = write!(csv, ",re{k},im{k}");
    }
    csv.push('\n');
    for i in 0..g.len() {
        let mut line = i.to_string();
        for &z in field.node(i) {
            push_complex(&mut line, z);
        }
        csv.push_str(&line);
        csv.push('\n');
    }
    (header, csv)
}

pub fn grid_field_from_parts(header: &GridHeader, csv: &str) -> Result<GridField> {
    let lo: Vec<f64> = header.bounds.iter().map(|b| b[0]).collect();
    let hi: Vec<f64> = header.bounds.iter().map(|b| b[1]).collect();
    let geometry = GridGeometry::spanning(header.dims.clone(), &lo, &hi);
    let mut field = GridField::zeros(geometry, header.block, header.fiber);
    let w = field.width();
    let mut rows = 0;
    for (r, line) in csv.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + 2 * w || r >= field.geometry.len() {
            return Err(Error::Invalid(format!("grid csv row {r} has {} cells, expected {}", cells.len(), 1 + 2 * w)));
        }
        for k in 0..w {
            let re = parse_cell(cells[1 + 2 * k])?;
            let im = parse_cell(cells[2 + 2 * k])?;
            field.values[r * w + k] = C64::new(re, im);
        }
        rows += 1;
    }
    if rows != field.geometry.len() {
        return Err(Error::Invalid(format!("grid csv has {rows} rows, expected {}", field.geometry.len())));
    }
    Ok(field)
}

fn parse_cell(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Invalid(format!("bad number {s:?}")))
}

/// Writes `<base>.json` and `<base>.csv`.
pub fn write_grid_field(base: &Path, field: &GridField, mode: &str) -> Result<()> {
    let (header, csv) = grid_field_parts(field, mode);
    write_json(&base.with_extension("json"), &header)?;
    fs::write(base.with_extension("csv"), csv)?;
    Ok(())
}

pub fn read_grid_field(base: &Path) -> Result<GridField> {
    let header: GridHeader = read_json(&base.with_extension("json"))?;
    grid_field_from_parts(&header, &fs::read_to_string(base.with_extension("csv"))?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScatterRecord {
    x: Vec<f64>,
    v: Vec<f64>,
    #[serde(rename = "C_re")]
    c_re: Vec<Vec<f64>>,
    #[serde(rename = "C_im")]
    c_im: Vec<Vec<f64>>,
}

pub fn scattering_to_json(data: &ScatteringData) -> Result<String> {
    let recs: Vec<ScatterRecord> = data
        .samples
        .iter()
        .map(|s| ScatterRecord {
            x: s.point.x.clone(),
            v: s.point.v.clone(),
            c_re: s.c.row_iter().map(|r| r.iter().map(|z| z.re).collect()).collect(),
            c_im: s.c.row_iter().map(|r| r.iter().map(|z| z.im).collect()).collect(),
        })
        .collect();
    Ok(serde_json::to_string(&recs)?)
}

pub fn scattering_from_json(text: &str, pair_id: &str) -> Result<ScatteringData> {
    let recs: Vec<ScatterRecord> = serde_json::from_str(text)?;
    let mut samples = Vec::with_capacity(recs.len());
    for r in recs {
        let n = r.c_re.len();
        if r.c_im.len() != n || r.c_re.iter().chain(&r.c_im).any(|row| row.len() != n) {
            return Err(Error::Invalid("scattering matrix is not square".into()));
        }
        let c = CMat::from_fn(n, n, |i, j| C64::new(r.c_re[i][j], r.c_im[i][j]));
        samples.push(ScatterSample { point: PhasePoint::new(r.x, r.v), c });
    }
    Ok(ScatteringData { samples, pair_id: pair_id.to_string() })
}

/// `t` followed by the row-major matrix entries.
pub fn history_csv(t: &[f64], mats: &[CMat]) -> String {
    let (r, c) = mats.first().map_or((0, 0), |m| m.shape());
    let mut out = String::from("t");
    for i in 0..r {
        for j in 0..c {
            let _ = write!(out, ",re{i}{j},im{i}{j}");
        }
    }
    out.push('\n');
    for (tk, m) in t.iter().zip(mats) {
        let mut line = tk.to_string();
        for i in 0..r {
            for j in 0..c {
                push_complex(&mut line, m[(i, j)]);
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// One row per chord: entry point, direction, transform value.
pub fn transform_csv(entries: &[PhasePoint], values: &[CVec]) -> String {
    let n = entries.first().map_or(0, |p| p.x.len());
    let nf = values.first().map_or(0, |v| v.len());
    let mut out = String::new();
    let cols: Vec<String> = (0..n)
        .map(|i| format!("x{i}"))
        .chain((0..n).map(|i| format!("v{i}")))
        .chain((0..nf).flat_map(|k| [format!("re{k}"), format!("im{k}")]))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for (p, val) in entries.iter().zip(values) {
        let mut cells: Vec<String> = p.x.iter().chain(&p.v).map(|c| c.to_string()).collect();
        for z in val.iter() {
            cells.push(z.re.to_string());
            cells.push(z.im.to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
