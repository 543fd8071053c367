//! CSV interchange for samples, plans and result tables.
//!
//! Sample files carry a header naming the model's nodes in any order plus an
//! optional `weight` column. Lines starting with `#` are comments, which is
//! where tools put their metadata.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ot::TransportPlan;
use crate::scm::{SampleMatrix, Space};

pub const WEIGHT_COLUMN: &str = "weight";

fn csv_error(source: &str, e: csv::Error) -> Error {
    let at = e
        .position()
        .map(|p| format!(" (line {})", p.line()))
        .unwrap_or_default();
    Error::invalid(source, format!("{e}{at}"))
}

/// Reads a sample whose columns are matched to `names` by header.
/// Weights, when present, are normalized to sum to one.
pub fn read_samples<R: Read>(reader: R, names: &[String], space: Space, source: &str) -> Result<SampleMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let mut columns = Vec::with_capacity(names.len());
    for name in names {
        let col = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("{source}.{name}"), "missing column"))?;
        columns.push(col);
    }
    let weight_col = header.iter().position(|h| h == WEIGHT_COLUMN);
    if let Some(extra) = header
        .iter()
        .find(|h| *h != WEIGHT_COLUMN && !names.iter().any(|n| n == h))
    {
        return Err(Error::invalid(
            format!("{source}.{extra}"),
            "column does not name a model node",
        ));
    }

    let mut values = Vec::new();
    let mut weights = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let parse = |col: usize, what: &str| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::invalid(
                        format!("{source}[{}].{what}", r + 1),
                        format!("expected a finite number, got `{cell}`"),
                    )
                })
        };
        for (name, &col) in names.iter().zip(&columns) {
            values.push(parse(col, name)?);
        }
        if let Some(col) = weight_col {
            weights.push(parse(col, WEIGHT_COLUMN)?);
        }
    }
    if values.is_empty() {
        return Err(Error::invalid(source, "no sample rows"));
    }
    let rows = Array2::from_shape_vec((values.len() / names.len(), names.len()), values)
        .expect("row length matches the column count");
    if weight_col.is_some() {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || total <= 0.0 {
            return Err(Error::invalid(
                format!("{source}.{WEIGHT_COLUMN}"),
                "weights must be nonnegative with a positive total",
            ));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        SampleMatrix::with_weights(rows, weights, space)
    } else {
        SampleMatrix::new(rows, space)
    }
}

pub fn read_samples_path(path: &Path, names: &[String], space: Space) -> Result<SampleMatrix> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::invalid(&shown, e.to_string()))?;
    read_samples(file, names, space, &shown)
}

/// Writes a sample with a header of node names. A `weight` column is added
/// only when the weights are not uniform.
pub fn write_samples<W: Write>(writer: W, samples: &SampleMatrix, names: &[String]) -> Result<()> {
    let uniform = {
        let w0 = 1.0 / samples.len() as f64;
        samples.weights().iter().all(|w| (w - w0).abs() <= 1e-15)
    };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    if !uniform {
        header.push(WEIGHT_COLUMN);
    }
    wtr.write_record(&header).map_err(|e| csv_error("output", e))?;
    for (row, w) in samples.rows().outer_iter().zip(samples.weights()) {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if !uniform {
            cells.push(w.to_string());
        }
        wtr.write_record(&cells).map_err(|e| csv_error("output", e))?;
    }
    wtr.flush().map_err(|e| Error::invalid("output", e.to_string()))
}

/// Writes the positive entries of a grid plan as
/// `src_<name>..., tgt_<name>..., mass` in exogenous coordinates.
pub fn write_plan<W: Write>(writer: W, plan: &TransportPlan, names: &[String]) -> Result<()> {
    let n = plan.n();
    if names.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: names.len(),
        });
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = names
        .iter()
        .map(|s| format!("src_{s}"))
        .chain(names.iter().map(|s| format!("tgt_{s}")))
        .chain(std::iter::once("mass".to_string()))
        .collect();
    wtr.write_record(&header).map_err(|e| csv_error("output", e))?;
    for (index, &mass) in plan.mass().indexed_iter() {
        if mass <= 0.0 {
            continue;
        }
        let mut cells: Vec<String> = (0..2 * n)
            .map(|k| plan.axes()[k].values()[index[k]].to_string())
            .collect();
        cells.push(mass.to_string());
        wtr.write_record(&cells).map_err(|e| csv_error("output", e))?;
    }
    wtr.flush().map_err(|e| Error::invalid("output", e.to_string()))
}

/// Writes serializable rows with a header taken from the field names.
pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row).map_err(|e| csv_error("output", e))?;
    }
    wtr.flush().map_err(|e| Error::invalid("output", e.to_string()))
}
