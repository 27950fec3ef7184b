//! Fixed CSV schemas. Reals are printed with 17 significant digits so that a
//! parse of the file returns bitwise-equal values.

use std::path::Path;

use crate::blob::write_atomic;
use crate::error::{Result, VllError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColKind {
    Int,
    Real,
    /// Real that may be absent (written as an empty field).
    OptReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Curve,
    Theory,
    Phalf,
    Mc,
    Methods,
}

impl Schema {
    pub fn columns(self) -> &'static [(&'static str, ColKind)] {
        use ColKind::*;
        match self {
            Schema::Curve => &[
                ("p", Int),
                ("eg_mean", Real),
                ("eg_std", Real),
                ("eg_ensembled", Real),
                ("bias_sq", OptReal),
                ("v_init", OptReal),
                ("v_dataset", OptReal),
                ("v_cross", OptReal),
            ],
            Schema::Theory => &[
                ("p", Real),
                ("q", Real),
                ("q_hat", Real),
                ("gamma", Real),
                ("v", OptReal),
                ("v_hat", OptReal),
                ("eg", Real),
                ("iters", Int),
                ("residual", Real),
            ],
            Schema::Phalf => {
                &[("n", Int), ("alpha", OptReal), ("p_half", OptReal), ("bracket_lo", OptReal), ("bracket_hi", OptReal)]
            }
            Schema::Mc => &[("p", Int), ("eg_mean", Real), ("eg_std", Real), ("eg_theory", Real)],
            Schema::Methods => &[
                ("p", Int),
                ("n", Int),
                ("alpha", Real),
                ("eg_single", Real),
                ("eg_pred_avg", Real),
                ("eg_kernel_avg", Real),
                ("eg_feature_avg", Real),
            ],
        }
    }

    pub fn header(self) -> Vec<&'static str> {
        self.columns().iter().map(|c| c.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Field {
    Int(i64),
    Real(f64),
    Missing,
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::Real(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Int(v as i64)
    }
}

impl From<Option<f64>> for Field {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Field::Missing, Field::Real)
    }
}

pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn render(schema: Schema, row: &[Field]) -> Result<Vec<String>> {
    let cols = schema.columns();
    if row.len() != cols.len() {
        return Err(VllError::Schema(format!("row has {} fields, schema has {}", row.len(), cols.len())));
    }
    cols.iter()
        .zip(row)
        .map(|((name, kind), f)| match (kind, f) {
            (ColKind::Int, Field::Int(i)) => Ok(i.to_string()),
            (ColKind::Real | ColKind::OptReal, Field::Real(v)) => Ok(format_real(*v)),
            (ColKind::OptReal, Field::Missing) => Ok(String::new()),
            _ => Err(VllError::Schema(format!("column '{name}' expects {kind:?}, got {f:?}"))),
        })
        .collect()
}

pub fn to_csv_bytes(rows: &[Vec<Field>], schema: Schema) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let csv_err = |e: csv::Error| VllError::Schema(e.to_string());
    w.write_record(schema.header()).map_err(csv_err)?;
    for row in rows {
        w.write_record(render(schema, row)?).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| VllError::Schema(e.to_string()))
}

/// Validate `rows` against `schema` and write them atomically.
pub fn emit_csv(path: &Path, rows: &[Vec<Field>], schema: Schema) -> Result<()> {
    write_atomic(path, &to_csv_bytes(rows, schema)?)
}

/// Parse a file written with `schema` back into fields.
pub fn read_csv(path: &Path, schema: Schema) -> Result<Vec<Vec<Field>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| VllError::Schema(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers().map_err(|e| VllError::Schema(e.to_string()))?.iter().map(String::from).collect();
    if header != schema.header() {
        return Err(VllError::Schema(format!("{}: header {:?} does not match {:?}", path.display(), header, schema.header())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| VllError::Schema(e.to_string()))?;
        let row = schema
            .columns()
            .iter()
            .zip(rec.iter())
            .map(|((name, kind), s)| {
                let bad = || VllError::Schema(format!("{}: bad value '{s}' in column '{name}'", path.display()));
                match kind {
                    ColKind::Int => s.parse().map(Field::Int).map_err(|_| bad()),
                    _ if s.is_empty() && *kind == ColKind::OptReal => Ok(Field::Missing),
                    _ => s.parse().map(Field::Real).map_err(|_| bad()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

impl Field {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Field::Int(i) => Some(*i as f64),
            Field::Real(v) => Some(*v),
            Field::Missing => None,
        }
    }
}
