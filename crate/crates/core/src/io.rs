//! Long-format CSV input and output.
//!
//! Datasets are `id,timepoint,<payload...>` with one row per observed
//! record. For quantile payloads the payload header cells are the grid
//! probabilities. Covariates are `id,<feature...>`.

use std::collections::HashMap;
use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::data::{
    validate_dataset, Observation, ObservationKind, PairedDataset, ProbabilityGrid, QuantileFunction, Record,
    Timepoint,
};
use crate::error::{Error, Result};

/// How to read the payload columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PayloadFormat {
    /// Quantile when the payload headers form a probability grid, scalar for
    /// a single column, vector otherwise.
    #[default]
    Auto,
    Scalar,
    Vector,
    Quantile,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn parse_number(path: &Path, line: u64, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a number, found {cell:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(path, line, format!("non-finite value {cell:?}")))
    }
}

fn header_grid(cells: &[&str]) -> Option<Vec<f64>> {
    let pts: Vec<f64> = cells.iter().map(|c| c.parse().ok()).collect::<Option<_>>()?;
    ProbabilityGrid::new(pts.clone()).ok().map(|_| pts)
}

/// Reads raw records from a long-format CSV.
pub fn read_records(path: &Path, format: PayloadFormat) -> Result<Vec<Record>> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 3 {
        return Err(parse_err(path, 1, "expected header id,timepoint,<payload...>"));
    }
    let payload: Vec<&str> = headers.iter().skip(2).collect();
    let kind = match format {
        PayloadFormat::Scalar => ObservationKind::Scalar,
        PayloadFormat::Vector => ObservationKind::Vector,
        PayloadFormat::Quantile => ObservationKind::Quantile,
        PayloadFormat::Auto if header_grid(&payload).is_some() => ObservationKind::Quantile,
        PayloadFormat::Auto if payload.len() == 1 => ObservationKind::Scalar,
        PayloadFormat::Auto => ObservationKind::Vector,
    };
    if kind == ObservationKind::Scalar && payload.len() != 1 {
        return Err(parse_err(path, 1, "scalar payload needs exactly one column"));
    }
    let grid = match kind {
        ObservationKind::Quantile => {
            let pts = header_grid(&payload)
                .ok_or_else(|| parse_err(path, 1, "quantile header must list grid probabilities in (0, 1)"))?;
            Some(ProbabilityGrid::new(pts).map_err(|e| parse_err(path, 1, e.to_string()))?)
        }
        _ => None,
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        let timepoint = Timepoint::try_from(&row[1]).map_err(|e| parse_err(path, line, e.to_string()))?;
        if !seen.insert((id.clone(), timepoint)) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate record for id {id:?} at timepoint {timepoint}"),
            ));
        }
        let values = row
            .iter()
            .skip(2)
            .map(|c| parse_number(path, line, c))
            .collect::<Result<Vec<f64>>>()?;
        let observation = match kind {
            ObservationKind::Scalar => Observation::Scalar(values[0]),
            ObservationKind::Vector => Observation::Vector(values),
            ObservationKind::Quantile => Observation::Quantile(
                QuantileFunction::new(grid.clone().expect("grid parsed"), values)
                    .map_err(|e| parse_err(path, line, e.to_string()))?,
            ),
        };
        records.push(Record {
            id,
            timepoint,
            observation,
        });
    }
    Ok(records)
}

/// Reads and validates a dataset.
pub fn read_dataset(path: &Path, format: PayloadFormat) -> Result<PairedDataset> {
    validate_dataset(read_records(path, format)?)
}

/// Reads a covariates table keyed by id.
pub fn read_covariates(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(parse_err(path, 1, "expected header id,<feature...>"));
    }
    let mut table = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let values = row
            .iter()
            .skip(1)
            .map(|c| parse_number(path, line, c))
            .collect::<Result<Vec<f64>>>()?;
        if table.insert(row[0].to_string(), values).is_some() {
            return Err(parse_err(path, line, format!("duplicate covariates for id {:?}", &row[0])));
        }
    }
    Ok(table)
}

/// Reads the first column of a CSV as a numeric sample. A non-numeric first
/// row is treated as a header.
pub fn read_sample(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = row.get(0).unwrap_or("");
        if i == 0 && cell.parse::<f64>().is_err() {
            continue;
        }
        out.push(parse_number(path, line, cell)?);
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no sample values"));
    }
    Ok(out)
}

/// Formats a float so that it parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rows<W: Write>(w: &mut csv::Writer<W>, path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes a dataset in long format (layout order, first timepoint first).
pub fn write_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    let records = ds.to_records();
    let mut header = vec!["id".to_string(), "timepoint".to_string()];
    match records.first().map(|r| &r.observation) {
        Some(Observation::Quantile(q)) => header.extend(q.grid().points().iter().map(|&t| fmt_f64(t))),
        Some(Observation::Vector(v)) => header.extend((1..=v.len()).map(|i| format!("x{i}"))),
        _ => header.push("value".into()),
    }
    let rows = std::iter::once(header).chain(records.iter().map(|r| {
        let mut row = vec![r.id.clone(), r.timepoint.to_string()];
        row.extend(r.observation.values().iter().map(|&v| fmt_f64(v)));
        row
    }));
    write_rows(&mut create(path)?, path, rows)
}

/// Writes the covariate rows attached to a dataset.
pub fn write_covariates(ds: &PairedDataset, names: &[&str], path: &Path) -> Result<()> {
    let cov = ds
        .covariates()
        .ok_or_else(|| Error::InvalidParameter("dataset has no covariates".into()))?;
    let header = std::iter::once("id".to_string())
        .chain(names.iter().map(|s| s.to_string()))
        .collect();
    let rows = std::iter::once(header).chain(ds.first_observed_ids().zip(cov).map(|(id, row)| {
        std::iter::once(id.to_string())
            .chain(row.iter().map(|&v| fmt_f64(v)))
            .collect()
    }));
    write_rows(&mut create(path)?, path, rows)
}

/// Writes rows of strings (first row is the header).
pub fn write_table(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_rows(&mut create(path)?, path, rows)
}
