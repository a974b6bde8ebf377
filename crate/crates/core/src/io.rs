//! CSV ingestion for covariance matrices, factor histories, portfolios and
//! loadings.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sector::{SectorRecord, DEFAULT_SECTOR_MATURITY};
use crate::transmission::{ExposureRecord, SectorSensitivities};

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = open(path)?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?;
            rows.push(rec.iter().map(str::to_owned).collect());
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, path: &Path, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path, format!("missing column '{name}'")))
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Columns whose header starts with `prefix`, in file order.
    fn prefixed(&self, prefix: &str) -> Vec<usize> {
        (0..self.headers.len())
            .filter(|&j| self.headers[j].starts_with(prefix))
            .collect()
    }
}

fn number(path: &Path, row: usize, field: &str, text: &str) -> Result<f64> {
    let v: f64 = text
        .parse()
        .map_err(|_| Error::parse(path, format!("row {row}, {field}: cannot parse '{text}' as a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, format!("row {row}, {field}: non-finite value")));
    }
    Ok(v)
}

/// Numeric matrix with a header row of factor names.
fn numeric_matrix(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let table = Table::read(path)?;
    let cols = table.headers.len();
    if cols == 0 {
        return Err(Error::parse(path, "empty header"));
    }
    let mut values = Vec::with_capacity(table.rows.len() * cols);
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::parse(
                path,
                format!("row {} has {} fields, expected {cols}", i + 1, row.len()),
            ));
        }
        for (j, text) in row.iter().enumerate() {
            values.push(number(path, i + 1, &table.headers[j], text)?);
        }
    }
    Ok((DMatrix::from_row_slice(table.rows.len(), cols, &values), table.headers))
}

/// Covariance matrix: a header row of factor names followed by `d` rows.
pub fn read_covariance(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let (m, names) = numeric_matrix(path)?;
    if m.nrows() != m.ncols() {
        return Err(Error::parse(
            path,
            format!(
                "covariance must be square, got {} rows for {} factors",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    Ok((m, names))
}

/// Factor history: a header row of factor names followed by one row per period.
pub fn read_history(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    numeric_matrix(path)
}

/// Exposure file: `exposure_id, sector_id, ead, pd0, lgd0, rho[, maturity]`.
pub fn read_portfolio(path: &Path) -> Result<Vec<ExposureRecord>> {
    let t = Table::read(path)?;
    let [id, sector, ead, pd0, lgd0, rho] =
        ["exposure_id", "sector_id", "ead", "pd0", "lgd0", "rho"].map(|c| t.column(path, c));
    let (id, sector, ead, pd0, lgd0, rho) = (id?, sector?, ead?, pd0?, lgd0?, rho?);
    let maturity = t.optional_column("maturity");
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            Ok(ExposureRecord {
                exposure_id: r[id].clone(),
                sector_id: r[sector].clone(),
                ead: number(path, row, "ead", &r[ead])?,
                pd0: number(path, row, "pd0", &r[pd0])?,
                lgd0: number(path, row, "lgd0", &r[lgd0])?,
                rho: number(path, row, "rho", &r[rho])?,
                maturity: match maturity {
                    Some(m) => number(path, row, "maturity", &r[m])?,
                    None => DEFAULT_SECTOR_MATURITY,
                },
            })
        })
        .collect()
}

fn loadings(path: &Path, t: &Table, r: &[String], row: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let beta_cols = t.prefixed("beta");
    let gamma_cols = t.prefixed("gamma");
    if beta_cols.len() != gamma_cols.len() {
        return Err(Error::parse(
            path,
            format!(
                "{} beta columns but {} gamma columns",
                beta_cols.len(),
                gamma_cols.len()
            ),
        ));
    }
    let read = |cols: &[usize]| -> Result<Vec<f64>> {
        cols.iter().map(|&j| number(path, row, &t.headers[j], &r[j])).collect()
    };
    Ok((read(&beta_cols)?, read(&gamma_cols)?))
}

/// Sector loadings: `sector_id, delta, eta`, then `beta*` and `gamma*` columns
/// for the macro-financial factors in order.
pub fn read_sensitivities(path: &Path) -> Result<Vec<SectorSensitivities>> {
    let t = Table::read(path)?;
    let (id, delta, eta) = (
        t.column(path, "sector_id")?,
        t.column(path, "delta")?,
        t.column(path, "eta")?,
    );
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            let (beta, gamma) = loadings(path, &t, r, row)?;
            Ok(SectorSensitivities {
                sector_id: r[id].clone(),
                delta: number(path, row, "delta", &r[delta])?,
                eta: number(path, row, "eta", &r[eta])?,
                beta,
                gamma,
            })
        })
        .collect()
}

/// Sector-level portfolio: `sector_id, ead, pd0, lgd0, rho[, maturity], delta,
/// eta`, then `beta*` and `gamma*` columns.
pub fn read_sector_portfolio(path: &Path) -> Result<Vec<SectorRecord>> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = ["sector_id", "ead", "pd0", "lgd0", "rho", "delta", "eta"]
        .iter()
        .map(|c| t.column(path, c))
        .collect::<Result<_>>()?;
    let maturity = t.optional_column("maturity");
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            let num = |k: usize, name: &str| number(path, row, name, &r[cols[k]]);
            let (beta, gamma) = loadings(path, &t, r, row)?;
            Ok(SectorRecord {
                sector_id: r[cols[0]].clone(),
                ead: num(1, "ead")?,
                pd0: num(2, "pd0")?,
                lgd0: num(3, "lgd0")?,
                rho: num(4, "rho")?,
                maturity: match maturity {
                    Some(m) => number(path, row, "maturity", &r[m])?,
                    None => DEFAULT_SECTOR_MATURITY,
                },
                delta: num(5, "delta")?,
                eta: num(6, "eta")?,
                beta,
                gamma,
            })
        })
        .collect()
}

/// Linear-mode RWA coefficients `exposure_id, alpha`, aligned to `ids`.
pub fn read_alpha(path: &Path, ids: &[String]) -> Result<Vec<f64>> {
    let t = Table::read(path)?;
    let (id, alpha) = (t.column(path, "exposure_id")?, t.column(path, "alpha")?);
    let mut by_id = HashMap::new();
    for (i, r) in t.rows.iter().enumerate() {
        let v = number(path, i + 1, "alpha", &r[alpha])?;
        if by_id.insert(r[id].clone(), v).is_some() {
            return Err(Error::parse(path, format!("duplicate exposure {}", r[id])));
        }
    }
    ids.iter()
        .map(|e| {
            by_id
                .get(e)
                .copied()
                .ok_or_else(|| Error::parse(path, format!("no alpha for exposure {e}")))
        })
        .collect()
}
