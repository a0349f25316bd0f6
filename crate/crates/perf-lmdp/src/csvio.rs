//! Matrix and dataset snapshots.
//!
//! Matrices are row-major CSV below a one-line header
//! `# rows=<m> cols=<n> name=<id>`; floats carry 17 significant digits so a
//! write/read cycle is exact. Datasets use the columns `s0,s,a,r,s_next`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use perf_lmdp_core::sampling::{Dataset, Transition};
use perf_lmdp_core::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// `{:.16e}`: one digit before the point and sixteen after.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub fn format_matrix(name: &str, m: &DMatrix<f64>) -> String {
    let mut out = format!("# rows={} cols={} name={}\n", m.nrows(), m.ncols(), name);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, name: &str, m: &DMatrix<f64>) -> Result<(), CliError> {
    fs::write(path, format_matrix(name, m)).map_err(|e| CliError::io(path, e))
}

pub fn write_vector(path: &Path, name: &str, v: &DVector<f64>) -> Result<(), CliError> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    write_matrix(path, name, &m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub matrix: DMatrix<f64>,
}

fn parse_header(line: &str, path: &Path) -> Result<(usize, usize, String), CliError> {
    let bad = || CliError::Config(format!("{}:1: expected `# rows=<m> cols=<n> name=<id>`, got {:?}", path.display(), line));
    let body = line.strip_prefix('#').ok_or_else(bad)?;
    let (mut rows, mut cols, mut name) = (None, None, None);
    for field in body.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "rows" => rows = Some(v.parse::<usize>().map_err(|_| bad())?),
            "cols" => cols = Some(v.parse::<usize>().map_err(|_| bad())?),
            "name" => name = Some(v.to_string()),
            _ => return Err(bad()),
        }
    }
    match (rows, cols, name) {
        (Some(r), Some(c), Some(n)) => Ok((r, c, n)),
        _ => Err(bad()),
    }
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<NamedMatrix, CliError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::Config(format!("{}: empty matrix file", path.display())))?;
    let (rows, cols, name) = parse_header(header.trim(), path)?;
    let body: String = lines.collect::<Vec<_>>().join("\n");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut data = Vec::with_capacity(rows * cols);
    let mut count = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}:{}: {}", path.display(), i + 2, e)))?;
        if rec.len() != cols {
            return Err(CliError::Config(format!(
                "{}:{}: expected {} columns, found {}",
                path.display(),
                i + 2,
                cols,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let x: f64 = field
                .parse()
                .map_err(|_| CliError::Config(format!("{}:{}: not a number: {:?}", path.display(), i + 2, field)))?;
            data.push(x);
        }
        count += 1;
    }
    if count != rows {
        return Err(CliError::Config(format!("{}: header says {} rows, found {}", path.display(), rows, count)));
    }
    Ok(NamedMatrix {
        name,
        matrix: DMatrix::from_row_slice(rows, cols, &data),
    })
}

pub fn read_matrix(path: &Path) -> Result<NamedMatrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    parse_matrix(&text, path)
}

/// Reads a single-column matrix as a vector.
pub fn read_vector(path: &Path) -> Result<DVector<f64>, CliError> {
    let m = read_matrix(path)?.matrix;
    if m.ncols() != 1 {
        return Err(CliError::Config(format!("{}: expected one column, found {}", path.display(), m.ncols())));
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    s0: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "s0,s,a,r,s_next").map_err(io)?;
    for t in &data.tuples {
        writeln!(w, "{},{},{},{},{}", t.s0, t.s, t.a, fmt_f64(t.r), t.s_next).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::missing(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}:1: {}", path.display(), e)))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["s0", "s", "a", "r", "s_next"] {
        return Err(CliError::Config(format!("{}:1: expected header s0,s,a,r,s_next", path.display())));
    }
    let mut tuples = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| CliError::Config(format!("{}:{}: {}", path.display(), i + 2, e)))?;
        tuples.push(Transition {
            s0: row.s0,
            s: row.s,
            a: row.a,
            r: row.r,
            s_next: row.s_next,
        });
    }
    Ok(Dataset {
        tuples,
        weights: None,
        round: 0,
        seed: 0,
    })
}

/// Integers one per line (blank lines and `#` comments skipped).
pub fn read_int_list(path: &Path) -> Result<Vec<usize>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::missing(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| CliError::Config(format!("{}:{}: not a positive integer: {:?}", path.display(), i + 1, t)))?,
        );
    }
    Ok(out)
}
