//! Text formats: FROSTT-style `.tns` tensors and CSV factor matrices.
//!
//! A `.tns` file may start with `#` comment lines. The first non-comment
//! line holds the `N` extents; every following line holds `N` one-based
//! coordinates and a value. Coordinates that are never listed are zero and
//! repeated coordinates accumulate.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{for_each_index, FactorModel, Tensor};

pub fn read_tns(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tns(BufReader::new(file), path)
}

pub fn parse_tns(reader: impl BufRead, path: &Path) -> Result<Tensor> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match &shape {
            None => {
                let dims = fields
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(lineno, format!("bad extent: {e}")))?;
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(parse_err(lineno, format!("invalid shape {dims:?}")));
                }
                data = vec![0.0; dims.iter().product()];
                shape = Some(dims);
            }
            Some(dims) => {
                if fields.len() != dims.len() + 1 {
                    return Err(parse_err(
                        lineno,
                        format!("expected {} fields, found {}", dims.len() + 1, fields.len()),
                    ));
                }
                let mut off = 0;
                for (k, (f, &n)) in fields.iter().zip(dims).enumerate() {
                    let c: usize = f
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad coordinate `{f}`: {e}")))?;
                    if c == 0 || c > n {
                        return Err(parse_err(
                            lineno,
                            format!("coordinate {c} out of range 1..={n} for mode {k}"),
                        ));
                    }
                    off = off * n + (c - 1);
                }
                let raw = fields[dims.len()];
                let v: f64 = raw
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("bad value `{raw}`: {e}")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(parse_err(lineno, format!("value {v} must be finite and >= 0")));
                }
                data[off] += v;
            }
        }
    }
    let shape = shape.ok_or_else(|| parse_err(0, "missing shape line".into()))?;
    Tensor::new(shape, data)
}

/// Writes only the non-zero entries; output is byte-identical for equal tensors.
pub fn write_tns(path: &Path, t: &Tensor, comment: Option<&str>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        for l in c.lines() {
            writeln!(w, "# {l}").map_err(io)?;
        }
    }
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{}", dims.join(" ")).map_err(io)?;
    let mut result = Ok(());
    let data = t.data();
    for_each_index(t.shape(), |off, idx| {
        if result.is_err() || data[off] == 0.0 {
            return;
        }
        let mut line = String::new();
        for &i in idx {
            line.push_str(&(i + 1).to_string());
            line.push(' ');
        }
        line.push_str(&format_value(data[off]));
        result = writeln!(w, "{line}");
    });
    result.map_err(io)?;
    w.flush().map_err(io)
}

pub(crate) fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn write_factor_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("factor_{c}")).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_factor_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let ncols = header.split(',').count();
    let mut values = Vec::new();
    let mut nrows = 0;
    for (i, line) in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad number: {e}")))?;
        if row.len() != ncols {
            return Err(parse_err(
                i + 1,
                format!("expected {ncols} columns, found {}", row.len()),
            ));
        }
        values.extend(row);
        nrows += 1;
    }
    Array2::from_shape_vec((nrows, ncols), values).map_err(|e| Error::invalid(e.to_string()))
}

/// Writes `mode_<k>.csv` for every mode into `dir`.
pub fn write_model_dir(dir: &Path, m: &FactorModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in m.factors().iter().enumerate() {
        write_factor_csv(&dir.join(format!("mode_{k}.csv")), f)?;
    }
    Ok(())
}

/// Reads consecutive `mode_<k>.csv` files starting at `mode_0.csv`.
pub fn read_model_dir(dir: &Path) -> Result<FactorModel> {
    let mut factors = Vec::new();
    loop {
        let p = dir.join(format!("mode_{}.csv", factors.len()));
        if !p.exists() {
            break;
        }
        factors.push(read_factor_csv(&p)?);
    }
    if factors.is_empty() {
        return Err(Error::invalid(format!("no mode_<k>.csv files in {}", dir.display())));
    }
    FactorModel::new(factors)
}
