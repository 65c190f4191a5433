//! Cell-level counts to a sample × cell type × gene pseudobulk tensor.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use log::warn;

use crate::error::{Error, Result};
use crate::io::write_tns;
use crate::tensor::Tensor;

/// One `(sample, cell type, gene, count)` observation, as vocabulary indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub sample: usize,
    pub cell_type: usize,
    pub gene: usize,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountTriplets {
    pub records: Vec<Record>,
    pub samples: IndexSet<String>,
    pub cell_types: IndexSet<String>,
    pub genes: IndexSet<String>,
}

impl CountTriplets {
    pub fn push(&mut self, sample: &str, cell_type: &str, gene: &str, count: u64) {
        let (sample, _) = self.samples.insert_full(sample.to_string());
        let (cell_type, _) = self.cell_types.insert_full(cell_type.to_string());
        let (gene, _) = self.genes.insert_full(gene.to_string());
        self.records.push(Record {
            sample,
            cell_type,
            gene,
            count,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| r.count).sum()
    }

    pub fn gene_totals(&self) -> Vec<u64> {
        let mut totals = vec![0; self.genes.len()];
        for r in &self.records {
            totals[r.gene] += r.count;
        }
        totals
    }
}

fn is_number(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

fn parse_count(field: &str, path: &Path, line: usize) -> Result<u64> {
    let field = field.trim();
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if let Ok(v) = field.parse::<u64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(parse_err(format!("negative count {field}"))),
        Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as u64),
        Ok(_) => Err(parse_err(format!("count {field} is not an integer"))),
        Err(_) => Err(parse_err(format!("count {field:?} is not a number"))),
    }
}

/// Splits tab-separated lines into fields, skipping blanks and an optional
/// header (a first line whose last field is not numeric).
fn read_rows(path: &Path, arity: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|f| f.trim().to_string()).collect();
        if rows.is_empty() && lineno == 1 && !fields.last().is_some_and(|f| is_number(f)) {
            continue;
        }
        if fields.len() != arity {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected {arity} tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((lineno, fields));
    }
    Ok(rows)
}

/// Reads a `sample  cell_type  gene  count` TSV.
pub fn read_triplets(path: &Path) -> Result<CountTriplets> {
    let mut ct = CountTriplets::default();
    for (line, f) in read_rows(path, 4)? {
        let count = parse_count(&f[3], path, line)?;
        ct.push(&f[0], &f[1], &f[2], count);
    }
    Ok(ct)
}

/// Joins a `cell  gene  count` TSV with a `cell  sample  cell_type` label TSV.
///
/// With `min_fraction`, samples and cell types holding fewer than that share
/// of the labelled cells are dropped.
pub fn read_cell_level(counts: &Path, labels: &Path, min_fraction: Option<f64>) -> Result<CountTriplets> {
    let mut cell_label: HashMap<String, (String, String)> = HashMap::new();
    for (line, f) in read_label_rows(labels, 3)? {
        if cell_label.insert(f[0].clone(), (f[1].clone(), f[2].clone())).is_some() {
            return Err(Error::Parse {
                path: labels.to_path_buf(),
                line,
                msg: format!("cell {} labelled twice", f[0]),
            });
        }
    }
    let mut keep_sample: Option<Vec<String>> = None;
    let mut keep_type: Option<Vec<String>> = None;
    if let Some(frac) = min_fraction {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::invalid(format!("minimum fraction must be in [0,1], got {frac}")));
        }
        let n = cell_label.len() as f64;
        let mut per_sample: HashMap<&str, usize> = HashMap::new();
        let mut per_type: HashMap<&str, usize> = HashMap::new();
        for (s, c) in cell_label.values() {
            *per_sample.entry(s).or_default() += 1;
            *per_type.entry(c).or_default() += 1;
        }
        let survivors = |m: &HashMap<&str, usize>, what: &str| -> Vec<String> {
            let mut keep = Vec::new();
            for (k, &v) in m {
                if (v as f64) < frac * n {
                    warn!("dropping {what} {k}: {v} of {n} cells");
                } else {
                    keep.push(k.to_string());
                }
            }
            keep
        };
        keep_sample = Some(survivors(&per_sample, "sample"));
        keep_type = Some(survivors(&per_type, "cell type"));
    }
    let mut ct = CountTriplets::default();
    for (line, f) in read_rows(counts, 3)? {
        let count = parse_count(&f[2], counts, line)?;
        let (sample, cell_type) = cell_label.get(&f[0]).ok_or_else(|| Error::Parse {
            path: counts.to_path_buf(),
            line,
            msg: format!("cell {} has no label", f[0]),
        })?;
        if keep_sample.as_ref().is_some_and(|k| !k.contains(sample)) || keep_type.as_ref().is_some_and(|k| !k.contains(cell_type)) {
            continue;
        }
        ct.push(sample, cell_type, &f[1], count);
    }
    Ok(ct)
}

/// Label files end in a text field, so the numeric-header rule cannot apply;
/// a first line whose first field is `cell`, `cell_id` or `barcode` is a header.
fn read_label_rows(path: &Path, arity: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|f| f.trim().to_string()).collect();
        if i == 0 && ["cell", "cell_id", "barcode"].contains(&fields[0].to_ascii_lowercase().as_str()) {
            continue;
        }
        if fields.len() != arity {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {arity} tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

/// Keeps genes whose total count is at least `min_total`. The sample and
/// cell-type vocabularies are left alone so those axes stay stable.
pub fn filter_genes(ct: &CountTriplets, min_total: u64) -> CountTriplets {
    let totals = ct.gene_totals();
    let mut genes = IndexSet::new();
    let mut remap = vec![usize::MAX; ct.genes.len()];
    for (g, name) in ct.genes.iter().enumerate() {
        if totals[g] >= min_total {
            remap[g] = genes.insert_full(name.clone()).0;
        }
    }
    let records = ct
        .records
        .iter()
        .filter(|r| remap[r.gene] != usize::MAX)
        .map(|r| Record {
            gene: remap[r.gene],
            ..*r
        })
        .collect();
    CountTriplets {
        records,
        samples: ct.samples.clone(),
        cell_types: ct.cell_types.clone(),
        genes,
    }
}

/// Orders labels so embedded numbers compare numerically (`gene_2` before `gene_10`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, sa), (db, sb)) in ca.iter().zip(&cb) {
        let ord = if *da && *db {
            let (ta, tb) = (sa.trim_start_matches('0'), sb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb))
        } else {
            sa.cmp(sb)
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pseudobulk {
    pub tensor: Tensor,
    /// Labels for the sample, cell-type and gene axes.
    pub axes: [Vec<String>; 3],
}

impl Pseudobulk {
    /// Writes `tensor.tns` and `axis_<mode>.txt` into `dir`.
    pub fn write(&self, dir: &Path, comment: Option<&str>) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("tensor.tns");
        write_tns(&path, &self.tensor, comment)?;
        for (k, labels) in self.axes.iter().enumerate() {
            let p = dir.join(format!("axis_{k}.txt"));
            let mut text = labels.join("\n");
            text.push('\n');
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(path)
    }
}

/// Sums counts per (sample, cell type, gene). Axis labels are sorted in
/// natural order, so the result does not depend on record order.
pub fn pseudobulk(ct: &CountTriplets) -> Result<Pseudobulk> {
    if ct.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let order = |vocab: &IndexSet<String>| -> (Vec<String>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..vocab.len()).collect();
        idx.sort_by(|&a, &b| natural_cmp(&vocab[a], &vocab[b]));
        let mut pos = vec![0; vocab.len()];
        for (p, &i) in idx.iter().enumerate() {
            pos[i] = p;
        }
        (idx.iter().map(|&i| vocab[i].clone()).collect(), pos)
    };
    let (s_labels, s_pos) = order(&ct.samples);
    let (c_labels, c_pos) = order(&ct.cell_types);
    let (g_labels, g_pos) = order(&ct.genes);
    let (c, g) = (c_labels.len(), g_labels.len());
    let mut sums = vec![0u64; s_labels.len() * c * g];
    for r in &ct.records {
        sums[(s_pos[r.sample] * c + c_pos[r.cell_type]) * g + g_pos[r.gene]] += r.count;
    }
    let tensor = Tensor::new(
        vec![s_labels.len(), c, g],
        sums.into_iter().map(|v| v as f64).collect(),
    )?;
    Ok(Pseudobulk {
        tensor,
        axes: [s_labels, c_labels, g_labels],
    })
}

/// Rescales every (sample, cell type) gene fiber to sum to one million.
pub fn cpm_normalize(t: &Tensor) -> Result<Tensor> {
    if t.order() != 3 {
        return Err(Error::invalid(format!("CPM needs a three-mode tensor, got order {}", t.order())));
    }
    let g = t.shape()[2];
    let mut data = t.data().to_vec();
    let mut zero = 0;
    if g > 0 {
        for fiber in data.chunks_mut(g) {
            let s: f64 = fiber.iter().sum();
            if s > 0.0 {
                let scale = 1e6 / s;
                fiber.iter_mut().for_each(|v| *v *= scale);
            } else {
                zero += 1;
            }
        }
    }
    if zero > 0 {
        warn!("{zero} all-zero fibers left at zero during CPM normalization");
    }
    Tensor::new(t.shape().to_vec(), data)
}
