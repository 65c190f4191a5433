//! Synthetic data: ZIP-noised low-rank tensors and a simplified single-cell
//! count simulator with known gene expression programs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{Error, Result};
use crate::io::write_factor_csv;
use crate::prob::{
    derive_seed, logistic_sigmoid, sample_gamma, sample_normal, sample_poisson, sample_zip, stream, GammaParams, Stream,
    ZipParams,
};
use crate::tensor::{cp_reconstruct, FactorModel, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTensorSpec {
    pub shape: Vec<usize>,
    pub rank: usize,
    pub phi: f64,
    pub factor_shape: f64,
    pub factor_rate: f64,
    pub seed: u64,
}

impl SyntheticTensorSpec {
    pub fn new(shape: Vec<usize>, rank: usize, phi: f64, seed: u64) -> Self {
        SyntheticTensorSpec {
            shape,
            rank,
            phi,
            factor_shape: 3.0,
            factor_rate: 0.3,
            seed,
        }
    }
}

/// A generated tensor together with the model behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTensor {
    /// ZIP-noised observations.
    pub observed: Tensor,
    /// Noise-free reconstruction of `truth`.
    pub signal: Tensor,
    pub truth: FactorModel,
}

pub fn gen_synthetic_tensor(spec: &SyntheticTensorSpec) -> Result<SyntheticTensor> {
    if !(0.0..=1.0).contains(&spec.phi) {
        return Err(Error::invalid(format!("excess-zero probability must be in [0,1], got {}", spec.phi)));
    }
    if spec.rank == 0 || spec.shape.len() < 2 || spec.shape.contains(&0) {
        return Err(Error::invalid("need rank >= 1 and at least two non-empty modes"));
    }
    let gp = GammaParams::new(spec.factor_shape, spec.factor_rate)?;
    let mut rng = stream(spec.seed);
    let factors: Vec<Array2<f64>> = spec
        .shape
        .iter()
        .map(|&d| Array2::from_shape_fn((d, spec.rank), |_| sample_gamma(&gp, &mut rng)))
        .collect();
    let truth = FactorModel::new(factors)?;
    let signal = cp_reconstruct(&truth);
    let data = signal
        .data()
        .iter()
        .map(|&lambda| {
            if lambda <= 0.0 {
                return 0.0;
            }
            let zp = ZipParams::new(lambda, spec.phi).expect("positive rate and valid phi");
            sample_zip(&zp, &mut rng) as f64
        })
        .collect();
    Ok(SyntheticTensor {
        observed: Tensor::new(spec.shape.clone(), data)?,
        signal,
        truth,
    })
}

/// Logistic dropout curve on log mean expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub midpoint: f64,
    pub shape: f64,
}

impl Dropout {
    /// Probability that a count of a gene with this mean expected count is zeroed.
    pub fn probability(&self, mean: f64) -> f64 {
        if mean <= 0.0 {
            return 1.0;
        }
        logistic_sigmoid(-self.shape * (mean.ln() - self.midpoint))
    }
}

impl Default for Dropout {
    fn default() -> Self {
        Dropout {
            midpoint: 1.0,
            shape: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrnaSimSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_donors: usize,
    pub n_cell_types: usize,
    pub n_identity: usize,
    pub n_activity: usize,
    pub mean_log2fc: f64,
    pub genes_per_program: usize,
    pub doublet_rate: f64,
    /// `None` switches dropout off.
    pub dropout: Option<Dropout>,
    pub lib_loc: f64,
    pub lib_scale: f64,
    pub gene_mean: f64,
    pub gene_shape: f64,
    pub outlier_prob: f64,
    pub outlier_loc: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl ScrnaSimSpec {
    pub fn new(n_cells: usize, n_genes: usize, n_donors: usize, n_cell_types: usize, seed: u64) -> Self {
        ScrnaSimSpec {
            n_cells,
            n_genes,
            n_donors,
            n_cell_types,
            n_identity: 5,
            n_activity: 3,
            mean_log2fc: 0.5,
            genes_per_program: 100,
            doublet_rate: 0.05,
            dropout: Some(Dropout::default()),
            lib_loc: 7.64,
            lib_scale: 0.78,
            gene_mean: 7.68,
            gene_shape: 0.34,
            outlier_prob: 0.00286,
            outlier_loc: 6.15,
            outlier_scale: 0.49,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_genes == 0 || self.n_donors == 0 || self.n_cell_types == 0 {
            return Err(Error::invalid("cell, gene, donor and cell-type counts must be positive"));
        }
        if self.n_identity == 0 {
            return Err(Error::invalid("need at least one identity program"));
        }
        if !(self.mean_log2fc > 0.0) {
            return Err(Error::invalid(format!("mean log2FC must be positive, got {}", self.mean_log2fc)));
        }
        if !(0.0..1.0).contains(&self.doublet_rate) {
            return Err(Error::invalid(format!("doublet rate must be in [0,1), got {}", self.doublet_rate)));
        }
        let needed = (self.n_identity + self.n_activity) * self.genes_per_program;
        if needed > self.n_genes {
            return Err(Error::invalid(format!(
                "{} programs of {} genes need {needed} genes, only {} available",
                self.n_identity + self.n_activity,
                self.genes_per_program,
                self.n_genes
            )));
        }
        if !(self.lib_scale > 0.0 && self.outlier_scale > 0.0 && self.gene_shape > 0.0 && self.gene_mean > 0.0) {
            return Err(Error::invalid("distribution scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLabel {
    pub donor: usize,
    pub cell_type: usize,
    pub doublet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrnaSim {
    /// Cells × genes.
    pub counts: Array2<u64>,
    pub labels: Vec<CellLabel>,
    /// Genes × programs, identity programs first.
    pub geps: Array2<f64>,
    /// Per-program `(kind, index)` descriptions, parallel to the GEP columns.
    pub program_names: Vec<String>,
    /// Sampled library size of each cell before doublet formation.
    pub library_sizes: Vec<f64>,
    pub base_means: Vec<f64>,
    pub outlier_genes: Vec<bool>,
    /// `active[a][d]` marks donors expressing activity program `a`.
    pub active: Vec<Vec<bool>>,
}

fn positive_normal(mean: f64, sd: f64, rng: &mut Stream) -> f64 {
    loop {
        let v = sample_normal(mean, sd, rng);
        if v > 0.0 {
            return v;
        }
    }
}

/// Draws `target` counts without replacement from the multiset `counts`.
fn downsample(counts: &[u64], target: u64, rng: &mut Stream) -> Vec<u64> {
    let total: u64 = counts.iter().sum();
    let target = target.min(total);
    let mut picks: Vec<usize> = index::sample(rng, total as usize, target as usize).into_vec();
    picks.sort_unstable();
    let mut out = vec![0; counts.len()];
    let (mut gene, mut upper) = (0, counts.first().copied().unwrap_or(0) as usize);
    for p in picks {
        while p >= upper {
            gene += 1;
            upper += counts[gene] as usize;
        }
        out[gene] += 1;
    }
    out
}

/// Simplified Splatter-style simulator: Gamma gene means with lognormal
/// outliers, lognormal library sizes, Poisson counts, logistic dropout and
/// doublets. Identity programs follow cell type, activity programs follow donor.
pub fn gen_scrnaseq(spec: &ScrnaSimSpec) -> Result<ScrnaSim> {
    spec.validate()?;
    if spec.n_identity > spec.n_cell_types {
        warn!(
            "{} identity programs for {} cell types; some programs are never expressed",
            spec.n_identity, spec.n_cell_types
        );
    }
    let (n, g) = (spec.n_cells, spec.n_genes);
    let mut rng = stream(derive_seed(spec.seed, 0));

    let gene_gamma = GammaParams::new(spec.gene_shape, spec.gene_shape / spec.gene_mean)?;
    let outlier = LogNormal::new(spec.outlier_loc, spec.outlier_scale).expect("validated scale");
    let mut outlier_genes = vec![false; g];
    let base_means: Vec<f64> = outlier_genes
        .iter_mut()
        .map(|o| {
            if rng.gen::<f64>() < spec.outlier_prob {
                *o = true;
                outlier.sample(&mut rng)
            } else {
                sample_gamma(&gene_gamma, &mut rng)
            }
        })
        .collect();

    // disjoint program gene sets and their fold changes
    let n_prog = spec.n_identity + spec.n_activity;
    let mut genes: Vec<usize> = (0..g).collect();
    genes.shuffle(&mut rng);
    let mut multipliers = Array2::<f64>::ones((g, n_prog));
    for p in 0..n_prog {
        for &gene in &genes[p * spec.genes_per_program..(p + 1) * spec.genes_per_program] {
            let effect = positive_normal(spec.mean_log2fc, spec.mean_log2fc / 2.0, &mut rng);
            multipliers[[gene, p]] = effect.exp2();
        }
    }
    let mut geps = Array2::<f64>::zeros((g, n_prog));
    for gene in 0..g {
        for p in 0..n_prog {
            let m = multipliers[[gene, p]];
            geps[[gene, p]] = base_means[gene] * if p < spec.n_identity { m } else { m - 1.0 };
        }
    }
    let half = spec.n_donors.div_ceil(2);
    let active: Vec<Vec<bool>> = (0..spec.n_activity)
        .map(|_| {
            let mut row = vec![false; spec.n_donors];
            for d in index::sample(&mut rng, spec.n_donors, half) {
                row[d] = true;
            }
            row
        })
        .collect();

    let lib = LogNormal::new(spec.lib_loc, spec.lib_scale).expect("validated scale");
    let mut labels = Vec::with_capacity(n);
    let mut library_sizes = Vec::with_capacity(n);
    let mut lambda = Array2::<f64>::zeros((n, g));
    for cell in 0..n {
        let donor = rng.gen_range(0..spec.n_donors);
        let cell_type = rng.gen_range(0..spec.n_cell_types);
        labels.push(CellLabel {
            donor,
            cell_type,
            doublet: false,
        });
        let mut mu = geps.column(cell_type % spec.n_identity).to_owned();
        for (a, row) in active.iter().enumerate() {
            if row[donor] {
                mu += &geps.column(spec.n_identity + a);
            }
        }
        let size = lib.sample(&mut rng);
        library_sizes.push(size);
        let total = mu.sum();
        lambda.row_mut(cell).assign(&mu.mapv(|m| size * m / total));
    }

    let mut counts = lambda.mapv(|l| sample_poisson(l, &mut rng));
    if let Some(dropout) = spec.dropout {
        for gene in 0..g {
            let p = dropout.probability(lambda.column(gene).mean().unwrap_or(0.0));
            for cell in 0..n {
                if rng.gen::<f64>() < p {
                    counts[[cell, gene]] = 0;
                }
            }
        }
    }

    let n_doublets = (spec.doublet_rate * n as f64).round() as usize;
    if n > 1 {
        for cell in index::sample(&mut rng, n, n_doublets) {
            let mut partner = rng.gen_range(0..n - 1);
            if partner >= cell {
                partner += 1;
            }
            let a = counts.row(cell).to_vec();
            let b = counts.row(partner).to_vec();
            let target = a.iter().sum::<u64>().max(b.iter().sum());
            let merged: Vec<u64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let down = downsample(&merged, target, &mut rng);
            counts.row_mut(cell).iter_mut().zip(down).for_each(|(c, v)| *c = v);
            labels[cell].doublet = true;
        }
    }

    let program_names = (0..n_prog)
        .map(|p| {
            if p < spec.n_identity {
                format!("identity_{p}")
            } else {
                format!("activity_{}", p - spec.n_identity)
            }
        })
        .collect();
    Ok(ScrnaSim {
        counts,
        labels,
        geps,
        program_names,
        library_sizes,
        base_means,
        outlier_genes,
        active,
    })
}

/// Donor × cell type × gene sums of the simulated counts.
pub fn pseudobulk_from_sim(counts: &Array2<u64>, labels: &[CellLabel]) -> Result<Tensor> {
    if labels.len() != counts.nrows() {
        return Err(Error::invalid(format!(
            "{} labels for {} cells",
            labels.len(),
            counts.nrows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no cells to aggregate"));
    }
    let d = labels.iter().map(|l| l.donor).max().unwrap_or(0) + 1;
    let c = labels.iter().map(|l| l.cell_type).max().unwrap_or(0) + 1;
    let g = counts.ncols();
    let mut sums = vec![0u64; d * c * g];
    let mut seen = vec![false; d * c];
    for (row, l) in counts.rows().into_iter().zip(labels) {
        let base = (l.donor * c + l.cell_type) * g;
        seen[l.donor * c + l.cell_type] = true;
        for (s, &v) in sums[base..base + g].iter_mut().zip(row) {
            *s += v;
        }
    }
    let empty = seen.iter().filter(|&&s| !s).count();
    if empty > 0 {
        warn!("{empty} donor/cell-type groups have no cells; their fibers are zero");
    }
    Tensor::new(vec![d, c, g], sums.into_iter().map(|v| v as f64).collect())
}

/// Writes `counts.tsv` (cell, gene, count for non-zero entries), `labels.tsv`
/// and `geps.csv` into `dir`.
pub fn write_scrna(dir: &Path, sim: &ScrnaSim) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    };
    write("counts.tsv", &|w| {
        writeln!(w, "cell_id\tgene_id\tcount")?;
        for ((cell, gene), &v) in sim.counts.indexed_iter() {
            if v > 0 {
                writeln!(w, "cell_{cell}\tgene_{gene}\t{v}")?;
            }
        }
        Ok(())
    })?;
    write("labels.tsv", &|w| {
        writeln!(w, "cell_id\tdonor\tcell_type")?;
        for (i, l) in sim.labels.iter().enumerate() {
            writeln!(w, "cell_{i}\tdonor_{}\ttype_{}", l.donor, l.cell_type)?;
        }
        Ok(())
    })?;
    write_factor_csv(&dir.join("geps.csv"), &sim.geps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_inflation_gives_zeros() {
        let s = gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![4, 5, 6], 2, 1.0, 3)).unwrap();
        assert!(s.observed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_noise_is_centered() {
        let s = gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![10, 20, 30], 3, 0.0, 4)).unwrap();
        let n = s.observed.len() as f64;
        let mean_resid = (s.observed.sum() - s.signal.sum()) / n;
        let bound = 3.0 * (s.signal.mean() / n).sqrt();
        assert!(mean_resid.abs() < bound, "{mean_resid} vs {bound}");
    }

    #[test]
    fn zero_fraction_grows_with_phi() {
        let zf: Vec<f64> = [0.0, 0.4, 0.8]
            .iter()
            .map(|&phi| {
                gen_synthetic_tensor(&SyntheticTensorSpec::new(vec![6, 7, 8], 2, phi, 9))
                    .unwrap()
                    .observed
                    .zero_fraction()
            })
            .collect();
        assert!(zf[0] < zf[1] && zf[1] < zf[2], "{zf:?}");
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticTensorSpec::new(vec![3, 4, 5], 2, 0.5, 11);
        assert_eq!(gen_synthetic_tensor(&spec).unwrap(), gen_synthetic_tensor(&spec).unwrap());
    }

    fn small(seed: u64) -> ScrnaSimSpec {
        ScrnaSimSpec {
            n_identity: 2,
            n_activity: 1,
            genes_per_program: 10,
            ..ScrnaSimSpec::new(200, 60, 2, 2, seed)
        }
    }

    #[test]
    fn library_sizes_follow_lognormal() {
        let spec = ScrnaSimSpec {
            n_identity: 1,
            n_activity: 0,
            genes_per_program: 5,
            dropout: None,
            ..ScrnaSimSpec::new(10_000, 20, 2, 1, 5)
        };
        let sim = gen_scrnaseq(&spec).unwrap();
        let n = sim.library_sizes.len() as f64;
        let mean = sim.library_sizes.iter().map(|l| l.ln()).sum::<f64>() / n;
        let se = 0.78 / n.sqrt();
        assert!((mean - 7.64).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn outlier_fraction_matches() {
        let spec = ScrnaSimSpec {
            n_identity: 1,
            n_activity: 0,
            genes_per_program: 5,
            ..ScrnaSimSpec::new(2, 100_000, 1, 1, 6)
        };
        let sim = gen_scrnaseq(&spec).unwrap();
        let n = sim.outlier_genes.len() as f64;
        let frac = sim.outlier_genes.iter().filter(|&&o| o).count() as f64 / n;
        let p = 0.00286;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((frac - p).abs() < 3.0 * se, "{frac}");
    }

    #[test]
    fn dropout_only_removes_counts() {
        let off = ScrnaSimSpec {
            dropout: None,
            doublet_rate: 0.0,
            ..small(7)
        };
        let on = ScrnaSimSpec {
            dropout: Some(Dropout::default()),
            ..off.clone()
        };
        let a = gen_scrnaseq(&off).unwrap().counts;
        let b = gen_scrnaseq(&on).unwrap().counts;
        assert!(a.iter().zip(&b).all(|(x, y)| y == x || *y == 0));
        let zeros = |m: &Array2<u64>| m.iter().filter(|&&v| v == 0).count();
        assert!(zeros(&b) > zeros(&a));
    }

    #[test]
    fn dropout_probability_decreases_with_mean() {
        let d = Dropout::default();
        assert!((d.probability(1.0f64.exp()) - 0.5).abs() < 1e-15);
        assert!(d.probability(1.0) > d.probability(10.0));
        assert_eq!(d.probability(0.0), 1.0);
    }

    #[test]
    fn program_structure() {
        let sim = gen_scrnaseq(&small(8)).unwrap();
        assert_eq!(sim.geps.dim(), (60, 3));
        let act: Vec<usize> = (0..60).filter(|&g| sim.geps[[g, 2]] > 0.0).collect();
        assert_eq!(act.len(), 10);
        for p in 0..2 {
            let up: Vec<usize> = (0..60).filter(|&g| sim.geps[[g, p]] > sim.base_means[g]).collect();
            assert_eq!(up.len(), 10);
            assert!(up.iter().all(|g| !act.contains(g)));
        }
        assert!(sim.active.iter().all(|row| row.iter().filter(|&&a| a).count() == 1));
        assert_eq!(sim.labels.iter().filter(|l| l.doublet).count(), 10);
    }

    #[test]
    fn downsample_hits_target() {
        let mut rng = stream(3);
        let counts = [5, 0, 12, 3, 7];
        for target in [0, 1, 10, 27] {
            let d = downsample(&counts, target, &mut rng);
            assert_eq!(d.iter().sum::<u64>(), target);
            assert!(d.iter().zip(&counts).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn pseudobulk_matches_loop_oracle() {
        let sim = gen_scrnaseq(&small(9)).unwrap();
        let t = pseudobulk_from_sim(&sim.counts, &sim.labels).unwrap();
        let [d, c, g] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        for di in 0..d {
            for ci in 0..c {
                for gi in 0..g {
                    let mut s = 0u64;
                    for (cell, l) in sim.labels.iter().enumerate() {
                        if l.donor == di && l.cell_type == ci {
                            s += sim.counts[[cell, gi]];
                        }
                    }
                    assert_eq!(t.get(&[di, ci, gi]), s as f64);
                }
            }
        }
        assert_eq!(t.sum(), sim.counts.iter().sum::<u64>() as f64);
    }

    #[test]
    fn singleton_groups_copy_cells() {
        let counts = ndarray::array![[1u64, 2], [3, 4], [5, 6], [7, 8]];
        let labels: Vec<CellLabel> = (0..4)
            .map(|i| CellLabel {
                donor: i / 2,
                cell_type: i % 2,
                doublet: false,
            })
            .collect();
        let t = pseudobulk_from_sim(&counts, &labels).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn scrna_is_deterministic_and_validated() {
        assert_eq!(gen_scrnaseq(&small(10)).unwrap(), gen_scrnaseq(&small(10)).unwrap());
        assert!(gen_scrnaseq(&ScrnaSimSpec {
            mean_log2fc: 0.0,
            ..small(1)
        })
        .is_err());
        assert!(gen_scrnaseq(&ScrnaSimSpec {
            genes_per_program: 30,
            ..small(1)
        })
        .is_err());
    }

    #[test]
    fn writes_scrna_files() {
        let dir = tempfile::tempdir().unwrap();
        let sim = gen_scrnaseq(&small(11)).unwrap();
        write_scrna(dir.path(), &sim).unwrap();
        let labels = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        assert_eq!(labels.lines().count(), 201);
        let total: u64 = std::fs::read_to_string(dir.path().join("counts.tsv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit('\t').next().unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(total, sim.counts.iter().sum::<u64>());
    }
}
