use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::json;

use ziptf::consensus::{consensus_fit, rank_scan, write_consensus};
use ziptf::datagen::{gen_scrnaseq, gen_synthetic_tensor, pseudobulk_from_sim, write_scrna, Dropout, ScrnaSimSpec, SyntheticTensorSpec};
use ziptf::ingest::{cpm_normalize, filter_genes, pseudobulk, read_cell_level, read_triplets, Pseudobulk};
use ziptf::io::{read_factor_csv, read_model_dir, read_tns, write_model_dir, write_tns};
use ziptf::metrics::{align_pearson, cosine_score, cosine_score_matched, explained_variance};
use ziptf::registry::Registry;
use ziptf::{Error, Tensor};

use crate::manifest::ManifestBuilder;
use crate::settings::{ConfigFile, Settings};
use crate::{write_json, Cli, Command, Failure, Metric, SimKind};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            kind,
            out,
            seed,
            shape,
            rank,
            phi,
            cells,
            genes,
            donors,
            cell_types,
            identity_programs,
            activity_programs,
            genes_per_program,
            log2fc,
            doublet_rate,
            dropout_midpoint,
            dropout_shape,
            no_dropout,
        } => match kind {
            SimKind::Tensor => simulate_tensor(&out, SyntheticTensorSpec::new(shape, rank, phi, seed)),
            SimKind::Scrna => simulate_scrna(
                &out,
                ScrnaSimSpec {
                    n_identity: identity_programs,
                    n_activity: activity_programs,
                    genes_per_program,
                    mean_log2fc: log2fc,
                    doublet_rate,
                    dropout: (!no_dropout).then_some(Dropout {
                        midpoint: dropout_midpoint,
                        shape: dropout_shape,
                    }),
                    ..ScrnaSimSpec::new(cells, genes, donors, cell_types, seed)
                },
            ),
        },
        Command::Factorize {
            input,
            rank,
            seed,
            out,
            reference,
            fit,
        } => {
            let s = Settings::resolve(&fit, None, &file, seed, cli.workers)?;
            factorize(&input, reference.as_deref(), rank, &s, &out)
        }
        Command::Consensus {
            input,
            rank,
            seed,
            out,
            reference,
            fit,
            consensus,
        } => {
            let s = Settings::resolve(&fit, Some(&consensus), &file, seed, cli.workers)?;
            run_consensus(&input, reference.as_deref(), rank, &s, &out)
        }
        Command::RankScan {
            input,
            ranks,
            seed,
            out,
            fit,
            consensus,
        } => {
            let s = Settings::resolve(&fit, Some(&consensus), &file, seed, cli.workers)?;
            run_rank_scan(&input, &parse_ranks(&ranks)?, &s, &out)
        }
        Command::Pseudobulk {
            triplets,
            cells,
            labels,
            min_fraction,
            min_gene_count,
            cpm,
            out,
        } => {
            let source = match (triplets, cells, labels) {
                (Some(t), None, None) => Source::Triplets(t),
                (None, Some(c), Some(l)) => Source::Cells(c, l, min_fraction),
                _ => return Err(Failure::Usage("give --triplets, or --cells with --labels".into())),
            };
            run_pseudobulk(source, min_gene_count, cpm, &out)
        }
        Command::Evaluate {
            model,
            metric,
            input,
            truth,
            mode,
            out,
        } => evaluate(&model, metric, input.as_deref(), truth.as_deref(), mode, out.as_deref()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Core(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn load_tensor(path: &Path) -> Result<Tensor, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("input {} does not exist", path.display())));
    }
    Ok(read_tns(path)?)
}

fn existing(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("{} does not exist", path.display())))
    }
}

fn simulate_tensor(out: &Path, spec: SyntheticTensorSpec) -> Result<(), Failure> {
    ensure_dir(out)?;
    let mut m = ManifestBuilder::start("simulate")
        .settings(&json!({
            "kind": "tensor",
            "shape": spec.shape,
            "rank": spec.rank,
            "phi": spec.phi,
            "factor_shape": spec.factor_shape,
            "factor_rate": spec.factor_rate,
        }))
        .seed(spec.seed);
    let data = gen_synthetic_tensor(&spec)?;
    let note = format!("synthetic rank {} phi {} seed {}", spec.rank, spec.phi, spec.seed);
    write_tns(&out.join("tensor.tns"), &data.observed, Some(&note))?;
    write_tns(&out.join("signal.tns"), &data.signal, Some(&note))?;
    write_model_dir(&out.join("truth"), &data.truth)?;
    info!("zero fraction {:.4}", data.observed.zero_fraction());
    for p in ["tensor.tns", "signal.tns", "truth"] {
        m.output(out.join(p));
    }
    m.finish(out)
}

fn simulate_scrna(out: &Path, spec: ScrnaSimSpec) -> Result<(), Failure> {
    ensure_dir(out)?;
    let mut m = ManifestBuilder::start("simulate")
        .settings(&json!({
            "kind": "scrna",
            "cells": spec.n_cells,
            "genes": spec.n_genes,
            "donors": spec.n_donors,
            "cell_types": spec.n_cell_types,
            "identity_programs": spec.n_identity,
            "activity_programs": spec.n_activity,
            "genes_per_program": spec.genes_per_program,
            "log2fc": spec.mean_log2fc,
            "doublet_rate": spec.doublet_rate,
            "dropout": spec.dropout.map(|d| json!({"midpoint": d.midpoint, "shape": d.shape})),
        }))
        .seed(spec.seed);
    let sim = gen_scrnaseq(&spec)?;
    write_scrna(out, &sim)?;
    let tensor = pseudobulk_from_sim(&sim.counts, &sim.labels)?;
    let shape = tensor.shape().to_vec();
    let pb = Pseudobulk {
        tensor,
        axes: [
            (0..shape[0]).map(|d| format!("donor_{d}")).collect(),
            (0..shape[1]).map(|c| format!("type_{c}")).collect(),
            (0..shape[2]).map(|g| format!("gene_{g}")).collect(),
        ],
    };
    pb.write(&out.join("pseudobulk"), Some("donor x cell type x gene"))?;
    let names = sim.program_names.join("\n") + "\n";
    let p = out.join("programs.txt");
    fs::write(&p, names).map_err(|e| Failure::Core(Error::Io { path: p, source: e }))?;
    for p in ["counts.tsv", "labels.tsv", "geps.csv", "programs.txt", "pseudobulk"] {
        m.output(out.join(p));
    }
    m.finish(out)
}

#[derive(Serialize)]
struct FitMetrics<'a> {
    method: &'a str,
    rank: usize,
    seed: u64,
    explained_variance: f64,
    explained_variance_reference: Option<f64>,
    objective: f64,
    iterations: usize,
    zero_inflation: Option<f64>,
    runtime_seconds: f64,
}

fn factorize(input: &Path, reference: Option<&Path>, rank: usize, s: &Settings, out: &Path) -> Result<(), Failure> {
    let t = load_tensor(input)?;
    let reference = reference.map(load_tensor).transpose()?;
    let method = Registry::builtin().get(&s.method)?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::start("factorize").settings(s).seed(s.seed);
    let start = Instant::now();
    let fit = method.fit(&t, rank, &s.fit_config(), None)?;
    let runtime = start.elapsed().as_secs_f64();
    write_model_dir(out, &fit.model)?;
    let metrics = FitMetrics {
        method: &s.method,
        rank,
        seed: s.seed,
        explained_variance: explained_variance(&t, &fit.model)?,
        explained_variance_reference: reference.as_ref().map(|r| explained_variance(r, &fit.model)).transpose()?,
        objective: fit.objective,
        iterations: fit.iterations,
        zero_inflation: fit.zero_inflation,
        runtime_seconds: runtime,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut trace = String::from("step,objective\n");
    for (i, v) in fit.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    let p = out.join("trace.csv");
    fs::write(&p, trace).map_err(|e| Failure::Core(Error::Io { path: p.clone(), source: e }))?;
    for k in 0..t.order() {
        m.output(out.join(format!("mode_{k}.csv")));
    }
    m.output(out.join("metrics.json"));
    m.output(p);
    m.finish(out)
}

fn check_restarts(s: &Settings) -> Result<(), Failure> {
    if s.restarts < 2 {
        return Err(Failure::Usage(format!("--restarts must be at least 2, got {}", s.restarts)));
    }
    Ok(())
}

fn run_consensus(input: &Path, reference: Option<&Path>, rank: usize, s: &Settings, out: &Path) -> Result<(), Failure> {
    check_restarts(s)?;
    let t = load_tensor(input)?;
    let reference = reference.map(load_tensor).transpose()?;
    let method = Registry::builtin().get(&s.method)?;
    let mut m = ManifestBuilder::start("consensus").settings(s).seed(s.seed);
    let res = consensus_fit(&t, rank, method.as_ref(), &s.fit_config(), &s.consensus_config())?;
    write_consensus(out, &t, &res)?;
    if let Some(r) = reference {
        let runs = res.runs.iter().map(|f| explained_variance(&r, &f.model)).collect::<ziptf::Result<Vec<f64>>>()?;
        write_json(
            &out.join("reference_metrics.json"),
            &json!({
                "explained_variance_reference": explained_variance(&r, res.final_model())?,
                "run_explained_variance_reference": runs,
            }),
        )?;
        m.output(out.join("reference_metrics.json"));
    }
    m.derived(res.run_seeds.iter().copied().chain([res.final_seed]));
    m.output(out.to_path_buf());
    m.finish(out)
}

fn parse_ranks(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("cannot read rank list `{spec}`"));
    let ranks: Vec<usize> = if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        spec.split(',').map(|r| r.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if ranks.is_empty() {
        return Err(Failure::Usage(format!("rank list `{spec}` is empty")));
    }
    Ok(ranks)
}

fn run_rank_scan(input: &Path, ranks: &[usize], s: &Settings, out: &Path) -> Result<(), Failure> {
    check_restarts(s)?;
    let t = load_tensor(input)?;
    let method = Registry::builtin().get(&s.method)?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::start("rank-scan").settings(s).seed(s.seed);
    let rows = rank_scan(&t, ranks, method.as_ref(), &s.fit_config(), &s.consensus_config())?;
    let mut csv = String::from("rank,explained_variance,silhouette,removed_outliers\n");
    for (row, res) in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.rank, row.explained_variance, row.silhouette, row.removed_outliers));
        let dir = out.join(format!("rank_{}", row.rank));
        write_consensus(&dir, &t, res)?;
        m.derived(res.run_seeds.iter().copied().chain([res.final_seed]));
        m.output(dir);
    }
    let p = out.join("rank_scan.csv");
    fs::write(&p, csv).map_err(|e| Failure::Core(Error::Io { path: p.clone(), source: e }))?;
    m.output(p);
    m.finish(out)
}

enum Source {
    Triplets(PathBuf),
    Cells(PathBuf, PathBuf, Option<f64>),
}

fn run_pseudobulk(source: Source, min_gene_count: u64, cpm: bool, out: &Path) -> Result<(), Failure> {
    let (settings, ct) = match &source {
        Source::Triplets(t) => (json!({"triplets": t}), read_triplets(existing(t)?)?),
        Source::Cells(c, l, f) => (
            json!({"cells": c, "labels": l, "min_fraction": f}),
            read_cell_level(existing(c)?, existing(l)?, *f)?,
        ),
    };
    let mut m = ManifestBuilder::start("pseudobulk").settings(&json!({
        "source": settings,
        "min_gene_count": min_gene_count,
        "cpm": cpm,
    }));
    let kept = filter_genes(&ct, min_gene_count);
    info!("{} of {} genes pass the count filter", kept.genes.len(), ct.genes.len());
    let mut pb = pseudobulk(&kept)?;
    if cpm {
        pb.tensor = cpm_normalize(&pb.tensor)?;
    }
    let path = pb.write(out, Some(if cpm { "pseudobulk, CPM" } else { "pseudobulk, raw counts" }))?;
    m.output(path);
    for k in 0..3 {
        m.output(out.join(format!("axis_{k}.txt")));
    }
    m.finish(out)
}

fn evaluate(model: &Path, metric: Metric, input: Option<&Path>, truth: Option<&Path>, mode: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let fitted = read_model_dir(existing(model)?)?;
    let value = match metric {
        Metric::Ev => {
            let input = input.ok_or_else(|| Failure::Usage("ev needs --input".into()))?;
            let t = load_tensor(input)?;
            json!({"metric": "explained_variance", "value": explained_variance(&t, &fitted)?, "rank": fitted.rank()})
        }
        Metric::Cosine => {
            let truth = truth.ok_or_else(|| Failure::Usage("cosine needs --truth".into()))?;
            let other = read_model_dir(existing(truth)?)?;
            json!({
                "metric": "cosine",
                "value": cosine_score(&fitted, &other)?,
                "matched": cosine_score_matched(&fitted, &other)?,
                "rank": fitted.rank(),
            })
        }
        Metric::Pearson => {
            let truth = existing(truth.ok_or_else(|| Failure::Usage("pearson needs --truth".into()))?)?;
            let k = mode.unwrap_or(fitted.order() - 1);
            if k >= fitted.order() {
                return Err(Failure::Usage(format!("mode {k} out of range for order {}", fitted.order())));
            }
            let reference = if truth.is_dir() {
                read_model_dir(truth)?.factor(k).clone()
            } else {
                read_factor_csv(truth)?
            };
            let report = align_pearson(fitted.factor(k), &reference)?;
            json!({"metric": "pearson", "value": report.average, "mode": k, "rank": fitted.rank(), "report": report})
        }
    };
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    if let Some(p) = out {
        write_json(p, &value)?;
    }
    Ok(())
}
