use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{g17, to_json_line, write_csv, write_json};
use super::input::{load_dataset, read_jsonl, read_parses, tokenized_sentence, word_tokens, AlignRecord, PairRecord, Reject};
use super::RunConfig;
use crate::attribution::{explain, syntaxshap, AttributionError, Explanation, Method, RunSettings};
use crate::coalition::predicted_evaluations;
use crate::deptree::TokenizedTree;
use crate::metrics::{
    coherency, evaluate_dataset, mean_variance, ranks_excluding, semantic_alignment, AlignmentRecord, AlignmentReport,
    CoherencyReport, MetricReport, SentencePair,
};
use crate::oracle::ValueOracle;

fn explain_one(
    oracle: &dyn ValueOracle,
    id: &str,
    tree: &TokenizedTree,
    method: Method,
    seed: u64,
    config: &RunConfig,
) -> Result<Explanation, AttributionError> {
    let settings = RunSettings { strategy: config.strategy, seed, target: None };
    explain(method, tree, oracle, &settings).map(|r| Explanation::new(id, tree, r))
}

/// File-name safe, injective encoding of a sentence id.
pub fn file_stem(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' && !out.is_empty() {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

pub fn explanation_path(root: &Path, method: Method, seed: u64, id: &str) -> PathBuf {
    root.join(method.as_str()).join(format!("seed-{seed}")).join(format!("{}.json", file_stem(id)))
}

fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for r in rejects {
        text.push_str(&to_json_line(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub total: usize,
    pub explained: usize,
    pub rejected: usize,
    pub files: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

/// Writes one explanation per (sentence, method, seed) under
/// `<out>/explanations/<method>/seed-<seed>/`, plus `rejects.jsonl` and
/// `summary.json`.
pub fn cmd_explain(config: &RunConfig) -> Result<ExplainSummary> {
    let dataset = load_dataset(config)?;
    if dataset.total == 0 {
        bail!("dataset is empty");
    }
    let oracle = config.oracle.connect()?;
    let jobs: Vec<(usize, Method, u64)> = (0..dataset.sentences.len())
        .flat_map(|s| config.methods.iter().flat_map(move |&m| config.seeds.iter().map(move |&seed| (s, m, seed))))
        .collect();
    log::info!("explaining {} sentences, {} jobs", dataset.sentences.len(), jobs.len());
    let results: Vec<_> = config.thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(s, m, seed)| {
                let (record, tree) = &dataset.sentences[s];
                explain_one(&*oracle, &record.id, tree, m, seed, config)
            })
            .collect()
    });

    let mut failed: BTreeMap<usize, String> = BTreeMap::new();
    for (&(s, m, seed), r) in jobs.iter().zip(&results) {
        if let Err(e) = r {
            failed.entry(s).or_insert_with(|| format!("{m} seed {seed}: {e}"));
        }
    }
    let root = config.out.join("explanations");
    let mut files = 0;
    for (&(s, m, seed), r) in jobs.iter().zip(&results) {
        if let (false, Ok(e)) = (failed.contains_key(&s), r) {
            write_json(&explanation_path(&root, m, seed, &e.id), e)?;
            files += 1;
        }
    }

    let mut rejects = dataset.rejects;
    for (&s, detail) in &failed {
        log::warn!("{}: {detail}", dataset.sentences[s].0.id);
        rejects.push(Reject::new(dataset.sentences[s].0.id.clone(), "attribution_failed", detail.clone()));
    }
    rejects.sort_by(|a, b| a.id.cmp(&b.id));
    write_rejects(&config.out.join("rejects.jsonl"), &rejects)?;

    let summary = ExplainSummary {
        total: dataset.total,
        explained: dataset.sentences.len() - failed.len(),
        rejected: rejects.len(),
        files,
        methods: config.methods.clone(),
        seeds: config.seeds.clone(),
    };
    write_json(&config.out.join("summary.json"), &summary)?;
    if summary.explained == 0 {
        bail!("none of the {} sentences could be explained, see {}", summary.total, config.out.join("rejects.jsonl").display());
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanVariance {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub fid: MeanVariance,
    pub fid_rand: MeanVariance,
    pub div_at_k: MeanVariance,
    pub acc_at_k: MeanVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub sentences: usize,
    pub rejected: usize,
    pub methods: Vec<MethodSummary>,
    /// Sentences whose inline explanation failed, per method and seed.
    pub explain_failures: Vec<Reject>,
}

fn load_explanations(dir: &Path, method: Method, seed: u64, ids: &[&str]) -> Result<Vec<Explanation>> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for id in ids {
        let path = explanation_path(dir, method, seed, id);
        match std::fs::read_to_string(&path) {
            Ok(text) => found.push(serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?),
            Err(_) => missing.push(*id),
        }
    }
    if !missing.is_empty() {
        bail!("missing {method} explanations for seed {seed} in {}: {}", dir.display(), missing.join(", "));
    }
    Ok(found)
}

fn metric_rows(report: &MetricReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| vec![r.id.clone(), g17(r.fid), g17(r.fid_rand), g17(r.div_at_k), g17(r.acc_at_k)])
        .collect();
    let m = &report.mean;
    rows.push(vec!["mean".into(), g17(m.fid), g17(m.fid_rand), g17(m.div_at_k), g17(m.acc_at_k)]);
    rows
}

/// Scores every method and seed, then summarizes mean and variance across seeds.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluateSummary> {
    let dataset = load_dataset(config)?;
    if dataset.sentences.is_empty() {
        bail!("dataset is empty: {} records, none passed the filters", dataset.total);
    }
    let oracle = config.oracle.connect()?;
    let pool = config.thread_pool()?;
    let ids: Vec<&str> = dataset.sentences.iter().map(|(r, _)| r.id.as_str()).collect();

    let mut reports = Vec::new();
    let mut explain_failures = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            let explanations = match &config.explanations {
                Some(dir) => load_explanations(dir, method, seed, &ids)?,
                None => {
                    let results: Vec<_> = pool.install(|| {
                        dataset
                            .sentences
                            .par_iter()
                            .map(|(r, t)| explain_one(&*oracle, &r.id, t, method, seed, config))
                            .collect()
                    });
                    let mut ok = Vec::new();
                    for ((record, _), r) in dataset.sentences.iter().zip(results) {
                        match r {
                            Ok(e) => ok.push(e),
                            Err(e) => explain_failures.push(Reject::new(
                                record.id.clone(),
                                "attribution_failed",
                                format!("{method} seed {seed}: {e}"),
                            )),
                        }
                    }
                    ok
                }
            };
            let report = pool.install(|| evaluate_dataset(&explanations, &*oracle, &config.metric_config(seed)))?;
            reports.push((method, seed, report));
        }
    }

    let dir = config.out.join("metrics");
    let header = ["id", "fid", "fid_rand", "div_at_k", "acc_at_k"];
    for (method, seed, report) in &reports {
        let stem = dir.join(method.as_str()).join(format!("seed-{seed}"));
        write_json(&stem.with_extension("json"), report)?;
        write_csv(&stem.with_extension("csv"), &header, &metric_rows(report))?;
    }

    let mut methods = Vec::new();
    for &method in &config.methods {
        let per_seed: Vec<&MetricReport> = reports.iter().filter(|(m, _, _)| *m == method).map(|(_, _, r)| r).collect();
        let stat = |f: fn(&MetricReport) -> f64| {
            let xs: Vec<f64> = per_seed.iter().map(|r| f(r)).collect();
            let (mean, variance) = mean_variance(&xs).unwrap_or((f64::NAN, f64::NAN));
            MeanVariance { mean, variance }
        };
        methods.push(MethodSummary {
            method,
            seeds: config.seeds.clone(),
            fid: stat(|r| r.mean.fid),
            fid_rand: stat(|r| r.mean.fid_rand),
            div_at_k: stat(|r| r.mean.div_at_k),
            acc_at_k: stat(|r| r.mean.acc_at_k),
        });
    }
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|s| {
            let seeds = s.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            let mut row = vec![s.method.to_string(), seeds];
            for mv in [s.fid, s.fid_rand, s.div_at_k, s.acc_at_k] {
                row.push(g17(mv.mean));
                row.push(g17(mv.variance));
            }
            row
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        &[
            "method",
            "seeds",
            "fid_mean",
            "fid_variance",
            "fid_rand_mean",
            "fid_rand_variance",
            "div_at_k_mean",
            "div_at_k_variance",
            "acc_at_k_mean",
            "acc_at_k_variance",
        ],
        &rows,
    )?;
    let summary = EvaluateSummary { sentences: dataset.sentences.len(), rejected: dataset.rejects.len(), methods, explain_failures };
    write_json(&dir.join("summary.json"), &summary)?;
    write_rejects(&config.out.join("rejects.jsonl"), &dataset.rejects)?;
    Ok(summary)
}

/// Reads a JSONL file of `T`, turning malformed lines into rejects.
fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<Reject>)> {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in read_jsonl::<T>(path)? {
        match r {
            Ok(v) => ok.push(v),
            Err((line, e)) => bad.push(Reject::new(format!("line-{line}"), "malformed", e)),
        }
    }
    Ok((ok, bad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsRun {
    pub method: Method,
    pub seed: u64,
    pub report: CoherencyReport,
    pub pairs: Vec<SentencePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsSummary {
    pub runs: Vec<PairsRun>,
    pub skipped: Vec<Reject>,
}

struct PreparedPair {
    id: String,
    a: TokenizedTree,
    b: TokenizedTree,
    excluded_a: Vec<usize>,
    excluded_b: Vec<usize>,
}

/// Coherency of rank vectors between the two sentences of each pair, grouped
/// by whether the model predicts the same next token for both.
pub fn cmd_pairs(config: &RunConfig) -> Result<PairsSummary> {
    let Some(path) = &config.pairs else {
        bail!("--pairs is required");
    };
    let index = read_parses(config)?;
    let (records, mut skipped) = read_records::<PairRecord>(path)?;
    let mut prepared = Vec::new();
    for r in records {
        let trees = tokenized_sentence(&index, &format!("{}/a", r.id), &r.sentence_a, config)
            .and_then(|a| tokenized_sentence(&index, &format!("{}/b", r.id), &r.sentence_b, config).map(|b| (a, b)));
        let (a, b) = match trees {
            Ok(t) => t,
            Err(e) => {
                skipped.push(Reject::new(r.id, "unparsed", e));
                continue;
            }
        };
        let span_a = word_tokens(&a, &r.negation_token);
        let span_b = word_tokens(&b, &r.negation_token);
        if span_a.is_none() && span_b.is_none() {
            skipped.push(Reject::new(r.id, "negation_missing", format!("{:?} occurs in neither sentence", r.negation_token)));
            continue;
        }
        prepared.push(PreparedPair {
            id: r.id,
            a,
            b,
            excluded_a: span_a.map(Iterator::collect).unwrap_or_default(),
            excluded_b: span_b.map(Iterator::collect).unwrap_or_default(),
        });
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} pair records", skipped.len());
    }
    if prepared.is_empty() {
        bail!("no usable pair records in {}", path.display());
    }

    let oracle = config.oracle.connect()?;
    let pool = config.thread_pool()?;
    let mut runs = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            let results: Vec<Result<SentencePair, String>> = pool.install(|| {
                prepared
                    .par_iter()
                    .map(|p| {
                        let ea = explain_one(&*oracle, &p.id, &p.a, method, seed, config).map_err(|e| e.to_string())?;
                        let eb = explain_one(&*oracle, &p.id, &p.b, method, seed, config).map_err(|e| e.to_string())?;
                        Ok(SentencePair {
                            id: p.id.clone(),
                            predictions_equal: ea.result.target_token == eb.result.target_token,
                            ranks_a: ranks_excluding(&ea.result.values, &p.excluded_a),
                            ranks_b: ranks_excluding(&eb.result.values, &p.excluded_b),
                        })
                    })
                    .collect()
            });
            let mut pairs = Vec::new();
            for (p, r) in prepared.iter().zip(results) {
                match r {
                    Ok(pair) => pairs.push(pair),
                    Err(e) => skipped.push(Reject::new(p.id.clone(), "attribution_failed", format!("{method} seed {seed}: {e}"))),
                }
            }
            runs.push(PairsRun { method, seed, report: coherency(&pairs), pairs });
        }
    }

    let dir = config.out.join("pairs");
    let mut rows = Vec::new();
    for run in &runs {
        write_json(&dir.join(run.method.as_str()).join(format!("seed-{}.json", run.seed)), run)?;
        let opt = |v: Option<f64>| v.map(g17).unwrap_or_default();
        rows.push(vec![
            run.method.to_string(),
            run.seed.to_string(),
            run.report.equal.n.to_string(),
            opt(run.report.equal.mean_cosine),
            run.report.different.n.to_string(),
            opt(run.report.different.mean_cosine),
            opt(run.report.difference),
        ]);
    }
    write_csv(
        &dir.join("summary.csv"),
        &["method", "seed", "n_equal", "mean_cosine_equal", "n_different", "mean_cosine_different", "difference"],
        &rows,
    )?;
    write_rejects(&dir.join("skipped.jsonl"), &skipped)?;
    Ok(PairsSummary { runs, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRun {
    pub method: Method,
    pub seed: u64,
    pub report: AlignmentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub runs: Vec<AlignRun>,
    pub skipped: Vec<Reject>,
}

/// Rank of the negation token in each explanation.
pub fn cmd_align(config: &RunConfig) -> Result<AlignSummary> {
    let Some(path) = &config.align else {
        bail!("--align is required");
    };
    let index = read_parses(config)?;
    let (records, mut skipped) = read_records::<AlignRecord>(path)?;
    let mut prepared = Vec::new();
    for r in records {
        match tokenized_sentence(&index, &r.id, &r.sentence, config) {
            Ok(tree) => {
                let negation_index = word_tokens(&tree, &r.negation_token).map(|span| span.start);
                prepared.push((r.id, tree, negation_index));
            }
            Err(e) => skipped.push(Reject::new(r.id, "unparsed", e)),
        }
    }
    if prepared.is_empty() {
        bail!("no usable alignment records in {}", path.display());
    }

    let oracle = config.oracle.connect()?;
    let pool = config.thread_pool()?;
    let mut runs = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            let results: Vec<_> = pool.install(|| {
                prepared
                    .par_iter()
                    .map(|(id, tree, _)| explain_one(&*oracle, id, tree, method, seed, config))
                    .collect()
            });
            let mut records = Vec::new();
            for ((id, _, negation_index), r) in prepared.iter().zip(results) {
                match r {
                    Ok(e) => records.push(AlignmentRecord { id: id.clone(), negation_index: *negation_index, ranks: e.result.ranks }),
                    Err(e) => skipped.push(Reject::new(id.clone(), "attribution_failed", format!("{method} seed {seed}: {e}"))),
                }
            }
            runs.push(AlignRun { method, seed, report: semantic_alignment(&records) });
        }
    }

    let dir = config.out.join("align");
    let mut rows = Vec::new();
    for run in &runs {
        write_json(&dir.join(run.method.as_str()).join(format!("seed-{}.json", run.seed)), run)?;
        let distribution = run.report.distribution.iter().map(|(r, c)| format!("{r}:{c}")).collect::<Vec<_>>().join(";");
        rows.push(vec![
            run.method.to_string(),
            run.seed.to_string(),
            run.report.n.to_string(),
            run.report.top_rank_share.map(g17).unwrap_or_default(),
            distribution,
        ]);
    }
    write_csv(&dir.join("summary.csv"), &["method", "seed", "n", "top_rank_share", "rank_distribution"], &rows)?;
    write_rejects(&dir.join("skipped.jsonl"), &skipped)?;
    Ok(AlignSummary { runs, skipped })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub id: String,
    pub n: usize,
    pub depth: usize,
    pub level_widths: Vec<usize>,
    pub pair_count: u64,
    pub naive_shapley_count: u128,
    pub observed_pairs: u64,
    pub observed_unique: u64,
}

/// Predicted update counts against the calls an actual run makes.
pub fn cmd_counts(config: &RunConfig) -> Result<Vec<CountRow>> {
    let dataset = load_dataset(config)?;
    if dataset.sentences.is_empty() {
        bail!("dataset is empty: {} records, none passed the filters", dataset.total);
    }
    let oracle = config.oracle.connect()?;
    let settings = RunSettings { strategy: config.strategy, seed: config.seeds[0], target: None };
    let rows: Vec<Result<CountRow>> = config.thread_pool()?.install(|| {
        dataset
            .sentences
            .par_iter()
            .map(|(record, tree)| {
                let predicted = predicted_evaluations(tree)?;
                let run = syntaxshap(tree, &*oracle, &settings).with_context(|| format!("sentence {}", record.id))?;
                Ok(CountRow {
                    id: record.id.clone(),
                    n: tree.len(),
                    depth: tree.depth(),
                    level_widths: tree.level_widths(),
                    pair_count: predicted.pair_count,
                    naive_shapley_count: predicted.naive_shapley_count,
                    observed_pairs: run.oracle_calls.pairs,
                    observed_unique: run.oracle_calls.unique,
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.n.to_string(),
                r.depth.to_string(),
                r.level_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
                r.pair_count.to_string(),
                r.naive_shapley_count.to_string(),
                r.observed_pairs.to_string(),
                r.observed_unique.to_string(),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("counts.csv"),
        &["id", "n", "depth", "level_widths", "pair_count", "naive_shapley_count", "observed_pairs", "observed_unique"],
        &csv_rows,
    )?;
    write_json(&config.out.join("counts.json"), &rows)?;
    write_rejects(&config.out.join("rejects.jsonl"), &dataset.rejects)?;
    Ok(rows)
}
