//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Every check uses an implementation written here from
//! the definitions, independent of the engine's own enumeration code.
//!
//! Run: cargo test -p syntaxshap --test acceptance

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syntaxshap::attribution::{random_attribution, syntaxshap, syntaxshap_weighted, Explanation, RunSettings};
use syntaxshap::coalition::{coalitions_for_feature, count_updates, predicted_evaluations, Coalition};
use syntaxshap::deptree::{DependencyTree, TokenizedTree};
use syntaxshap::metrics::{evaluate_record, MetricConfig};
use syntaxshap::oracle::{ignore_token_lm, sum_oracle, toy_hash_lm, Strategy, TableOracle};

const ADDITIVITY_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-12;
const BRUTE_FORCE_TOL: f64 = 1e-12;
const DIV1_TOL: f64 = 1e-12;
const EFFICIENCY_GAP: f64 = 1e-3;

// fixtures

#[derive(Debug, Clone, Copy)]
enum Shape {
    Chain,
    Star,
    Bushy,
}

/// 1-based heads (0 for the root) of a random tree with `n` words.
fn random_heads(rng: &mut ChaCha8Rng, n: usize, shape: Shape) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=n).collect();
    for k in (1..n).rev() {
        order.swap(k, rng.random_range(0..=k));
    }
    let mut heads = vec![0; n];
    for k in 1..n {
        let head = match shape {
            Shape::Chain => order[k - 1],
            Shape::Star => order[0],
            Shape::Bushy => order[rng.random_range(0..k)],
        };
        heads[order[k] - 1] = head;
    }
    heads
}

fn random_tree(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_n);
    let shape = match rng.random_range(0..3) {
        0 => Shape::Chain,
        1 => Shape::Star,
        _ => Shape::Bushy,
    };
    random_heads(rng, n, shape)
}

fn tokenized(heads: &[usize]) -> TokenizedTree {
    let tree = DependencyTree::from_heads(heads).expect("valid heads");
    TokenizedTree::one_token_per_word(&tree, |w| w.bytes().map(u32::from).sum::<u32>() % 16)
}

/// Levels by walking head links to the root.
fn levels_of(heads: &[usize]) -> Vec<usize> {
    fn level(heads: &[usize], i: usize) -> usize {
        match heads[i] {
            0 => 1,
            h => 1 + level(heads, h - 1),
        }
    }
    (0..heads.len()).map(|i| level(heads, i)).collect()
}

/// Every nonempty S that holds all features above its deepest level, nothing
/// below it, and any nonempty part of that level; paired with that level.
fn allowed_coalitions(levels: &[usize]) -> Vec<(u64, usize)> {
    let n = levels.len();
    let mut out = Vec::new();
    for s in 1u64..(1 << n) {
        let top = (0..n).filter(|&j| s >> j & 1 == 1).map(|j| levels[j]).max().unwrap();
        let ok = (0..n).all(|j| {
            let inside = s >> j & 1 == 1;
            match levels[j].cmp(&top) {
                std::cmp::Ordering::Less => inside,
                std::cmp::Ordering::Greater => !inside,
                std::cmp::Ordering::Equal => true,
            }
        });
        if ok {
            out.push((s, top));
        }
    }
    out
}

/// The coalitions feature `i` joins: the empty set, then every allowed
/// coalition whose deepest level is at most `i`'s level and that leaves `i` out.
fn literal_feature_coalitions(levels: &[usize], allowed: &[(u64, usize)], i: usize) -> Vec<u64> {
    let mut out = vec![0];
    out.extend(allowed.iter().filter(|&&(s, top)| top <= levels[i] && s >> i & 1 == 0).map(|&(s, _)| s));
    out
}

/// Closed form from level widths: N_l = Σ_{p<l} 2^{n_p} + 2^{n_l-1} - l, with n_0 = 0.
fn closed_form_pairs(levels: &[usize]) -> u64 {
    let depth = levels.iter().copied().max().unwrap_or(0);
    let mut widths = vec![0u32; depth + 1];
    for &l in levels {
        widths[l] += 1;
    }
    (1..=depth)
        .map(|l| {
            let below: u64 = (0..l).map(|p| 1u64 << widths[p]).sum();
            let n_l = (below + (1u64 << (widths[l] - 1))) - l as u64;
            widths[l] as u64 * n_l
        })
        .sum()
}

fn table_of(rng: &mut ChaCha8Rng, n: usize) -> (TableOracle, Vec<f64>) {
    let values: Vec<f64> = (0..1usize << n).map(|_| rng.random::<f64>()).collect();
    let mut table = TableOracle::new(0, 2);
    for (bits, &v) in values.iter().enumerate() {
        table.insert(Coalition::from_bits(bits as u64), v);
    }
    (table, values)
}

fn fixed_target() -> RunSettings {
    RunSettings { target: Some(0), ..Default::default() }
}

// criteria

type Outcome = Result<String, String>;

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

fn update_count_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut features = 0;
    let mut shapes = [0usize; 3];
    for t in 0..200 {
        let shape = [Shape::Chain, Shape::Star, Shape::Bushy][t % 3];
        shapes[t % 3] += 1;
        let n = rng.random_range(1..=12);
        let heads = random_heads(&mut rng, n, shape);
        let tree = tokenized(&heads);
        let levels = levels_of(&heads);
        let allowed = allowed_coalitions(&levels);
        for i in 0..n {
            let engine = coalitions_for_feature(&tree, i).map_err(|e| e.to_string())?;
            let count = count_updates(&tree, levels[i]).map_err(|e| e.to_string())?.count;
            ensure(count == engine.len() as u64, || format!("{heads:?} feature {i}: closed form {count}, enumerated {}", engine.len()))?;
            let literal: HashSet<u64> = literal_feature_coalitions(&levels, &allowed, i).into_iter().collect();
            let listed: HashSet<u64> = engine.iter().map(|c| c.bits()).collect();
            ensure(literal == listed, || format!("{heads:?} feature {i}: coalition sets differ"))?;
            features += 1;
        }
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("200 trees ({} chains, {} stars, {} bushy, n <= 12), {features} features, exact integer equality, {took:.2?} < 10s", shapes[0], shapes[1], shapes[2]))
}

fn chain_closed_form() -> Outcome {
    let start = Instant::now();
    for n in 1..=10usize {
        let heads: Vec<usize> = (0..n).collect();
        let tree = tokenized(&heads);
        for l in 1..=n {
            let c = count_updates(&tree, l).map_err(|e| e.to_string())?.count;
            ensure(c == l as u64, || format!("chain {n}: N_{l} = {c}"))?;
        }
        let pairs = predicted_evaluations(&tree).map_err(|e| e.to_string())?.pair_count;
        ensure(pairs == (n * (n + 1) / 2) as u64, || format!("chain {n}: {pairs} pairs"))?;
    }
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("chains of 1..=10: N_l = l and n(n+1)/2 pairs, exact, {took:.2?} < 1s"))
}

fn brute_force_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = random_tree(&mut rng, 10);
        let n = heads.len();
        let levels = levels_of(&heads);
        let (table, f) = table_of(&mut rng, n);
        let allowed = allowed_coalitions(&levels);
        let engine = syntaxshap(&tokenized(&heads), &table, &fixed_target()).map_err(|e| e.to_string())?;
        for i in 0..n {
            let coalitions = literal_feature_coalitions(&levels, &allowed, i);
            let total: f64 = coalitions.iter().map(|&s| f[(s | 1 << i) as usize] - f[s as usize]).sum();
            let phi = total / coalitions.len() as f64;
            worst = worst.max((phi - engine.values[i]).abs());
        }
    }
    ensure(worst <= BRUTE_FORCE_TOL, || format!("max deviation {worst:e} > {BRUTE_FORCE_TOL:e}"))?;
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!("100 random (tree, table) fixtures, n <= 10, max |diff| {worst:.1e} <= {BRUTE_FORCE_TOL:e}, {took:.2?} < 30s"))
}

fn axiom_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut null_checks = 0;
    for _ in 0..40 {
        let heads = random_tree(&mut rng, 9);
        let tree = tokenized(&heads);
        let j = rng.random_range(0..heads.len());
        for strategy in [Strategy::ZeroAttention, Strategy::RandomReplace] {
            let lm = ignore_token_lm(toy_hash_lm(rng.random(), 16), j);
            let settings = RunSettings { strategy, seed: rng.random_range(0..100), target: None };
            let r = syntaxshap(&tree, &lm, &settings).map_err(|e| e.to_string())?;
            ensure(r.values[j] == 0.0, || format!("{heads:?}: ignored token {j} got {}", r.values[j]))?;
            null_checks += 1;
        }
    }

    let mut additivity = 0.0f64;
    for _ in 0..40 {
        let heads = random_tree(&mut rng, 9);
        let tree = tokenized(&heads);
        let (f, g) = (toy_hash_lm(rng.random(), 16), toy_hash_lm(rng.random(), 16));
        let s = RunSettings { target: Some(rng.random_range(0..16)), ..Default::default() };
        let rf = syntaxshap(&tree, &f, &s).map_err(|e| e.to_string())?;
        let rg = syntaxshap(&tree, &g, &s).map_err(|e| e.to_string())?;
        let rs = syntaxshap(&tree, &sum_oracle(f, g), &s).map_err(|e| e.to_string())?;
        for i in 0..tree.len() {
            additivity = additivity.max((rs.values[i] - rf.values[i] - rg.values[i]).abs());
        }
    }
    ensure(additivity <= ADDITIVITY_TOL, || format!("additivity deviation {additivity:e}"))?;

    let mut symmetry = 0.0f64;
    for _ in 0..40 {
        let heads = random_tree(&mut rng, 9);
        let levels = levels_of(&heads);
        let weights: Vec<f64> = (0..=heads.len()).map(|_| rng.random::<f64>()).collect();
        // depends only on how many kept features sit at each level
        let mut table = TableOracle::new(0, 2);
        for bits in 0u64..(1 << heads.len()) {
            let mut per_level = BTreeMap::new();
            for j in (0..heads.len()).filter(|&j| bits >> j & 1 == 1) {
                *per_level.entry(levels[j]).or_insert(0usize) += 1;
            }
            let v: f64 = per_level.iter().map(|(&l, &c)| weights[l] * (c * c) as f64).sum::<f64>().tanh();
            table.insert(Coalition::from_bits(bits), v);
        }
        let r = syntaxshap(&tokenized(&heads), &table, &fixed_target()).map_err(|e| e.to_string())?;
        for i in 0..heads.len() {
            for j in 0..heads.len() {
                if levels[i] == levels[j] {
                    symmetry = symmetry.max((r.values[i] - r.values[j]).abs());
                }
            }
        }
    }
    ensure(symmetry <= SYMMETRY_TOL, || format!("symmetry deviation {symmetry:e}"))?;

    // chain of three with a strong interaction between the first two words
    let witness = TableOracle::new(0, 2)
        .with(&[], 0.10)
        .with(&[0], 0.30)
        .with(&[1], 0.15)
        .with(&[2], 0.12)
        .with(&[0, 1], 0.60)
        .with(&[0, 2], 0.35)
        .with(&[1, 2], 0.20)
        .with(&[0, 1, 2], 0.90);
    let r = syntaxshap(&tokenized(&[0, 1, 2]), &witness, &fixed_target()).map_err(|e| e.to_string())?;
    let sum: f64 = r.values.iter().sum();
    let gap = (sum - (0.90 - 0.10)).abs();
    ensure(gap > EFFICIENCY_GAP, || format!("witness sums to {sum}, efficiency would hold"))?;

    let took = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "nullity exact on {null_checks} runs; additivity max {additivity:.1e} <= {ADDITIVITY_TOL:e}; per-level symmetry max {symmetry:.1e} <= {SYMMETRY_TOL:e}; non-efficiency witness gap {gap:.4}; {took:.2?} < 10s"
    ))
}

fn weighted_relation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fixtures = 0;
    for _ in 0..100 {
        let heads = random_tree(&mut rng, 10);
        let tree = tokenized(&heads);
        let levels = levels_of(&heads);
        let lm = toy_hash_lm(rng.random(), 16);
        let s = RunSettings { seed: rng.random_range(0..4), ..Default::default() };
        let a = syntaxshap(&tree, &lm, &s).map_err(|e| e.to_string())?;
        let w = syntaxshap_weighted(&tree, &lm, &s).map_err(|e| e.to_string())?;
        for i in 0..heads.len() {
            let expected = a.values[i] / levels[i] as f64;
            ensure(w.values[i].to_bits() == expected.to_bits(), || format!("{heads:?} feature {i}: {} vs {expected}", w.values[i]))?;
        }
        for l in 1..=levels.iter().copied().max().unwrap() {
            let order = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..heads.len()).filter(|&i| levels[i] == l).collect();
                idx.sort_by(|&x, &y| v[y].total_cmp(&v[x]).then(x.cmp(&y)));
                idx
            };
            ensure(order(&a.values) == order(&w.values), || format!("{heads:?}: level {l} order differs"))?;
        }
        fixtures += 1;
    }
    Ok(format!("{fixtures} fixtures: weighted = value / level bit-exact, within-level order identical"))
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lm = toy_hash_lm(17, 32);
    let mut explanations = Vec::new();
    for k in 0..30 {
        let heads = random_tree(&mut rng, 8);
        let tree = tokenized(&heads);
        let r = syntaxshap(&tree, &lm, &RunSettings::default()).map_err(|e| e.to_string())?;
        explanations.push(Explanation::new(format!("s{k}"), &tree, r));
    }

    let mut worst_div1 = 0.0f64;
    for e in &explanations {
        let full = MetricConfig { t: 1.0, k: 10, strategy: Strategy::ZeroAttention, seed: 0 };
        let m = evaluate_record(e, &lm, &full).map_err(|e| e.to_string())?;
        ensure(m.fid == 0.0 && m.div_at_k == 0.0 && m.acc_at_k == 1.0, || format!("{}: t=1 gave {m:?}", e.id))?;
        let one = MetricConfig { t: 0.5, k: 1, strategy: Strategy::ZeroAttention, seed: 0 };
        let m = evaluate_record(e, &lm, &one).map_err(|e| e.to_string())?;
        worst_div1 = worst_div1.max((m.div_at_k - m.fid).abs());
    }
    ensure(worst_div1 <= DIV1_TOL, || format!("div@1 differs from Fid by {worst_div1:e}"))?;

    let mut checked = 0;
    for k in 0..1000 {
        let heads = random_tree(&mut rng, 8);
        let tree = tokenized(&heads);
        let lm = toy_hash_lm(rng.random(), 16);
        let seed = rng.random_range(0..4);
        let result = if k % 2 == 0 {
            syntaxshap(&tree, &lm, &RunSettings { seed, ..Default::default() }).map_err(|e| e.to_string())?
        } else {
            let target = syntaxshap::oracle::top1(&lm, &tree.token_ids(), seed).map_err(|e| e.to_string())?.0;
            random_attribution(tree.len(), seed).with_target(target)
        };
        let e = Explanation::new(format!("r{k}"), &tree, result);
        let config = MetricConfig {
            t: rng.random_range(0.01..=1.0),
            k: rng.random_range(1..=16),
            strategy: if rng.random() { Strategy::ZeroAttention } else { Strategy::RandomReplace },
            seed,
        };
        let m = evaluate_record(&e, &lm, &config).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&m.acc_at_k), || format!("acc@K = {} on fixture {k}", m.acc_at_k))?;
        checked += 1;
    }
    Ok(format!(
        "t=1: Fid = div@K = 0 and acc@K = 1 on {} records; |div@1 - Fid| max {worst_div1:.1e} <= {DIV1_TOL:e}; acc@K in [0, 1] on {checked} fixtures",
        explanations.len()
    ))
}

fn call_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut trees = 0;
    let mut unique_checked = 0;
    for t in 0..150 {
        let shape = [Shape::Chain, Shape::Star, Shape::Bushy][t % 3];
        let n = rng.random_range(1..=12);
        let heads = random_heads(&mut rng, n, shape);
        let levels = levels_of(&heads);
        let lm = toy_hash_lm(rng.random(), 16);
        let r = syntaxshap(&tokenized(&heads), &lm, &RunSettings::default()).map_err(|e| e.to_string())?;
        let expected = closed_form_pairs(&levels);
        ensure(r.oracle_calls.pairs == expected, || format!("{heads:?}: {} pairs counted, closed form {expected}", r.oracle_calls.pairs))?;
        if n <= 10 {
            let allowed = allowed_coalitions(&levels);
            let mut seen = HashSet::new();
            for i in 0..n {
                for s in literal_feature_coalitions(&levels, &allowed, i) {
                    seen.insert(s);
                    seen.insert(s | 1 << i);
                }
            }
            ensure(r.oracle_calls.unique == seen.len() as u64, || {
                format!("{heads:?}: {} unique counted, {} distinct sets", r.oracle_calls.unique, seen.len())
            })?;
            unique_checked += 1;
        }
        trees += 1;
    }
    Ok(format!("pair counter = sum n_l N_l exactly on {trees} trees (n <= 12); unique counter = distinct sets on {unique_checked} trees (n <= 10)"))
}

const CORPUS: &str = "\
# sent_id = a1
# text = the old cat sat on the mat
1\tthe\tthe\tDET\t_\t_\t3\tdet\t_\t_
2\told\told\tADJ\t_\t_\t3\tamod\t_\t_
3\tcat\tcat\tNOUN\t_\t_\t4\tnsubj\t_\t_
4\tsat\tsit\tVERB\t_\t_\t0\troot\t_\t_
5\ton\ton\tADP\t_\t_\t7\tcase\t_\t_
6\tthe\tthe\tDET\t_\t_\t7\tdet\t_\t_
7\tmat\tmat\tNOUN\t_\t_\t4\tobl\t_\t_

# sent_id = a2
# text = dogs do not bark
1\tdogs\tdog\tNOUN\t_\t_\t4\tnsubj\t_\tTokIds=5,9|TokForms=dog,s
2\tdo\tdo\tAUX\t_\t_\t4\taux\t_\tTokIds=11
3\tnot\tnot\tPART\t_\t_\t4\tadvmod\t_\tTokIds=12
4\tbark\tbark\tVERB\t_\t_\t0\troot\t_\tTokIds=30

# sent_id = a3
# text = a mom is a
1\ta\ta\tDET\t_\t_\t2\tdet\t_\t_
2\tmom\tmom\tNOUN\t_\t_\t0\troot\t_\t_
3\tis\tbe\tAUX\t_\t_\t2\tcop\t_\t_
4\ta\ta\tDET\t_\t_\t2\tdet\t_\t_

# sent_id = a4
# text = birds sing
1\tbirds\tbird\tNOUN\t_\t_\t2\tnsubj\t_\t_
2\tsing\tsing\tVERB\t_\t_\t0\troot\t_\t_

";

const DATASET: &str = r#"{"id": "a1", "sentence": "the old cat sat on the mat"}
{"id": "a2", "sentence": "dogs do not bark"}
{"id": "a3", "sentence": "a mom is a"}
{"id": "a4", "sentence": "birds sing"}
{"id": "a5", "sentence": "wait, what?"}
"#;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conllu = tmp.path().join("corpus.conllu");
    let dataset = tmp.path().join("dataset.jsonl");
    std::fs::write(&conllu, CORPUS).map_err(|e| e.to_string())?;
    std::fs::write(&dataset, DATASET).map_err(|e| e.to_string())?;

    let run = |out: &str, workers: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let dir = tmp.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_syntaxshap"))
            .args(["explain", "--conllu"])
            .arg(&conllu)
            .arg("--dataset")
            .arg(&dataset)
            .args(["--methods", "syntaxshap,syntaxshap_w,exact_shapley,random", "--seeds", "0,1", "--strategy", "random_replace"])
            .args(["--workers", workers, "--out"])
            .arg(&dir)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("explain exited with {status}"))?;
        Ok(snapshot(&dir))
    };
    let first = run("run1", "4")?;
    let second = run("run2", "4")?;
    let single = run("run3", "1")?;
    ensure(first.len() == 4 * 4 * 2 + 2, || format!("{} files written", first.len()))?;
    ensure(first == second, || "two identical runs differ".into())?;
    ensure(first == single, || "worker count changed the output".into())?;
    let bytes: usize = first.values().map(Vec::len).sum();
    Ok(format!("two identical explain runs byte-identical ({} files, {bytes} bytes); also identical with 1 worker", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("update-count closed form", update_count_exactness),
        ("chain closed form", chain_closed_form),
        ("brute-force equivalence", brute_force_equivalence),
        ("axiom suite", axiom_suite),
        ("weighted relation", weighted_relation),
        ("metric identities", metric_identities),
        ("call accounting", call_accounting),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
