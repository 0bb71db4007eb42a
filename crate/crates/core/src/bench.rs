//! Built-in Nguyen and Feynman benchmark equations, data simulation and
//! multi-run experiments.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse_infix, CompiledExpr, ExprTree, Symbol, Vocabulary};
use crate::grammar::{builtin_grammars, builtin_vocabulary};
use crate::hvae::HvaeModel;
use crate::sr::{evolve, grammar_search, mix, random_search, Dataset, Method, RunReport, SearchConfig, SrTask};

pub const DEFAULT_POINTS: usize = 5000;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkEquation {
    pub id: String,
    pub expression: ExprTree,
    pub variables: Vec<String>,
    /// Sampling interval per variable.
    pub intervals: Vec<(f64, f64)>,
    pub points: usize,
    /// Name of the builtin token library / grammar the equation is searched with.
    pub library: &'static str,
    /// False when the library cannot express the equation.
    pub reconstructable: bool,
}

impl BenchmarkEquation {
    pub fn suite(&self) -> &'static str {
        if self.id.starts_with("NG") {
            "nguyen"
        } else {
            "feynman"
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        builtin_vocabulary(self.library).expect("builtin library")
    }
}

/// Parses an infix ground truth whose own tokens form the vocabulary.
fn ground_truth(infix: &str) -> ExprTree {
    let tokens: Vec<&str> = infix.split_whitespace().collect();
    let names: Vec<&str> = tokens
        .iter()
        .copied()
        .filter(|t| *t != "(" && *t != ")" && t.parse::<f64>().is_err())
        .collect();
    let mut unique: Vec<&str> = Vec::new();
    for n in names {
        if !unique.contains(&n) {
            unique.push(n);
        }
    }
    let vocab = Vocabulary::from_names(&unique).expect("ground-truth tokens");
    parse_infix(&tokens, &vocab).expect("ground-truth expression")
}

fn eq(
    id: &str,
    infix: &str,
    vars: &[&str],
    intervals: &[(f64, f64)],
    library: &'static str,
) -> BenchmarkEquation {
    let expression = ground_truth(infix);
    let reconstructable = !contains(&expression, &Symbol::Asin);
    BenchmarkEquation {
        id: id.to_string(),
        expression,
        variables: vars.iter().map(|v| v.to_string()).collect(),
        intervals: intervals.to_vec(),
        points: DEFAULT_POINTS,
        library,
        reconstructable,
    }
}

fn contains(t: &ExprTree, s: &Symbol) -> bool {
    t.symbol() == s || t.left().is_some_and(|l| contains(l, s)) || t.right().is_some_and(|r| contains(r, s))
}

/// NG-1..NG-10 and the 16 Feynman entries FM-1..FM-12.
pub fn builtin_benchmarks() -> BTreeMap<String, BenchmarkEquation> {
    let big = (-20.0, 20.0);
    let sqrt_2pi = (2.0 * PI).sqrt();
    let list = vec![
        eq("NG-1", "x ^3 + x ^2 + x", &["x"], &[big], "nguyen"),
        eq("NG-2", "x ^4 + x ^3 + x ^2 + x", &["x"], &[big], "nguyen"),
        eq("NG-3", "x ^5 + x ^4 + x ^3 + x ^2 + x", &["x"], &[big], "nguyen"),
        eq("NG-4", "x ^6 + x ^5 + x ^4 + x ^3 + x ^2 + x", &["x"], &[big], "nguyen"),
        eq("NG-5", "sin ( x ^2 ) * cos ( x ) - 1", &["x"], &[big], "nguyen"),
        eq("NG-6", "sin ( x ) + sin ( x + x ^2 )", &["x"], &[big], "nguyen"),
        eq("NG-7", "log ( x + 1 ) + log ( x ^2 + 1 )", &["x"], &[(0.0, 40.0)], "nguyen"),
        eq("NG-8", "sqrt ( x )", &["x"], &[(0.0, 80.0)], "nguyen"),
        eq("NG-9", "sin ( x ) + sin ( y ^2 )", &["x", "y"], &[(0.0, 20.0); 2], "nguyen2"),
        eq("NG-10", "2 * sin ( x ) * cos ( y )", &["x", "y"], &[(0.0, 20.0); 2], "nguyen2"),
        eq(
            "FM-1",
            &format!("{} * exp ( ( 0 - x ^2 ) / 2 )", 1.0 / sqrt_2pi),
            &["x"],
            &[(1.0, 3.0)],
            "feynman",
        ),
        eq(
            "FM-2",
            &format!("exp ( ( 0 - ( x / y ) ^2 ) / 2 ) / ( {sqrt_2pi} * y )"),
            &["x", "y"],
            &[(1.0, 3.0); 2],
            "feynman2",
        ),
        eq("FM-3.1", "x * y", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-3.2", "x * y", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-4.1", "0.5 * x * y ^2", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-4.2", "0.5 * x * y ^2", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-5.1", "x / y", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-5.2", "x / y", &["x", "y"], &[(1.0, 10.0); 2], "feynman2"),
        eq("FM-6", "asin ( x * sin ( y ) )", &["x", "y"], &[(0.0, 1.0), (1.0, 5.0)], "feynman2"),
        eq("FM-7.1", &format!("x * y / {}", 2.0 * PI), &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-7.2", &format!("x * y / {}", 2.0 * PI), &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-8", "1.5 * x * y", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-9", &format!("x / ( {} * y ^2 )", 4.0 * PI), &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq(
            "FM-10",
            &format!("( 1 + x * y ) / ( 1 - {} * x * y )", 1.0 / 3.0),
            &["x", "y"],
            &[(0.0, 1.0); 2],
            "feynman2",
        ),
        eq("FM-11", "x * y ^2", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
        eq("FM-12", "x / ( 2 * ( 1 + y ) )", &["x", "y"], &[(1.0, 5.0); 2], "feynman2"),
    ];
    list.into_iter().map(|e| (e.id.clone(), e)).collect()
}

fn draw(eq: &BenchmarkEquation, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let expr = CompiledExpr::compile(&eq.expression, &eq.variables)?;
    let mut columns = vec![Vec::with_capacity(eq.points); eq.variables.len()];
    let mut y = Vec::with_capacity(eq.points);
    let mut attempts = 0;
    let limit = eq.points.saturating_mul(100).max(1000);
    let mut row = vec![vec![0.0]; eq.variables.len()];
    while y.len() < eq.points {
        attempts += 1;
        if attempts > limit {
            return Err(Error::Rejected {
                attempts: limit,
                reason: format!("{} is undefined on most of its interval", eq.id),
            });
        }
        for (j, &(lo, hi)) in eq.intervals.iter().enumerate() {
            row[j][0] = rng.random_range(lo..hi);
        }
        if let Some(v) = expr.eval(&row, &[]) {
            for j in 0..row.len() {
                columns[j].push(row[j][0]);
            }
            y.push(v[0]);
        }
    }
    Ok(Dataset { columns, y })
}

/// Train and test sets from independent streams derived from `seed`.
pub fn simulate(eq: &BenchmarkEquation, seed: u64, budget: usize) -> Result<SrTask> {
    let train = draw(eq, &mut ChaCha8Rng::seed_from_u64(mix(seed, 0x7261_696e)))?;
    let test = draw(eq, &mut ChaCha8Rng::seed_from_u64(mix(seed, 0x7465_7374)))?;
    Ok(SrTask::new(&eq.id, eq.variables.clone(), train, test, budget)?
        .with_ground_truth(eq.expression.clone())
        .with_vocab(eq.vocabulary()))
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of run `k` of equation `id`.
pub fn run_seed(master: u64, id: &str, k: usize) -> u64 {
    mix(mix(master, id_hash(id)), k as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub id: String,
    pub method: Method,
    pub runs: usize,
    pub successes: usize,
    pub mean_r2: f64,
    pub std_r2: f64,
    /// Over successful runs only.
    pub mean_evaluations: Option<f64>,
    pub std_evaluations: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Aggregates the runs of one equation. Standard deviations are population
/// standard deviations.
pub fn summarize(id: &str, method: Method, reports: &[RunReport]) -> SummaryRow {
    let r2: Vec<f64> = reports.iter().map(|r| r.best_test_r2).collect();
    let (mean_r2, std_r2) = if r2.is_empty() { (0.0, 0.0) } else { mean_std(&r2) };
    let evals: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.evaluations_to_success.map(|e| e as f64))
        .collect();
    let (me, se) = if evals.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&evals);
        (Some(m), Some(s))
    };
    SummaryRow {
        id: id.to_string(),
        method,
        runs: reports.len(),
        successes: evals.len(),
        mean_r2,
        std_r2,
        mean_evaluations: me,
        std_evaluations: se,
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "method",
        "runs",
        "successes",
        "mean_r2",
        "std_r2",
        "mean_evaluations",
        "std_evaluations",
    ])?;
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.2}"));
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.method.as_str().to_string(),
            r.runs.to_string(),
            r.successes.to_string(),
            format!("{:.4}", r.mean_r2),
            format!("{:.4}", r.std_r2),
            opt(r.mean_evaluations),
            opt(r.std_evaluations),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn curve_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["evaluations", "best_train_rmse", "best_test_r2"])?;
    for p in &report.curve {
        w.write_record([
            p.evaluations.to_string(),
            format!("{:e}", p.best_train_rmse),
            format!("{}", p.best_test_r2),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub method: Method,
    pub ids: Vec<String>,
    pub runs: usize,
    pub budget: usize,
    pub seed: u64,
    pub search: SearchConfig,
}

/// Picks the model whose variables are exactly those of the equation.
fn model_for<'m>(models: &'m [HvaeModel], eq: &BenchmarkEquation) -> Result<&'m HvaeModel> {
    let mut want = eq.variables.clone();
    want.sort();
    models
        .iter()
        .find(|m| m.vocab().variables() == want)
        .ok_or_else(|| Error::Config(format!("no model with variables {want:?} for {}", eq.id)))
}

/// One search run of `method` on `eq`.
pub fn run_once(
    eq: &BenchmarkEquation,
    method: Method,
    models: &[HvaeModel],
    budget: usize,
    search: &SearchConfig,
    seed: u64,
) -> Result<RunReport> {
    let task = simulate(eq, seed, budget)?;
    match method {
        Method::Edhie => evolve(model_for(models, eq)?, &task, search, seed),
        Method::Hvar => random_search(model_for(models, eq)?, &task, search, seed),
        Method::Grammar => {
            let grammars = builtin_grammars();
            let g = grammars
                .get(eq.library)
                .ok_or_else(|| Error::Config(format!("no grammar for {}", eq.library)))?;
            grammar_search(g, &task, search, seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub summary: Vec<SummaryRow>,
    /// Per equation, per run.
    pub reports: Vec<(String, Vec<RunReport>)>,
}

/// Runs every requested equation `runs` times. Jobs run concurrently; seeds
/// depend only on the master seed, the equation id and the run index.
pub fn run_experiment(cfg: &ExperimentConfig, models: &[HvaeModel]) -> Result<ExperimentResult> {
    if cfg.runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let all = builtin_benchmarks();
    let eqs = cfg
        .ids
        .iter()
        .map(|id| all.get(id).cloned().ok_or_else(|| Error::UnknownBenchmark(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..eqs.len()).flat_map(|e| (0..cfg.runs).map(move |k| (e, k))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(e, k)| {
            let eq = &eqs[e];
            run_once(eq, cfg.method, models, cfg.budget, &cfg.search, run_seed(cfg.seed, &eq.id, k))
        })
        .collect::<Result<Vec<RunReport>>>()?;
    let mut grouped = Vec::new();
    let mut summary = Vec::new();
    for (e, chunk) in reports.chunks(cfg.runs).enumerate() {
        summary.push(summarize(&eqs[e].id, cfg.method, chunk));
        grouped.push((eqs[e].id.clone(), chunk.to_vec()));
    }
    Ok(ExperimentResult {
        summary,
        reports: grouped,
    })
}

/// Writes `summary.csv`, `runs/<id>_<k>.json` and `curves/<id>_<k>.csv`.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("runs"))?;
    std::fs::create_dir_all(dir.join("curves"))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&result.summary)?)?;
    for (id, runs) in &result.reports {
        for (k, r) in runs.iter().enumerate() {
            std::fs::write(dir.join("runs").join(format!("{id}_{k}.json")), serde_json::to_string_pretty(r)?)?;
            std::fs::write(dir.join("curves").join(format!("{id}_{k}.csv")), curve_csv(r)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::rmse;
    use crate::sr::{bounded_r2, fit_constants, FitConfig};

    #[test]
    fn catalogue() {
        let b = builtin_benchmarks();
        assert_eq!(b.keys().filter(|k| k.starts_with("NG")).count(), 10);
        assert_eq!(b.keys().filter(|k| k.starts_with("FM")).count(), 16);
        assert_eq!(b["NG-5"].expression.infix_string(), ground_truth("sin ( x ^2 ) * cos ( x ) - 1").infix_string());
        assert_eq!(b["NG-9"].variables, ["x", "y"]);
        assert!(!b["FM-6"].reconstructable);
        assert!(b.values().filter(|e| e.id != "FM-6").all(|e| e.reconstructable));
        assert_eq!(b["NG-7"].intervals, [(0.0, 40.0)]);
        assert_eq!(b["NG-8"].intervals, [(0.0, 80.0)]);
    }

    #[test]
    fn literal_values() {
        let b = builtin_benchmarks();
        let at = |id: &str, x: f64, y: f64| {
            let e = &b[id];
            let m = [("x".to_string(), x), ("y".to_string(), y)].into_iter().collect();
            e.expression.evaluate(&m, &[]).unwrap().unwrap()
        };
        let fm1 = (2.0 * PI).powf(-0.5) * (-(1.5f64).powi(2) / 2.0).exp();
        assert!((at("FM-1", 1.5, 0.0) - fm1).abs() < 1e-15);
        let fm10 = (1.0 + 0.25) / (1.0 - 0.25 / 3.0);
        assert!((at("FM-10", 0.5, 0.5) - fm10).abs() < 1e-15);
        assert_eq!(at("NG-1", 2.0, 0.0), 14.0);
        assert_eq!(at("FM-12", 4.0, 1.0), 1.0);
    }

    #[test]
    fn ground_truth_self_fit() {
        for eq in builtin_benchmarks().values() {
            let mut e = eq.clone();
            e.points = 300;
            let task = simulate(&e, 1, 1).unwrap();
            let (_, r) = fit_constants(&e.expression, &e.variables, &task.train, &FitConfig::default(), 0).unwrap();
            assert!(r < 1e-10, "{} {r}", e.id);
            let pred = CompiledExpr::compile(&e.expression, &e.variables)
                .unwrap()
                .eval(&task.test.columns, &[]);
            assert_eq!(bounded_r2(pred.as_deref(), &task.test.y, task.train.mean_y()), 1.0, "{}", e.id);
        }
    }

    #[test]
    fn simulation_is_seeded_and_split() {
        let eq = &builtin_benchmarks()["NG-8"];
        let a = simulate(eq, 4, 10).unwrap();
        assert_eq!(a, simulate(eq, 4, 10).unwrap());
        assert_eq!(a.train.len(), 5000);
        assert!(a.train.y.iter().all(|y| y.is_finite()));
        assert_ne!(a.train.columns, a.test.columns);
        assert!(a.train.columns[0].iter().all(|x| (0.0..80.0).contains(x)));
    }

    #[test]
    fn grammar_baseline_success_verifies_on_fresh_data() {
        let eq = builtin_benchmarks()["NG-8"].clone();
        let cfg = SearchConfig::default();
        let r = run_once(&eq, Method::Grammar, &[], 5000, &cfg, 11).unwrap();
        assert!(r.success, "{r:?}");
        let fresh = simulate(&eq, 999, 1).unwrap();
        let vocab = eq.vocabulary();
        let toks: Vec<&str> = r.best_expression.as_deref().unwrap().split_whitespace().collect();
        let t = crate::expr::parse_postfix(&toks, &vocab).unwrap();
        let pred = CompiledExpr::compile(&t, &eq.variables)
            .unwrap()
            .eval(&fresh.test.columns, &r.best_constants);
        assert!(rmse(pred.as_deref(), &fresh.test.y) < 1e-8);
    }

    #[test]
    fn one_equation_one_run() {
        let cfg = ExperimentConfig {
            method: Method::Grammar,
            ids: vec!["FM-3.1".into()],
            runs: 1,
            budget: 500,
            seed: 3,
            search: SearchConfig::default(),
        };
        let res = run_experiment(&cfg, &[]).unwrap();
        assert_eq!(res.summary.len(), 1);
        let csv = summary_csv(&res.summary).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&res, dir.path()).unwrap();
        let json = std::fs::read_to_string(dir.path().join("runs/FM-3.1_0.json")).unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(summarize("FM-3.1", Method::Grammar, &[back]), res.summary[0]);
        assert!(dir.path().join("curves/FM-3.1_0.csv").exists());
    }

    #[test]
    fn unknown_id() {
        let cfg = ExperimentConfig {
            method: Method::Grammar,
            ids: vec!["NG-99".into()],
            runs: 1,
            budget: 1,
            seed: 0,
            search: SearchConfig::default(),
        };
        assert!(matches!(run_experiment(&cfg, &[]), Err(Error::UnknownBenchmark(_))));
    }
}
