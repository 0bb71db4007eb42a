//! Symbolic regression: EDHiE (evolution in the latent space), random
//! latent sampling, grammar sampling, constant fitting and scoring.

mod fit;
mod search;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{canonicalize, rmse, CompiledExpr, ExprTree, Vocabulary};

pub use fit::{fit_constants, nelder_mead, FitConfig};
pub use search::{
    crossover, crossover_with, evolve, grammar_search, mutate, mutate_with, random_search, EaConfig,
    Individual, SearchConfig,
};

/// Column-major samples: one column per variable plus the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mean_y(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Reads a CSV with a header; the last column is the target. Returns the
    /// variable names and the data.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Dataset)> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.len() < 2 {
            return Err(Error::Format("task CSV needs at least one variable and a target".into()));
        }
        let nvars = header.len() - 1;
        let mut columns = vec![Vec::new(); nvars];
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("not a number: `{field}`")))?;
                if j < nvars {
                    columns[j].push(v);
                } else {
                    y.push(v);
                }
            }
        }
        Ok((header[..nvars].to_vec(), Dataset { columns, y }))
    }

    pub fn write_csv(&self, variables: &[String], target: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = variables.iter().map(String::as_str).collect();
        header.push(target);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.columns.iter().map(|c| format!("{:e}", c[i])).collect();
            row.push(format!("{:e}", self.y[i]));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrTask {
    pub name: String,
    pub variables: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
    /// Token library the task is meant to be solved with.
    #[serde(skip)]
    pub vocab: Option<Vocabulary>,
    /// Maximum number of unique expressions scored.
    pub budget: usize,
    /// Train RMSE below which a candidate counts as a hit.
    pub threshold: f64,
    /// Test RMSE accepted as equivalence when canonical forms differ.
    pub test_threshold: f64,
    #[serde(skip)]
    pub ground_truth: Option<ExprTree>,
}

impl SrTask {
    pub fn new(name: &str, variables: Vec<String>, train: Dataset, test: Dataset, budget: usize) -> Result<Self> {
        for (what, d) in [("train", &train), ("test", &test)] {
            if d.columns.len() != variables.len() {
                return Err(Error::Shape(format!(
                    "{what} data has {} columns for {} variables",
                    d.columns.len(),
                    variables.len()
                )));
            }
            if d.is_empty() || d.columns.iter().any(|c| c.len() != d.y.len()) {
                return Err(Error::Shape(format!("{what} data is empty or ragged")));
            }
        }
        if budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        Ok(SrTask {
            name: name.to_string(),
            variables,
            train,
            test,
            vocab: None,
            budget,
            threshold: 1e-10,
            test_threshold: 1e-8,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, t: ExprTree) -> Self {
        self.ground_truth = Some(canonicalize(&t));
        self
    }

    pub fn with_vocab(mut self, v: Vocabulary) -> Self {
        self.vocab = Some(v);
        self
    }

    fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        for v in vocab.variables() {
            if !self.variables.contains(&v) {
                return Err(Error::UnboundVariable(format!("{v} (task {} has {:?})", self.name, self.variables)));
            }
        }
        Ok(())
    }
}

/// `max(0, 1 - SS_res / SS_tot)` with `SS_tot` around the training mean.
/// Undefined predictions score 0.
pub fn bounded_r2(y_hat: Option<&[f64]>, y: &[f64], y_train_mean: f64) -> f64 {
    let Some(y_hat) = y_hat else { return 0.0 };
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - y_train_mean).powi(2)).sum();
    if !ss_res.is_finite() {
        return 0.0;
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Edhie,
    Hvar,
    Grammar,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edhie" => Ok(Method::Edhie),
            "hvar" => Ok(Method::Hvar),
            "grammar" | "proged" => Ok(Method::Grammar),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Edhie => "edhie",
            Method::Hvar => "hvar",
            Method::Grammar => "grammar",
        }
    }
}

// JSON has no infinity; serde_json writes it as null.
fn null_as_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

fn nulls_as_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Vec::<Option<f64>>::deserialize(d)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::INFINITY))
        .collect())
}

/// Best-so-far after a number of unique evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub evaluations: usize,
    #[serde(deserialize_with = "null_as_inf")]
    pub best_train_rmse: f64,
    pub best_test_r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub success: bool,
    /// Postfix of the best expression, constants as placeholders.
    pub best_expression: Option<String>,
    pub best_constants: Vec<f64>,
    #[serde(deserialize_with = "null_as_inf")]
    pub best_train_rmse: f64,
    pub best_test_r2: f64,
    /// Unique expressions scored up to and including the hit.
    pub evaluations_to_success: Option<usize>,
    pub unique_evaluated: usize,
    pub generations: usize,
    /// Best train RMSE after each generation (one entry per batch for the
    /// sampling baselines).
    #[serde(deserialize_with = "nulls_as_inf")]
    pub best_rmse_trace: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug)]
struct Scored {
    tree: ExprTree,
    constants: Vec<f64>,
    rmse: f64,
}

/// Deduplicating scorer shared by all search methods.
struct Evaluator<'a> {
    task: &'a SrTask,
    fit: &'a FitConfig,
    seed: u64,
    seen: HashMap<String, f64>,
    unique: usize,
    success_at: Option<usize>,
    best: Option<Scored>,
    best_r2: f64,
    curve: Vec<CurvePoint>,
    compiled_truth: Option<String>,
}

pub(crate) fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'a> Evaluator<'a> {
    fn new(task: &'a SrTask, fit: &'a FitConfig, seed: u64) -> Self {
        Evaluator {
            task,
            fit,
            seed,
            seen: HashMap::new(),
            unique: 0,
            success_at: None,
            best: None,
            best_r2: 0.0,
            curve: Vec::new(),
            compiled_truth: task.ground_truth.as_ref().map(|t| t.postfix_string()),
        }
    }

    fn done(&self) -> bool {
        self.success_at.is_some() || self.unique >= self.task.budget
    }

    fn test_prediction(&self, s: &Scored) -> Option<Vec<f64>> {
        CompiledExpr::compile(&s.tree, &self.task.variables)
            .ok()?
            .eval(&self.task.test.columns, &s.constants)
    }

    fn is_success(&self, s: &Scored) -> bool {
        if !(s.rmse < self.task.threshold) {
            return false;
        }
        if self.compiled_truth.as_deref() == Some(s.tree.postfix_string().as_str()) {
            return true;
        }
        rmse(self.test_prediction(s).as_deref(), &self.task.test.y) < self.task.test_threshold
    }

    /// Train RMSE for each tree (infinite when undefined or past the budget).
    fn score(&mut self, trees: &[ExprTree]) -> Result<Vec<f64>> {
        let canon: Vec<ExprTree> = trees.par_iter().map(canonicalize).collect();
        let keys: Vec<String> = canon.iter().map(ExprTree::postfix_string).collect();
        let mut pending: Vec<usize> = Vec::new();
        let mut queued: HashMap<&str, usize> = HashMap::new();
        let mut slots = self.unique;
        for (i, k) in keys.iter().enumerate() {
            if self.seen.contains_key(k) || queued.contains_key(k.as_str()) || slots >= self.task.budget {
                continue;
            }
            if self.success_at.is_some() {
                break;
            }
            queued.insert(k, pending.len());
            pending.push(i);
            slots += 1;
        }
        let base = self.unique as u64;
        let fitted = pending
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let (constants, r) = fit_constants(
                    &canon[i],
                    &self.task.variables,
                    &self.task.train,
                    self.fit,
                    mix(self.seed, base + j as u64),
                )?;
                Ok(Scored {
                    tree: canon[i].clone(),
                    constants,
                    rmse: r,
                })
            })
            .collect::<Result<Vec<Scored>>>()?;
        for (s, &i) in fitted.into_iter().zip(&pending) {
            if self.success_at.is_some() {
                break;
            }
            self.unique += 1;
            self.seen.insert(keys[i].clone(), s.rmse);
            let improved = self.best.as_ref().is_none_or(|b| s.rmse < b.rmse);
            let hit = self.is_success(&s);
            if improved || hit {
                if improved {
                    let train_mean = self.task.train.mean_y();
                    self.best_r2 = bounded_r2(self.test_prediction(&s).as_deref(), &self.task.test.y, train_mean);
                    self.best = Some(s.clone());
                }
                if hit {
                    self.success_at = Some(self.unique);
                    if !improved {
                        let train_mean = self.task.train.mean_y();
                        self.best_r2 =
                            bounded_r2(self.test_prediction(&s).as_deref(), &self.task.test.y, train_mean);
                        self.best = Some(s);
                    }
                }
                self.curve.push(CurvePoint {
                    evaluations: self.unique,
                    best_train_rmse: self.best_rmse(),
                    best_test_r2: self.best_r2,
                });
            }
        }
        Ok(keys
            .iter()
            .map(|k| self.seen.get(k).copied().unwrap_or(f64::INFINITY))
            .collect())
    }

    fn best_rmse(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.rmse)
    }

    fn report(mut self, method: Method, seed: u64, generations: usize, trace: Vec<f64>) -> RunReport {
        if self.curve.last().map(|c| c.evaluations) != Some(self.unique) {
            self.curve.push(CurvePoint {
                evaluations: self.unique,
                best_train_rmse: self.best_rmse(),
                best_test_r2: self.best_r2,
            });
        }
        RunReport {
            method,
            task: self.task.name.clone(),
            seed,
            success: self.success_at.is_some(),
            best_expression: self.best.as_ref().map(|b| b.tree.postfix_string()),
            best_constants: self.best.as_ref().map(|b| b.constants.clone()).unwrap_or_default(),
            best_train_rmse: self.best_rmse(),
            best_test_r2: self.best_r2,
            evaluations_to_success: self.success_at,
            unique_evaluated: self.unique,
            generations,
            best_rmse_trace: trace,
            curve: self.curve,
        }
    }
}
