//! Training loop, KL annealing, cross-validated reconstruction and sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{edit_distance, ExprTree, Vocabulary};
use crate::hvae::{standard_normal, HvaeModel, LossParts};
use crate::nnmath::{global_norm, Adam, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Annealing {
    /// `ceiling * 0.5 * (tanh((i - midpoint) / steepness) + 1)`, held
    /// constant from iteration `freeze_after` on.
    Tanh {
        midpoint: f64,
        steepness: f64,
        freeze_after: u64,
        ceiling: f64,
    },
    Constant { lambda: f64 },
}

impl Annealing {
    pub const DESK: Annealing = Annealing::Tanh {
        midpoint: 800.0,
        steepness: 200.0,
        freeze_after: 1800,
        ceiling: 0.1,
    };

    /// A step at 4500 that is frozen at 1800, so lambda stays near zero
    /// for the whole schedule.
    pub const LATE_STEP: Annealing = Annealing::Tanh {
        midpoint: 4500.0,
        steepness: 2.0,
        freeze_after: 1800,
        ceiling: 1.0,
    };
}

/// KL weight at optimizer step `i`.
pub fn lambda_schedule(a: &Annealing, i: u64) -> f64 {
    match *a {
        Annealing::Tanh {
            midpoint,
            steepness,
            freeze_after,
            ceiling,
        } => {
            let i = i.min(freeze_after) as f64;
            ceiling * 0.5 * (((i - midpoint) / steepness).tanh() + 1.0)
        }
        Annealing::Constant { lambda } => lambda,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub annealing: Annealing,
    pub seed: u64,
    pub learning_rate: f64,
    /// Global-norm gradient clipping; off when `None`.
    pub clip_norm: Option<f64>,
    /// Share of the training trees held out to pick the best epoch. With
    /// zero, the last epoch is kept.
    pub validation_fraction: f64,
    /// Free-decoding height cap; `None` means corpus max height + 1.
    pub max_height: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            latent_dim: 32,
            hidden_dim: 64,
            annealing: Annealing::DESK,
            seed: 0,
            learning_rate: 3e-3,
            clip_norm: None,
            validation_fraction: 0.0,
            max_height: None,
        }
    }
}

impl TrainConfig {
    /// Latent and hidden size 128, lr 1e-3 and the late-step schedule.
    pub fn large() -> Self {
        TrainConfig {
            latent_dim: 128,
            hidden_dim: 128,
            annealing: Annealing::LATE_STEP,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("batch size and dimensions must be positive".into()));
        }
        if let Annealing::Tanh {
            steepness,
            freeze_after,
            ceiling,
            ..
        } = self.annealing
        {
            if freeze_after == 0 || steepness <= 0.0 {
                return Err(Error::Config("freeze_after and steepness must be positive".into()));
            }
            if ceiling.is_nan() || ceiling < 0.0 {
                return Err(Error::Config("annealing ceiling must be non-negative".into()));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn decode_height(&self, corpus: &[ExprTree]) -> usize {
        self.max_height
            .unwrap_or_else(|| corpus.iter().map(ExprTree::height).max().unwrap_or(1) + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HvaeModel,
    pub trace: Vec<BatchRecord>,
    /// Epoch of the kept checkpoint (0 = untrained).
    pub checkpoint_epoch: usize,
    /// Optimizer step at which a non-finite loss or gradient stopped training.
    pub aborted_at: Option<u64>,
}

fn mean_validation_loss(model: &HvaeModel, trees: &[ExprTree]) -> Result<f64> {
    let losses = trees
        .par_iter()
        .map(|t| model.mean_reconstruction_loss(t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fresh model sized by `cfg` for `corpus`.
pub fn init_model<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    corpus: &[ExprTree],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<HvaeModel> {
    HvaeModel::new(
        vocab.clone(),
        cfg.hidden_dim,
        cfg.latent_dim,
        cfg.decode_height(corpus),
        rng,
    )
}

/// Minibatch training. The KL weight follows the optimizer step counter.
pub fn train<R: Rng + ?Sized>(
    model: HvaeModel,
    corpus: &[ExprTree],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if let Some(t) = corpus.iter().find(|t| !t.fits_vocabulary(model.vocab())) {
        return Err(Error::UnknownToken(format!("{t} uses symbols outside the model vocabulary")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let n_valid = ((corpus.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_valid = n_valid.min(corpus.len() - 1);
    let valid: Vec<ExprTree> = order[..n_valid].iter().map(|&i| corpus[i].clone()).collect();
    let mut train_idx: Vec<usize> = order[n_valid..].to_vec();

    let mut model = model;
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut grads = model.zero_grads();
    let mut trace = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut iteration = 0u64;
    let latent = model.latent_dim();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            let lambda = lambda_schedule(&cfg.annealing, iteration);
            let noise: Vec<Vec<f64>> = batch.iter().map(|_| standard_normal(latent, rng)).collect();
            let frozen = &model;
            let per_example = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&i, eps)| {
                    let mut g = frozen.zero_grads();
                    let parts = frozen.loss_with_noise(&corpus[i], lambda, eps, Some(&mut g))?;
                    Ok((parts, g))
                })
                .collect::<Result<Vec<(LossParts, Vec<Matrix>)>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut sums = [0.0; 3];
            for (parts, g) in &per_example {
                sums[0] += parts.total;
                sums[1] += parts.reconstruction;
                sums[2] += parts.kl;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            grads.iter_mut().for_each(|g| g.scale(scale));
            let record = BatchRecord {
                iteration,
                epoch,
                lambda,
                loss: sums[0] * scale,
                reconstruction: sums[1] * scale,
                kl: sums[2] * scale,
            };
            trace.push(record);
            if !record.loss.is_finite() {
                return Ok(abort(best, best_epoch, trace, iteration));
            }
            if let Some(max) = cfg.clip_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    grads.iter_mut().for_each(|g| g.scale(max / norm));
                }
            }
            match opt.step(model.params_mut(), &mut grads) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient) => return Ok(abort(best, best_epoch, trace, iteration)),
                Err(e) => return Err(e),
            }
            iteration += 1;
        }
        if valid.is_empty() {
            best = model.clone();
            best_epoch = epoch;
        } else {
            let score = mean_validation_loss(&model, &valid)?;
            if score < best_score {
                best_score = score;
                best = model.clone();
                best_epoch = epoch;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        trace,
        checkpoint_epoch: best_epoch,
        aborted_at: None,
    })
}

fn abort(best: HvaeModel, epoch: usize, trace: Vec<BatchRecord>, iteration: u64) -> TrainOutcome {
    TrainOutcome {
        model: best,
        trace,
        checkpoint_epoch: epoch,
        aborted_at: Some(iteration),
    }
}

/// Edit distances between trees and their greedy reconstructions through
/// the posterior mean.
pub fn reconstruction_distances(model: &HvaeModel, trees: &[ExprTree]) -> Result<Vec<usize>> {
    trees
        .par_iter()
        .map(|t| Ok(edit_distance(t, &model.reconstruct(t)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mean_edit_distance: f64,
    pub invalid_rate: f64,
    pub final_loss: Option<f64>,
    pub aborted_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_edit_distance: f64,
    /// Sample standard deviation across folds.
    pub std_edit_distance: f64,
    pub invalid_rate: f64,
    pub folds: Vec<FoldResult>,
    pub config: TrainConfig,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "edit distance {:.4} (+/- {:.4}), invalid {:.4}\n",
            self.mean_edit_distance, self.std_edit_distance, self.invalid_rate
        );
        for f in &self.folds {
            out.push_str(&format!(
                "  fold {}: train {} test {} edit {:.4}{}\n",
                f.fold,
                f.n_train,
                f.n_test,
                f.mean_edit_distance,
                f.aborted_at.map(|i| format!(" (aborted at step {i})")).unwrap_or_default()
            ));
        }
        out
    }
}

/// Fold assignment: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// k-fold out-of-sample reconstruction error. Each fold trains a fresh
/// model from a seed derived from `cfg.seed` and the fold index.
pub fn cross_validate(
    corpus: &[ExprTree],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    folds: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    if folds < 2 || corpus.len() < folds {
        return Err(Error::Config(format!(
            "need at least 2 folds and as many trees as folds (folds {folds}, trees {})",
            corpus.len()
        )));
    }
    let assignment = fold_assignment(corpus.len(), folds, cfg.seed);
    let mut cfg = cfg.clone();
    cfg.max_height = Some(cfg.decode_height(corpus));
    let results = (0..folds)
        .into_par_iter()
        .map(|k| {
            let (mut train_set, mut test_set) = (Vec::new(), Vec::new());
            for (t, &f) in corpus.iter().zip(&assignment) {
                if f == k {
                    test_set.push(t.clone());
                } else {
                    train_set.push(t.clone());
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + k as u64));
            let model = init_model(vocab, &train_set, &cfg, &mut rng)?;
            let out = train(model, &train_set, &cfg, &mut rng)?;
            let d = reconstruction_distances(&out.model, &test_set)?;
            Ok(FoldResult {
                fold: k,
                n_train: train_set.len(),
                n_test: test_set.len(),
                mean_edit_distance: d.iter().sum::<usize>() as f64 / d.len() as f64,
                invalid_rate: 0.0,
                final_loss: out.trace.last().map(|r| r.loss),
                aborted_at: out.aborted_at,
            })
        })
        .collect::<Result<Vec<FoldResult>>>()?;
    let per_fold: Vec<f64> = results.iter().map(|f| f.mean_edit_distance).collect();
    let (mean, std) = mean_std(&per_fold);
    let invalid = results.iter().map(|f| f.invalid_rate).sum::<f64>() / folds as f64;
    Ok(EvalReport {
        mean_edit_distance: mean,
        std_edit_distance: std,
        invalid_rate: invalid,
        folds: results,
        config: cfg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CorpusSize,
    LatentDim,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corpus_size" | "corpus-size" => Ok(SweepAxis::CorpusSize),
            "latent_dim" | "latent-dim" => Ok(SweepAxis::LatentDim),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub report: EvalReport,
}

/// One cross-validation per value with everything else fixed. Corpus-size
/// values take a prefix of `corpus`.
pub fn sweep(
    corpus: &[ExprTree],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    axis: SweepAxis,
    values: &[usize],
    folds: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            let trees = match axis {
                SweepAxis::CorpusSize => {
                    if v > corpus.len() {
                        return Err(Error::Config(format!("corpus has only {} trees", corpus.len())));
                    }
                    &corpus[..v]
                }
                SweepAxis::LatentDim => {
                    c.latent_dim = v;
                    corpus
                }
            };
            Ok(SweepRow {
                value: v,
                report: cross_validate(trees, vocab, &c, folds)?,
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let name = match axis {
        SweepAxis::CorpusSize => "corpus_size",
        SweepAxis::LatentDim => "latent_dim",
    };
    w.write_record([name, "mean_edit_distance", "std_edit_distance", "invalid_rate"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            format!("{:.6}", r.report.mean_edit_distance),
            format!("{:.6}", r.report.std_edit_distance),
            format!("{:.6}", r.report.invalid_rate),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_postfix;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["x", "c", "+", "-", "*", "/", "^2"]).unwrap()
    }

    fn toy_corpus() -> Vec<ExprTree> {
        [
            "x", "c", "x c +", "x x *", "x ^2", "x c /", "x c - ^2", "c x * x +", "x x + c /",
            "x ^2 c *",
        ]
        .iter()
        .map(|s| {
            let toks: Vec<&str> = s.split_whitespace().collect();
            parse_postfix(&toks, &vocab()).unwrap()
        })
        .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden_dim: 12,
            latent_dim: 6,
            batch_size: 10,
            annealing: Annealing::Constant { lambda: 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let a = Annealing::DESK;
        assert_eq!(lambda_schedule(&a, 800), 0.05);
        let full = Annealing::Tanh {
            midpoint: 800.0,
            steepness: 200.0,
            freeze_after: 1800,
            ceiling: 1.0,
        };
        assert_eq!(lambda_schedule(&full, 800), 0.5);
        assert!(lambda_schedule(&full, 1800) > 0.99);
        assert!(lambda_schedule(&a, 0) < 0.001);
        let frozen = lambda_schedule(&a, 1800);
        assert_eq!(lambda_schedule(&a, 5000), frozen);
        let mut prev = 0.0;
        for i in 0..1800 {
            let l = lambda_schedule(&a, i);
            assert!(l >= prev);
            prev = l;
        }
        // the printed constants never leave zero before the freeze
        assert!(lambda_schedule(&Annealing::LATE_STEP, 10_000) < 1e-12);
    }

    #[test]
    fn toy_corpus_loss_descends() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = init_model(&vocab(), &corpus, &cfg, &mut rng).unwrap();
        let out = train(model, &corpus, &cfg, &mut rng).unwrap();
        assert_eq!(out.trace.len(), 50);
        let first = out.trace[0].reconstruction;
        let last = out.trace.last().unwrap().reconstruction;
        assert!(last < first, "{first} -> {last}");
        assert!(out.trace.iter().all(|r| r.lambda == 0.0 && r.loss == r.reconstruction));
    }

    #[test]
    fn single_tree_is_memorized() {
        let corpus = vec![toy_corpus()[7].clone()];
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = init_model(&vocab(), &corpus, &cfg, &mut rng).unwrap();
        let out = train(model, &corpus, &cfg, &mut rng).unwrap();
        assert!(out.trace.last().unwrap().reconstruction < 0.05);
        assert_eq!(out.model.reconstruct(&corpus[0]).unwrap(), corpus[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            annealing: Annealing::DESK,
            ..small_cfg()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model = init_model(&vocab(), &corpus, &cfg, &mut rng).unwrap();
            train(model, &corpus, &cfg, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn validation_split_keeps_a_checkpoint() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            epochs: 4,
            validation_fraction: 0.3,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = init_model(&vocab(), &corpus, &cfg, &mut rng).unwrap();
        let out = train(model, &corpus, &cfg, &mut rng).unwrap();
        assert!((1..=4).contains(&out.checkpoint_epoch));
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let corpus = toy_corpus();
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = init_model(&vocab(), &corpus, &cfg, &mut rng).unwrap();
        let before = model.clone();
        model.params_mut()[0].data[0] = f64::NAN;
        let out = train(model, &corpus, &cfg, &mut rng).unwrap();
        assert_eq!(out.aborted_at, Some(0));
        assert_eq!(out.checkpoint_epoch, 0);
        assert_eq!(out.trace.len(), 1);
        assert!(out.model.params()[0].data[0].is_nan());
        assert_ne!(out.model, before);
    }

    #[test]
    fn folds_partition_the_corpus() {
        let a = fold_assignment(103, 5, 9);
        let mut counts = [0; 5];
        for f in &a {
            counts[*f] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert!(counts.iter().all(|c| *c == 20 || *c == 21));
        assert_eq!(a, fold_assignment(103, 5, 9));
    }

    #[test]
    fn zero_epoch_cross_validation() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let r = cross_validate(&corpus, &vocab(), &cfg, 5).unwrap();
        assert!(r.mean_edit_distance.is_finite() && r.mean_edit_distance > 0.0);
        assert_eq!(r.invalid_rate, 0.0);
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r, cross_validate(&corpus, &vocab(), &cfg, 5).unwrap());
    }

    #[test]
    fn single_value_sweep() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            epochs: 1,
            ..small_cfg()
        };
        let rows = sweep(&corpus, &vocab(), &cfg, SweepAxis::LatentDim, &[4], 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report.config.latent_dim, 4);
        let csv = sweep_csv(SweepAxis::LatentDim, &rows).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("latent_dim,"));
    }
}
