use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::Result;
use crate::expr::{rmse, CompiledExpr, ExprTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub iterations: usize,
    /// Initial constants are drawn uniformly from `[-init_range, init_range]`.
    pub init_range: f64,
    /// The simplex search scores constants on at most this many evenly
    /// spaced rows; the returned RMSE always uses every row.
    pub max_rows: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 4,
            iterations: 200,
            init_range: 5.0,
            max_rows: 500,
        }
    }
}

/// Downhill simplex minimization of `f` from `x0`. Non-finite objective
/// values count as worse than any finite one.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: f64, iterations: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let score = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += if p[i].abs() > 1.0 { step * p[i].abs() } else { step };
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| score(f(p))).collect();
    for _ in 0..iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if values[0] == 0.0 || (values[n] - values[0]).abs() <= 1e-15 * values[0].abs().max(1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect()
        };
        let reflected = toward(-1.0, &simplex[n]);
        let fr = score(f(&reflected));
        if fr < values[0] {
            let expanded = toward(-2.0, &simplex[n]);
            let fe = score(f(&expanded));
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[n] {
            let c = toward(-0.5, &simplex[n]);
            let v = score(f(&c));
            (c, v)
        } else {
            let c = toward(0.5, &simplex[n]);
            let v = score(f(&c));
            (c, v)
        };
        if fc < values[n].min(fr) {
            simplex[n] = contracted;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = best.iter().zip(&simplex[i]).map(|(b, p)| b + 0.5 * (p - b)).collect();
            values[i] = score(f(&simplex[i]));
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best].clone(), values[best])
}

fn subsample(data: &Dataset, max_rows: usize) -> Dataset {
    let n = data.y.len();
    if n <= max_rows || max_rows == 0 {
        return data.clone();
    }
    let idx: Vec<usize> = (0..max_rows).map(|k| k * n / max_rows).collect();
    Dataset {
        columns: data
            .columns
            .iter()
            .map(|c| idx.iter().map(|&i| c[i]).collect())
            .collect(),
        y: idx.iter().map(|&i| data.y[i]).collect(),
    }
}

/// Fits the constant placeholders of `t` (in leaf order) by minimizing the
/// training RMSE. Returns infinite RMSE when every attempt is undefined.
pub fn fit_constants(
    t: &ExprTree,
    variables: &[String],
    data: &Dataset,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let expr = CompiledExpr::compile(t, variables)?;
    let k = expr.n_constants();
    if k == 0 {
        return Ok((Vec::new(), rmse(expr.eval(&data.columns, &[]).as_deref(), &data.y)));
    }
    let small = subsample(data, cfg.max_rows);
    let objective = |c: &[f64]| rmse(expr.eval(&small.columns, c).as_deref(), &small.y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let x0: Vec<f64> = (0..k)
            .map(|_| rng.random_range(-cfg.init_range..=cfg.init_range))
            .collect();
        let (c, _) = nelder_mead(objective, &x0, 0.5, cfg.iterations);
        let full = rmse(expr.eval(&data.columns, &c).as_deref(), &data.y);
        if best.as_ref().is_none_or(|b| full < b.1) {
            best = Some((c, full));
        }
    }
    Ok(best.expect("at least one restart"))
}
