//! Prior and neighborhood sampling, and linear interpolation between codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::expr::{edit_distance, ExprTree};
use crate::hvae::{reparameterize, standard_normal, HvaeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Stochastic,
}

/// Decodes each `z`; stochastic decoding gets its own stream per point,
/// seeded from `rng`, so the result does not depend on worker count.
fn decode_all<R: Rng + ?Sized>(
    model: &HvaeModel,
    zs: Vec<Vec<f64>>,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<ExprTree>> {
    let height = model.max_height();
    match mode {
        DecodeMode::Greedy => zs.par_iter().map(|z| model.decode_tree(z, height)).collect(),
        DecodeMode::Stochastic => {
            let seeds: Vec<u64> = zs.iter().map(|_| rng.random()).collect();
            zs.par_iter()
                .zip(seeds)
                .map(|(z, s)| model.sample_tree(z, height, &mut ChaCha8Rng::seed_from_u64(s)))
                .collect()
        }
    }
}

/// `n` draws from the standard normal prior, decoded.
pub fn sample_prior<R: Rng + ?Sized>(
    model: &HvaeModel,
    n: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<ExprTree>> {
    let zs: Vec<Vec<f64>> = (0..n).map(|_| standard_normal(model.latent_dim(), rng)).collect();
    decode_all(model, zs, mode, rng)
}

/// `n` greedy decodes of draws from the posterior of `t`.
pub fn neighborhood_sample<R: Rng + ?Sized>(
    model: &HvaeModel,
    t: &ExprTree,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ExprTree>> {
    let (mu, logvar) = model.encode_mean(t)?;
    let zs: Vec<Vec<f64>> = (0..n).map(|_| reparameterize(&mu, &logvar, rng)).collect();
    decode_all(model, zs, DecodeMode::Greedy, rng)
}

/// Greedy decodes of `(1 - a) * mu_a + a * mu_b` for `a = i / steps`,
/// `i = 0..=steps`.
pub fn interpolate(
    model: &HvaeModel,
    a: &ExprTree,
    b: &ExprTree,
    steps: usize,
) -> Result<Vec<(f64, ExprTree)>> {
    let steps = steps.max(1);
    let (za, _) = model.encode_mean(a)?;
    let (zb, _) = model.encode_mean(b)?;
    (0..=steps)
        .map(|i| {
            let alpha = i as f64 / steps as f64;
            let z: Vec<f64> = za
                .iter()
                .zip(&zb)
                .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                .collect();
            Ok((alpha, model.decode_tree(&z, model.max_height())?))
        })
        .collect()
}

/// Mean edit distance between consecutive decodes along each interpolation.
pub fn interpolation_smoothness(
    model: &HvaeModel,
    pairs: &[(ExprTree, ExprTree)],
    steps: usize,
) -> Result<f64> {
    let mut total = 0usize;
    let mut count = 0usize;
    for (a, b) in pairs {
        let ladder = interpolate(model, a, b, steps)?;
        for w in ladder.windows(2) {
            total += edit_distance(&w[0].1, &w[1].1);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total as f64 / count as f64 })
}

pub fn mean_pair_distance(pairs: &[(ExprTree, ExprTree)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| edit_distance(a, b)).sum::<usize>() as f64 / pairs.len() as f64
}

/// Random pairs of distinct positions in `corpus`.
pub fn random_pairs<R: Rng + ?Sized>(corpus: &[ExprTree], n: usize, rng: &mut R) -> Vec<(ExprTree, ExprTree)> {
    if corpus.len() < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let i = rng.random_range(0..corpus.len());
            let mut j = rng.random_range(0..corpus.len() - 1);
            if j >= i {
                j += 1;
            }
            (corpus[i].clone(), corpus[j].clone())
        })
        .collect()
}
