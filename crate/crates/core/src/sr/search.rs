use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix, Evaluator, FitConfig, Method, RunReport, SrTask};
use crate::error::{Error, Result};
use crate::expr::ExprTree;
use crate::grammar::{sample_expression_with, Pcfg, DEFAULT_RESAMPLE_BUDGET};
use crate::hvae::{standard_normal, HvaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EaConfig {
    pub pop_size: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
    /// Hard stop for populations that keep producing known expressions.
    pub max_generations: usize,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            pop_size: 200,
            tournament_size: 3,
            crossover_rate: 0.7,
            mutation_rate: 0.3,
            elitism: 1,
            max_generations: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub ea: EaConfig,
    pub fit: FitConfig,
    /// Draws per round for the sampling baselines.
    pub batch_size: usize,
    /// Cap on draws for the sampling baselines; 0 means 100 x budget.
    pub max_draws: usize,
    /// Height cap for grammar sampling.
    pub grammar_max_height: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            ea: EaConfig::default(),
            fit: FitConfig::default(),
            batch_size: 256,
            max_draws: 0,
            grammar_max_height: 7,
        }
    }
}

impl SearchConfig {
    fn draw_cap(&self, budget: usize) -> usize {
        if self.max_draws == 0 {
            budget.saturating_mul(100)
        } else {
            self.max_draws
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub z: Vec<f64>,
    pub decoded: ExprTree,
    /// Train RMSE after constant fitting; infinite when undefined.
    pub fitness: f64,
}

/// `(1 - a) * z_a + a * z_b`.
pub fn crossover_with(za: &[f64], zb: &[f64], a: f64) -> Vec<f64> {
    za.iter().zip(zb).map(|(x, y)| (1.0 - a) * x + a * y).collect()
}

pub fn crossover<R: Rng + ?Sized>(za: &[f64], zb: &[f64], rng: &mut R) -> Vec<f64> {
    let a: f64 = rng.random();
    crossover_with(za, zb, a)
}

/// Decodes `z`, re-encodes the tree and samples around the result:
/// component `j` is drawn from a normal with mean `a * mu_j` and standard
/// deviation `a * sigma_j + (1 - a)`.
pub fn mutate_with<R: Rng + ?Sized>(model: &HvaeModel, z: &[f64], a: f64, rng: &mut R) -> Result<Vec<f64>> {
    let t = model.decode_tree(z, model.max_height())?;
    let (mu, logvar) = model.encode_mean(&t)?;
    Ok(mu
        .iter()
        .zip(&logvar)
        .map(|(m, lv)| {
            let e: f64 = StandardNormal.sample(rng);
            a * m + (a * (lv / 2.0).exp() + (1.0 - a)) * e
        })
        .collect())
}

pub fn mutate<R: Rng + ?Sized>(model: &HvaeModel, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let a: f64 = rng.random();
    mutate_with(model, z, a, rng)
}

fn tournament<R: Rng + ?Sized>(pop: &[Individual], k: usize, rng: &mut R) -> usize {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..k.max(1) {
        let c = rng.random_range(0..pop.len());
        if pop[c].fitness < pop[best].fitness || (pop[c].fitness == pop[best].fitness && c < best) {
            best = c;
        }
    }
    best
}

struct Plan {
    parent: usize,
    partner: Option<(usize, f64)>,
    mutation_seed: Option<u64>,
}

/// Evolutionary search over latent vectors.
pub fn evolve(model: &HvaeModel, task: &SrTask, cfg: &SearchConfig, seed: u64) -> Result<RunReport> {
    task.check_vocabulary(model.vocab())?;
    let ea = &cfg.ea;
    if ea.pop_size < 2 || ea.elitism >= ea.pop_size {
        return Err(Error::Config("population needs at least 2 members and room beyond the elite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(task, &cfg.fit, mix(seed, 1));
    let height = model.max_height();

    let zs: Vec<Vec<f64>> = (0..ea.pop_size)
        .map(|_| standard_normal(model.latent_dim(), &mut rng))
        .collect();
    let trees = zs
        .par_iter()
        .map(|z| model.decode_tree(z, height))
        .collect::<Result<Vec<ExprTree>>>()?;
    let fitness = ev.score(&trees)?;
    let mut pop: Vec<Individual> = zs
        .into_iter()
        .zip(trees)
        .zip(fitness)
        .map(|((z, decoded), fitness)| Individual { z, decoded, fitness })
        .collect();
    let mut trace = vec![ev.best_rmse()];
    let mut generation = 0;

    while !ev.done() && generation < ea.max_generations {
        generation += 1;
        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness));
        let elites: Vec<Individual> = ranked[..ea.elitism].iter().map(|&i| pop[i].clone()).collect();

        let n_children = ea.pop_size - ea.elitism;
        let selected: Vec<usize> = (0..n_children)
            .map(|_| tournament(&pop, ea.tournament_size, &mut rng))
            .collect();
        let plans: Vec<Plan> = selected
            .iter()
            .map(|&parent| {
                let partner = if rng.random::<f64>() < ea.crossover_rate {
                    let other = selected[rng.random_range(0..selected.len())];
                    Some((other, rng.random::<f64>()))
                } else {
                    None
                };
                let mutation_seed = if rng.random::<f64>() < ea.mutation_rate {
                    Some(rng.random::<u64>())
                } else {
                    None
                };
                Plan {
                    parent,
                    partner,
                    mutation_seed,
                }
            })
            .collect();
        let children = plans
            .par_iter()
            .map(|p| {
                let parent = &pop[p.parent];
                if p.partner.is_none() && p.mutation_seed.is_none() {
                    return Ok(parent.clone());
                }
                let mut z = match p.partner {
                    Some((other, a)) => crossover_with(&parent.z, &pop[other].z, a),
                    None => parent.z.clone(),
                };
                if let Some(s) = p.mutation_seed {
                    z = mutate(model, &z, &mut ChaCha8Rng::seed_from_u64(s))?;
                }
                let decoded = model.decode_tree(&z, height)?;
                Ok(Individual {
                    z,
                    decoded,
                    fitness: f64::INFINITY,
                })
            })
            .collect::<Result<Vec<Individual>>>()?;
        let trees: Vec<ExprTree> = children.iter().map(|c| c.decoded.clone()).collect();
        let fitness = ev.score(&trees)?;
        pop = elites;
        pop.extend(children.into_iter().zip(fitness).map(|(mut c, f)| {
            c.fitness = f;
            c
        }));
        trace.push(ev.best_rmse());
    }
    Ok(ev.report(Method::Edhie, seed, generation, trace))
}

/// Scores greedy decodes of standard-normal latent draws.
pub fn random_search(model: &HvaeModel, task: &SrTask, cfg: &SearchConfig, seed: u64) -> Result<RunReport> {
    task.check_vocabulary(model.vocab())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(task, &cfg.fit, mix(seed, 1));
    let cap = cfg.draw_cap(task.budget);
    let batch = cfg.batch_size.max(1);
    let mut draws = 0;
    let mut rounds = 0;
    let mut trace = Vec::new();
    while !ev.done() && draws < cap {
        let n = batch.min(cap - draws);
        let zs: Vec<Vec<f64>> = (0..n).map(|_| standard_normal(model.latent_dim(), &mut rng)).collect();
        let trees = zs
            .par_iter()
            .map(|z| model.decode_tree(z, model.max_height()))
            .collect::<Result<Vec<ExprTree>>>()?;
        ev.score(&trees)?;
        draws += n;
        rounds += 1;
        trace.push(ev.best_rmse());
    }
    Ok(ev.report(Method::Hvar, seed, rounds, trace))
}

/// Scores expressions sampled from a probabilistic grammar.
pub fn grammar_search(g: &Pcfg, task: &SrTask, cfg: &SearchConfig, seed: u64) -> Result<RunReport> {
    task.check_vocabulary(g.vocabulary())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator::new(task, &cfg.fit, mix(seed, 1));
    let cap = cfg.draw_cap(task.budget);
    let batch = cfg.batch_size.max(1);
    let mut draws = 0;
    let mut rounds = 0;
    let mut trace = Vec::new();
    while !ev.done() && draws < cap {
        let n = batch.min(cap - draws);
        let trees = (0..n)
            .map(|_| sample_expression_with(g, &mut rng, cfg.grammar_max_height, DEFAULT_RESAMPLE_BUDGET, None))
            .collect::<Result<Vec<ExprTree>>>()?;
        ev.score(&trees)?;
        draws += n;
        rounds += 1;
        trace.push(ev.best_rmse());
    }
    Ok(ev.report(Method::Grammar, seed, rounds, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Vocabulary;
    use crate::sr::Dataset;

    fn model() -> HvaeModel {
        let v = Vocabulary::from_names(&["x", "+", "*", "-", "sin", "^2"]).unwrap();
        HvaeModel::new(v, 8, 4, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn task(budget: usize) -> SrTask {
        let xs: Vec<f64> = (0..50).map(|i| -2.0 + i as f64 * 0.08).collect();
        let d = Dataset {
            columns: vec![xs.clone()],
            y: xs.iter().map(|x| x * x + x).collect(),
        };
        SrTask::new("t", vec!["x".into()], d.clone(), d, budget).unwrap()
    }

    #[test]
    fn crossover_endpoints() {
        let (a, b) = ([1.0, -2.0, 0.5], [3.0, 4.0, -1.0]);
        assert_eq!(crossover_with(&a, &b, 0.0), a.to_vec());
        assert_eq!(crossover_with(&a, &b, 1.0), b.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crossover(&a, &a, &mut rng), a.to_vec());
    }

    #[test]
    fn mutation_at_zero_ignores_the_parent() {
        let m = model();
        let z = [5.0, 5.0, 5.0, 5.0];
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let got = mutate_with(&m, &z, 0.0, &mut r1).unwrap();
        let want: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut r2)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn budget_of_one() {
        let m = model();
        let t = task(1);
        let cfg = SearchConfig::default();
        for r in [
            evolve(&m, &t, &cfg, 1).unwrap(),
            random_search(&m, &t, &cfg, 1).unwrap(),
            grammar_search(&Pcfg::parse("S -> x [1.0]").unwrap(), &t, &cfg, 1).unwrap(),
        ] {
            assert_eq!(r.unique_evaluated, 1);
            assert!(!r.success);
            assert!(r.best_expression.is_some());
            assert!((0.0..=1.0).contains(&r.best_test_r2));
        }
    }

    #[test]
    fn degenerate_grammar_never_succeeds() {
        let t = task(50);
        let r = grammar_search(&Pcfg::parse("S -> x [1.0]").unwrap(), &t, &SearchConfig::default(), 2).unwrap();
        assert!(!r.success);
        assert_eq!(r.unique_evaluated, 1);
        assert_eq!(r.best_expression.as_deref(), Some("x"));
    }

    #[test]
    fn evolve_is_deterministic() {
        let m = model();
        let t = task(300);
        let cfg = SearchConfig {
            ea: EaConfig {
                pop_size: 20,
                max_generations: 15,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = evolve(&m, &t, &cfg, 5).unwrap();
        let b = evolve(&m, &t, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.unique_evaluated <= 300);
        // elitism: the best fitness never gets worse
        assert!(a.best_rmse_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn grammar_search_finds_a_simple_target() {
        let g = Pcfg::parse("S -> S + T [0.3] | T [0.7]\nT -> x [0.5] | x * x [0.5]").unwrap();
        let r = grammar_search(&g, &task(200), &SearchConfig::default(), 3).unwrap();
        assert!(r.success, "{r:?}");
    }

    #[test]
    fn unbound_model_variable_is_rejected() {
        let v = Vocabulary::from_names(&["x", "y", "+"]).unwrap();
        let m = HvaeModel::new(v, 4, 2, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            random_search(&m, &task(5), &SearchConfig::default(), 0),
            Err(Error::UnboundVariable(_))
        ));
    }
}
