use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvae::bench::{builtin_benchmarks, run_once, run_seed, simulate};
use hvae::expr::{levenshtein, parse_postfix, rmse, CompiledExpr, ExprTree, Notation, Vocabulary};
use hvae::grammar::{builtin_grammars, builtin_vocabulary, generate_corpus};
use hvae::hvae::{kl_divergence, standard_normal, HvaeModel};
use hvae::latent::{interpolate, interpolation_smoothness, mean_pair_distance, random_pairs, sample_prior, DecodeMode};
use hvae::sr::{crossover_with, mutate_with, Method, SearchConfig};
use hvae::train::{cross_validate, init_model, train, TrainConfig};
use hvae::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn corpus(grammar: &str, seed: u64) -> Result<(Vocabulary, Vec<ExprTree>)> {
    let g = &builtin_grammars()[grammar];
    let trees = generate_corpus(g, 2000, 4, true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((builtin_vocabulary(grammar).expect("builtin"), trees))
}

fn trained(grammar: &str, seed: u64) -> Result<(HvaeModel, Vec<ExprTree>)> {
    let (vocab, trees) = corpus(grammar, seed)?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = init_model(&vocab, &trees, &cfg, &mut rng)?;
    Ok((train(model, &trees, &cfg, &mut rng)?.model, trees))
}

/// Re-serializes and re-parses the tree and checks every structural
/// constraint the decoder promises.
fn is_valid(t: &ExprTree, vocab: &Vocabulary, max_height: usize) -> bool {
    let tokens = t.to_notation(Notation::Postfix);
    t.height() <= max_height
        && t.fits_vocabulary(vocab)
        && parse_postfix(&tokens, vocab).is_ok_and(|back| &back == t)
}

fn decoder_validity(trained: &HvaeModel) -> Result<Outcome> {
    let fresh = HvaeModel::new(
        trained.vocab().clone(),
        trained.hidden_dim(),
        trained.latent_dim(),
        trained.max_height(),
        &mut ChaCha8Rng::seed_from_u64(5),
    )?;
    let n = 100_000;
    let mut invalid = [0usize; 2];
    for (k, m) in [trained, &fresh].into_iter().enumerate() {
        let trees = sample_prior(m, n, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(6 + k as u64))?;
        invalid[k] = trees.iter().filter(|t| !is_valid(t, m.vocab(), m.max_height())).count();
    }
    outcome(
        invalid == [0, 0],
        format!("invalid trees in {n} prior samples: trained {}, untrained {}", invalid[0], invalid[1]),
    )
}

fn reconstruction() -> Result<Outcome> {
    let (vocab, trees) = corpus("ae", 11)?;
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let report = cross_validate(&trees, &vocab, &cfg, 5)?;
    outcome(
        report.mean_edit_distance <= 0.5 && cfg.latent_dim == 32 && cfg.epochs >= 20,
        format!(
            "5-fold edit distance {:.3} (std {:.3}), invalid {:.3}, latent {}, {} epochs",
            report.mean_edit_distance, report.std_edit_distance, report.invalid_rate, cfg.latent_dim, cfg.epochs
        ),
    )
}

fn gradient_check() -> Result<Outcome> {
    let vocab = Vocabulary::from_names(&["x", "c", "+", "*", "cos"])?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut probe = HvaeModel::new(vocab.clone(), 5, 3, 4, &mut rng)?;
    let t = parse_postfix(&["x", "c", "+", "x", "cos", "*"], &vocab)?;
    let eps = standard_normal(3, &mut rng);
    let lambda = 0.7;
    let mut grads = probe.zero_grads();
    probe.loss_with_noise(&t, lambda, &eps, Some(&mut grads))?;
    let h = 1e-5;
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    for k in 0..probe.params().len() {
        for i in 0..probe.params()[k].len() {
            let orig = probe.params()[k].data[i];
            probe.params_mut()[k].data[i] = orig + h;
            let up = probe.loss_with_noise(&t, lambda, &eps, None)?.total;
            probe.params_mut()[k].data[i] = orig - h;
            let down = probe.loss_with_noise(&t, lambda, &eps, None)?.total;
            probe.params_mut()[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[k].data[i];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
            count += 1;
        }
    }
    outcome(
        t.height() == 3 && worst < 1e-4,
        format!("max relative error {worst:.2e} over {count} parameters"),
    )
}

fn kl_closed_form() -> Result<Outcome> {
    let zero = kl_divergence(&[0.0; 4], &[0.0; 4])?;
    let unit = kl_divergence(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4])?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.random_range(1..10);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        min = min.min(kl_divergence(&mu, &lv)?);
    }
    outcome(
        zero == 0.0 && zero.is_sign_positive() && (unit - 0.5).abs() < 1e-12 && min >= 0.0,
        format!("KL(0,0) = {zero}, KL(e1,0) = {unit}, min over 10^4 draws {min:.3e}"),
    )
}

/// Plain recursion over suffixes with memoization.
fn edit_oracle(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let sub = edit_oracle(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = edit_oracle(&a[1..], b, memo) + 1;
    let ins = edit_oracle(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), d);
    d
}

fn edit_distance_oracle() -> Result<Outcome> {
    let alphabet = ["x", "c", "+", "*", "sin", "^2", "y"];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(0..=15);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_string()).collect()
    };
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        if levenshtein(&a, &b) != edit_oracle(&a, &b, &mut HashMap::new()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 1000 pairs"))
}

fn pcfg_fidelity() -> Result<Outcome> {
    let g = &builtin_grammars()["ae"];
    let mut counts = g.empty_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut samples = 0;
    while samples < 10_000 {
        if g.derive(&mut rng, usize::MAX, Some(&mut counts)).is_some() {
            samples += 1;
        }
    }
    let mut worst = 0.0_f64;
    for (nt, name) in g.nonterminals().iter().enumerate() {
        let rules = g.rules(name).expect("listed nonterminal");
        let n: u64 = counts[nt].iter().sum();
        for (r, prod) in rules.iter().enumerate() {
            let expected = n as f64 * prod.prob;
            let sigma = (n as f64 * prod.prob * (1.0 - prod.prob)).sqrt();
            let z = if sigma > 0.0 { (counts[nt][r] as f64 - expected).abs() / sigma } else { 0.0 };
            worst = worst.max(z);
        }
    }
    outcome(worst <= 3.0, format!("largest rule deviation {worst:.2} sigma over 10000 derivations"))
}

fn ea_operators(model: &HvaeModel) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let d = model.latent_dim();
    let mut endpoints_ok = true;
    for _ in 0..1000 {
        let za: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zb: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        endpoints_ok &= crossover_with(&za, &zb, 0.0) == za && crossover_with(&za, &zb, 1.0) == zb;
    }
    let z = standard_normal(d, &mut rng);
    let (mu, lv) = model.encode_mean(&model.decode_tree(&z, model.max_height())?)?;
    let a = 0.6;
    let n = 100_000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..n {
        for (j, v) in mutate_with(model, &z, a, &mut rng)?.into_iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let mut worst_mean = 0.0_f64;
    let mut worst_var = 0.0_f64;
    for j in 0..d {
        let s = a * (lv[j] / 2.0).exp() + (1.0 - a);
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        worst_mean = worst_mean.max((mean - a * mu[j]).abs() / (s / (n as f64).sqrt()));
        worst_var = worst_var.max((var - s * s).abs() / (s * s * (2.0 / n as f64).sqrt()));
    }
    outcome(
        endpoints_ok && worst_mean <= 4.0,
        format!(
            "crossover endpoints exact: {endpoints_ok}; mutation mean off by {worst_mean:.2} se, variance by {worst_var:.2} se (a = {a}, n = {n})"
        ),
    )
}

fn verify_on_fresh_data(id: &str, expr: &str, consts: &[f64]) -> Result<f64> {
    let eq = &builtin_benchmarks()[id];
    let t = parse_postfix(&expr.split_whitespace().collect::<Vec<_>>(), &eq.vocabulary())?;
    let fresh = simulate(eq, 0xF00D, 1)?.test;
    Ok(rmse(
        CompiledExpr::compile(&t, &eq.variables)?.eval(&fresh.columns, consts).as_deref(),
        &fresh.y,
    ))
}

fn solve(model: &HvaeModel, ids: &[&str], budget: usize) -> Result<(bool, String)> {
    let cfg = SearchConfig::default();
    let mut all = true;
    let mut parts = Vec::new();
    for id in ids {
        let eq = &builtin_benchmarks()[*id];
        let mut hits = 0;
        let mut evals = Vec::new();
        for k in 0..3 {
            let r = run_once(eq, Method::Edhie, std::slice::from_ref(model), budget, &cfg, run_seed(7, id, k))?;
            let verified = match (&r.best_expression, r.success) {
                (Some(e), true) => r.best_train_rmse < 1e-10 && verify_on_fresh_data(id, e, &r.best_constants)? < 1e-8,
                _ => false,
            };
            if verified {
                hits += 1;
                evals.push(r.evaluations_to_success.unwrap_or(0).to_string());
            } else {
                evals.push("miss".into());
            }
        }
        all &= hits >= 2;
        parts.push(format!("{id} {hits}/3 (evaluations {})", evals.join(", ")));
    }
    Ok((all, parts.join("; ")))
}

fn nguyen_sr() -> Result<Outcome> {
    let (model, _) = trained("nguyen", 71)?;
    let (pass, detail) = solve(&model, &["NG-1", "NG-8"], 20_000)?;
    outcome(pass, format!("{detail}; budget 20000"))
}

fn feynman_smoke() -> Result<Outcome> {
    let (model, _) = trained("feynman2", 81)?;
    let (pass, detail) = solve(&model, &["FM-3.1"], 2_000)?;
    outcome(pass, format!("{detail}; budget 2000"))
}

fn interpolation(model: &HvaeModel, trees: &[ExprTree]) -> Result<Outcome> {
    let mut mismatched = 0;
    for w in trees[..101].windows(2) {
        let ladder = interpolate(model, &w[0], &w[1], 4)?;
        let ends = [&w[0], &w[1]].map(|t| model.encode_mean(t).and_then(|(mu, _)| model.decode_tree(&mu, model.max_height())));
        let (first, last) = (&ladder[0], &ladder[ladder.len() - 1]);
        if first.0 != 0.0 || last.0 != 1.0 || &first.1 != ends[0].as_ref().unwrap() || &last.1 != ends[1].as_ref().unwrap() {
            mismatched += 1;
        }
    }
    let pairs = random_pairs(trees, 20, &mut ChaCha8Rng::seed_from_u64(91));
    let smooth = interpolation_smoothness(model, &pairs, 4)?;
    let baseline = mean_pair_distance(&pairs);
    outcome(
        mismatched == 0 && smooth <= baseline,
        format!("endpoint mismatches {mismatched}/100; consecutive distance {smooth:.3} vs pair distance {baseline:.3}"),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_hvae"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cli");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read dir").map(|e| e.expect("entry").path()) {
            if entry.is_dir() {
                stack.push(entry);
            } else {
                let rel = entry.strip_prefix(dir).expect("prefix").display().to_string();
                files.push((rel, std::fs::read(&entry).expect("read")));
            }
        }
    }
    files.sort();
    files
}

fn cli_session(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let small = ["--epochs", "2", "--latent-dim", "6", "--hidden-dim", "8", "--seed", "3"];
    let with = |base: &[&str], extra: &[&str]| -> Vec<String> {
        base.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let commands: Vec<Vec<String>> = vec![
        with(&["corpus", "--grammar", "nguyen", "--n", "120", "--seed", "1", "--dedup", "--out", "c.txt"], &[]),
        with(&["train", "--corpus", "c.txt", "--vocab", "nguyen", "--out-model", "m.bin", "--trace", "t.csv"], &small),
        with(&["evaluate", "--corpus", "c.txt", "--folds", "3", "--json", "e.json"], &small),
        with(&["sweep", "--corpus", "c.txt", "--axis", "latent_dim", "--values", "2,4", "--folds", "2", "--out", "s.csv"], &small),
        with(&["encode", "--model", "m.bin", "--input", "c.txt", "--sample", "--seed", "4"], &[]),
        with(&["sample", "--model", "m.bin", "--n", "20", "--stochastic", "--seed", "5"], &[]),
        with(&["sample", "--model", "m.bin", "--n", "20", "--around", "x x sin *", "--seed", "6"], &[]),
        with(&["interpolate", "--model", "m.bin", "--from", "x sin", "--to", "x x *", "--steps", "4"], &[]),
        with(&["sr", "--task", "NG-8", "--model", "m.bin", "--budget", "300", "--runs", "2", "--seed", "8", "--out", "sr"], &[]),
        with(&["bench", "--suite", "nguyen", "--ids", "NG-1,NG-5", "--method", "hvar", "--model", "m.bin", "--budget", "200", "--runs", "2", "--seed", "9", "--out", "bench"], &[]),
    ];
    let mut outputs = Vec::new();
    for (k, c) in commands.iter().enumerate() {
        let args: Vec<&str> = c.iter().map(String::as_str).collect();
        outputs.push((format!("stdout {k} {}", c[0]), run_cli(dir, &args)));
        if c[0] == "encode" {
            let z = String::from_utf8(outputs.last().unwrap().1.clone()).unwrap();
            std::fs::write(dir.join("z.txt"), z.lines().take(10).collect::<Vec<_>>().join("\n")).unwrap();
            let args = ["decode", "--model", "m.bin", "--input", "z.txt", "--stochastic", "--seed", "7"];
            outputs.push(("stdout decode".into(), run_cli(dir, &args)));
        }
    }
    outputs.extend(snapshot(dir));
    outputs
}

fn cli_determinism() -> Result<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let first = cli_session(a.path());
    let second = cli_session(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!("{} outputs compared, differing: {:?}", first.len(), differing),
    )
}

fn line(text: &str) {
    let _ = writeln!(std::io::stderr(), "{text}");
}

#[test]
fn acceptance() {
    let suite_start = Instant::now();
    let (ae_model, ae_trees) = trained("ae", 1).expect("training the reference model");
    line(&format!("reference model trained in {:.0?}", suite_start.elapsed()));

    type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("decoder validity", Box::new(|| decoder_validity(&ae_model))),
        ("reconstruction", Box::new(reconstruction)),
        ("gradient check", Box::new(gradient_check)),
        ("KL closed form", Box::new(kl_closed_form)),
        ("edit distance oracle", Box::new(edit_distance_oracle)),
        ("PCFG fidelity", Box::new(pcfg_fidelity)),
        ("EA operators", Box::new(|| ea_operators(&ae_model))),
        ("Nguyen SR", Box::new(nguyen_sr)),
        ("Feynman smoke", Box::new(feynman_smoke)),
        ("interpolation", Box::new(|| interpolation(&ae_model, &ae_trees))),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        line(&format!("criterion {:>2} {verdict} {name}: {detail} [{:.1?}]", k + 1, start.elapsed()));
        if !pass {
            failed.push(k + 1);
        }
    }
    line(&format!("acceptance finished in {:.0?}", suite_start.elapsed()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
