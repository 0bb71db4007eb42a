use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hvae::bench::{builtin_benchmarks, run_experiment, run_seed, summarize, summary_csv, write_experiment, ExperimentConfig};
use hvae::expr::{parse_postfix, read_corpus, write_corpus, ExprTree, Symbol, Vocabulary};
use hvae::grammar::{builtin_grammar_text, builtin_vocabulary, generate_corpus, Pcfg};
use hvae::hvae::{reparameterize, HvaeModel};
use hvae::latent::{interpolate, neighborhood_sample, sample_prior, DecodeMode};
use hvae::sr::{evolve, grammar_search, random_search, Dataset, Method, RunReport, SearchConfig, SrTask};
use hvae::train::{cross_validate, init_model, sweep, sweep_csv, train, Annealing, SweepAxis, TrainConfig};
use hvae::{Error, Result};

#[derive(Parser)]
#[command(name = "hvae", version, about = "Hierarchical VAE for expression trees and latent-space symbolic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a training corpus from a grammar.
    Corpus(CorpusArgs),
    /// Train a model on a corpus.
    Train(TrainCmd),
    /// Cross-validated reconstruction error.
    Evaluate(EvaluateCmd),
    /// Cross-validation over corpus sizes or latent dimensions.
    Sweep(SweepCmd),
    /// Encode expressions to latent means (or samples).
    Encode(EncodeArgs),
    /// Decode latent vectors to expressions.
    Decode(DecodeArgs),
    /// Decode draws from the prior or around an expression.
    Sample(SampleArgs),
    /// Decode points on the segment between two expressions.
    Interpolate(InterpolateArgs),
    /// Symbolic regression on a benchmark equation or CSV data.
    Sr(SrArgs),
    /// Multi-run benchmark experiment.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Builtin grammar name (ae, trig, nguyen, nguyen2, feynman, feynman2) or grammar file.
    #[arg(long, default_value = "ae")]
    grammar: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    max_height: usize,
    #[arg(long)]
    dedup: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the grammar's vocabulary here.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CorpusInput {
    #[arg(long)]
    corpus: PathBuf,
    /// Builtin vocabulary name or vocabulary file; inferred from the corpus when absent.
    #[arg(long)]
    vocab: Option<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 800.0)]
    anneal_midpoint: f64,
    #[arg(long, default_value_t = 200.0)]
    anneal_steepness: f64,
    #[arg(long, default_value_t = 1800)]
    anneal_freeze: u64,
    /// Final KL weight of the annealing schedule.
    #[arg(long, default_value_t = 0.1)]
    anneal_ceiling: f64,
    /// Global gradient-norm clipping.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    validation_fraction: f64,
    /// Free-decoding height cap (default: corpus max height + 1).
    #[arg(long)]
    max_height: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            annealing: Annealing::Tanh {
                midpoint: self.anneal_midpoint,
                steepness: self.anneal_steepness,
                freeze_after: self.anneal_freeze,
                ceiling: self.anneal_ceiling,
            },
            seed: self.seed,
            learning_rate: self.lr,
            clip_norm: self.clip,
            validation_fraction: self.validation_fraction,
            max_height: self.max_height,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    input: CorpusInput,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out_model: PathBuf,
    /// Per-batch loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateCmd {
    #[command(flatten)]
    input: CorpusInput,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    input: CorpusInput,
    #[command(flatten)]
    train: TrainArgs,
    /// corpus_size or latent_dim.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus file of postfix expressions.
    #[arg(long)]
    input: PathBuf,
    /// Output reparameterized samples instead of means.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// One whitespace-separated latent vector per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    max_height: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    stochastic: bool,
    /// Sample the neighborhood of this postfix expression instead of the prior.
    #[arg(long)]
    around: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Postfix expression at alpha = 0.
    #[arg(long)]
    from: String,
    /// Postfix expression at alpha = 1.
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 4)]
    steps: usize,
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value = "edhie")]
    method: Method,
    /// Model file(s); each equation uses the one whose variables match.
    #[arg(long)]
    model: Vec<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    budget: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    pop_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_generations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        let mut c = SearchConfig::default();
        c.ea.pop_size = self.pop_size;
        c.ea.max_generations = self.max_generations;
        c
    }

    fn models(&self) -> Result<Vec<HvaeModel>> {
        self.model.iter().map(HvaeModel::load).collect()
    }
}

#[derive(Args)]
struct SrArgs {
    /// Benchmark id (e.g. NG-8) or a CSV file whose last column is the target.
    #[arg(long)]
    task: String,
    /// Test CSV for a CSV task; the training file is reused when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Grammar for the grammar method with CSV tasks.
    #[arg(long)]
    grammar: Option<String>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "nguyen")]
    suite: String,
    /// Restrict to these ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[command(flatten)]
    search: SearchArgs,
}

fn load_grammar(spec: &str) -> Result<Pcfg> {
    match builtin_grammar_text(spec) {
        Some(text) => Pcfg::parse(&text),
        None => Pcfg::parse(&fs::read_to_string(spec)?),
    }
}

fn infer_vocabulary(text: &str) -> Result<Vocabulary> {
    let mut symbols: Vec<Symbol> = Vec::new();
    for tok in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .flat_map(|l| l.split(' '))
    {
        let s = Symbol::from_name(tok)?;
        if !matches!(s, Symbol::Lit(_)) && !symbols.contains(&s) {
            symbols.push(s);
        }
    }
    symbols.sort_by_key(|s| (s.arity(), s.name()));
    Vocabulary::new(symbols)
}

fn load_corpus(input: &CorpusInput) -> Result<(Vocabulary, Vec<ExprTree>)> {
    let text = fs::read_to_string(&input.corpus)?;
    let vocab = match &input.vocab {
        Some(v) => match builtin_vocabulary(v) {
            Some(b) => b,
            None => Vocabulary::load(v)?,
        },
        None => infer_vocabulary(&text)?,
    };
    let corpus = read_corpus(&text, &vocab)?;
    Ok((vocab, corpus))
}

fn parse_expr(text: &str, vocab: &Vocabulary) -> Result<ExprTree> {
    parse_postfix(&text.split_whitespace().collect::<Vec<_>>(), vocab)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn run_corpus(a: CorpusArgs) -> Result<()> {
    let g = load_grammar(&a.grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trees = generate_corpus(&g, a.n, a.max_height, a.dedup, &mut rng)?;
    emit(a.out.as_deref(), &write_corpus(&trees))?;
    if let Some(p) = a.vocab_out {
        let vocab = builtin_vocabulary(&a.grammar).unwrap_or_else(|| g.vocabulary().clone());
        fs::write(p, vocab.to_text())?;
    }
    Ok(())
}

fn run_train(a: TrainCmd) -> Result<ExitCode> {
    let (vocab, corpus) = load_corpus(&a.input)?;
    let cfg = a.train.config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_model(&vocab, &corpus, &cfg, &mut rng)?;
    let out = train(model, &corpus, &cfg, &mut rng)?;
    out.model.save(&a.out_model)?;
    if let Some(p) = a.trace {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "epoch", "lambda", "loss", "reconstruction", "kl"])?;
        for r in &out.trace {
            w.write_record([
                r.iteration.to_string(),
                r.epoch.to_string(),
                format!("{:e}", r.lambda),
                format!("{:e}", r.loss),
                format!("{:e}", r.reconstruction),
                format!("{:e}", r.kl),
            ])?;
        }
        fs::write(p, w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    }
    let last = out.trace.last();
    println!(
        "trained {} steps, kept epoch {}, final loss {}",
        out.trace.len(),
        out.checkpoint_epoch,
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.loss))
    );
    if let Some(step) = out.aborted_at {
        eprintln!("training stopped at step {step}: non-finite loss or gradient; saved the last good checkpoint");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_evaluate(a: EvaluateCmd) -> Result<()> {
    let (vocab, corpus) = load_corpus(&a.input)?;
    let report = cross_validate(&corpus, &vocab, &a.train.config(), a.folds)?;
    print!("{}", report.to_text());
    if let Some(p) = a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_sweep(a: SweepCmd) -> Result<()> {
    let (vocab, corpus) = load_corpus(&a.input)?;
    let rows = sweep(&corpus, &vocab, &a.train.config(), a.axis, &a.values, a.folds)?;
    emit(a.out.as_deref(), &sweep_csv(a.axis, &rows)?)
}

fn run_encode(a: EncodeArgs) -> Result<()> {
    let model = HvaeModel::load(&a.model)?;
    let trees = read_corpus(&fs::read_to_string(&a.input)?, model.vocab())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = String::new();
    for t in &trees {
        let (mu, lv) = model.encode_mean(t)?;
        let z = if a.sample { reparameterize(&mu, &lv, &mut rng) } else { mu };
        out.push_str(&fmt_vec(&z));
        out.push('\n');
    }
    emit(None, &out)
}

fn run_decode(a: DecodeArgs) -> Result<()> {
    let model = HvaeModel::load(&a.model)?;
    let height = a.max_height.unwrap_or(model.max_height());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = String::new();
    for line in fs::read_to_string(&a.input)?.lines().filter(|l| !l.trim().is_empty()) {
        let z = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("not a number: `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let t = if a.stochastic {
            model.sample_tree(&z, height, &mut rng)?
        } else {
            model.decode_tree(&z, height)?
        };
        out.push_str(&t.postfix_string());
        out.push('\n');
    }
    emit(None, &out)
}

fn run_sample(a: SampleArgs) -> Result<()> {
    let model = HvaeModel::load(&a.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trees = match &a.around {
        Some(expr) => neighborhood_sample(&model, &parse_expr(expr, model.vocab())?, a.n, &mut rng)?,
        None => {
            let mode = if a.stochastic { DecodeMode::Stochastic } else { DecodeMode::Greedy };
            sample_prior(&model, a.n, mode, &mut rng)?
        }
    };
    emit(None, &write_corpus(&trees))
}

fn run_interpolate(a: InterpolateArgs) -> Result<()> {
    let model = HvaeModel::load(&a.model)?;
    let from = parse_expr(&a.from, model.vocab())?;
    let to = parse_expr(&a.to, model.vocab())?;
    let mut out = String::new();
    for (alpha, t) in interpolate(&model, &from, &to, a.steps)? {
        out.push_str(&format!("{alpha:.3}\t{}\n", t.infix_string()));
    }
    emit(None, &out)
}

fn report_runs(task: &str, method: Method, reports: &[RunReport], out: Option<&Path>) -> Result<()> {
    let row = summarize(task, method, reports);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for (k, r) in reports.iter().enumerate() {
            fs::write(dir.join(format!("run_{k}.json")), serde_json::to_string_pretty(r)?)?;
        }
        fs::write(dir.join("summary.csv"), summary_csv(std::slice::from_ref(&row))?)?;
    }
    for (k, r) in reports.iter().enumerate() {
        println!(
            "run {k}: success {} evaluations {} best {} r2 {:.6}",
            r.success,
            r.evaluations_to_success.map_or("NA".to_string(), |e| e.to_string()),
            r.best_expression.as_deref().unwrap_or("-"),
            r.best_test_r2
        );
    }
    print!("{}", summary_csv(&[row])?);
    Ok(())
}

fn run_sr(a: SrArgs) -> Result<()> {
    let s = &a.search;
    let cfg = s.config();
    let models = s.models()?;
    let bench = builtin_benchmarks();
    let reports: Vec<RunReport> = if let Some(eq) = bench.get(&a.task) {
        (0..s.runs)
            .map(|k| hvae::bench::run_once(eq, s.method, &models, s.budget, &cfg, run_seed(s.seed, &eq.id, k)))
            .collect::<Result<_>>()?
    } else if Path::new(&a.task).exists() {
        let (vars, train) = Dataset::read_csv(&a.task)?;
        let test = match &a.test {
            Some(p) => {
                let (tv, d) = Dataset::read_csv(p)?;
                if tv != vars {
                    return Err(Error::Format("train and test CSV headers differ".into()));
                }
                d
            }
            None => train.clone(),
        };
        let task = SrTask::new(&a.task, vars.clone(), train, test, s.budget)?;
        let mut sorted = vars.clone();
        sorted.sort();
        (0..s.runs)
            .map(|k| {
                let seed = run_seed(s.seed, &a.task, k);
                match s.method {
                    Method::Grammar => {
                        let g = load_grammar(a.grammar.as_deref().unwrap_or("nguyen"))?;
                        grammar_search(&g, &task, &cfg, seed)
                    }
                    m => {
                        let model = models
                            .iter()
                            .find(|md| md.vocab().variables() == sorted)
                            .ok_or_else(|| Error::Config(format!("no model with variables {sorted:?}")))?;
                        if m == Method::Edhie {
                            evolve(model, &task, &cfg, seed)
                        } else {
                            random_search(model, &task, &cfg, seed)
                        }
                    }
                }
            })
            .collect::<Result<_>>()?
    } else {
        return Err(Error::UnknownBenchmark(a.task));
    };
    report_runs(&a.task, s.method, &reports, s.out.as_deref())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let s = &a.search;
    let ids: Vec<String> = if a.ids.is_empty() {
        builtin_benchmarks()
            .values()
            .filter(|e| e.suite() == a.suite)
            .map(|e| e.id.clone())
            .collect()
    } else {
        a.ids.clone()
    };
    if ids.is_empty() {
        return Err(Error::UnknownBenchmark(a.suite));
    }
    let cfg = ExperimentConfig {
        method: s.method,
        ids,
        runs: s.runs,
        budget: s.budget,
        seed: s.seed,
        search: s.config(),
    };
    let result = run_experiment(&cfg, &s.models()?)?;
    if let Some(dir) = &s.out {
        write_experiment(&result, dir)?;
    }
    print!("{}", summary_csv(&result.summary)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Corpus(a) => run_corpus(a)?,
        Command::Train(a) => return run_train(a),
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::Sweep(a) => run_sweep(a)?,
        Command::Encode(a) => run_encode(a)?,
        Command::Decode(a) => run_decode(a)?,
        Command::Sample(a) => run_sample(a)?,
        Command::Interpolate(a) => run_interpolate(a)?,
        Command::Sr(a) => run_sr(a)?,
        Command::Bench(a) => run_bench(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

