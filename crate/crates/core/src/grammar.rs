//! Probabilistic context-free grammars and the corpus sampler.
//!
//! Grammar text has one nonterminal per line:
//!
//! ```text
//! S -> S A F [0.4] | F [0.6]
//! A -> + [0.5] | - [0.5]
//! ```
//!
//! Names starting with an uppercase letter are nonterminals; every other
//! token is a terminal. The first rule's left-hand side is the start symbol.
//! Derived terminal strings are read as infix expressions.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::expr::{canonicalize, parse_infix, ExprTree, Symbol, Vocabulary};

pub const DEFAULT_RESAMPLE_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Nonterminal(usize),
    Terminal(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Production {
    pub rhs: Vec<Item>,
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct Pcfg {
    nonterminals: Vec<String>,
    start: usize,
    rules: Vec<Vec<Production>>,
    vocab: Vocabulary,
}

/// Per-nonterminal, per-production selection counts.
pub type RuleCounts = Vec<Vec<u64>>;

fn is_nonterminal_name(tok: &str) -> bool {
    tok.chars().next().is_some_and(|c| c.is_ascii_uppercase())
}

impl Pcfg {
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(&str, &str)> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_once("->")
                    .map(|(lhs, rhs)| (lhs.trim(), rhs.trim()))
                    .ok_or_else(|| Error::Grammar(format!("missing `->` in `{l}`")))
            })
            .collect::<Result<_>>()?;
        if lines.is_empty() {
            return Err(Error::Grammar("empty grammar".into()));
        }
        let mut nonterminals: Vec<String> = Vec::new();
        for (lhs, _) in &lines {
            if !is_nonterminal_name(lhs) || lhs.contains(char::is_whitespace) {
                return Err(Error::Grammar(format!("bad nonterminal name `{lhs}`")));
            }
            if nonterminals.iter().any(|n| n == lhs) {
                return Err(Error::Grammar(format!("nonterminal `{lhs}` defined twice")));
            }
            nonterminals.push(lhs.to_string());
        }

        let mut rules = Vec::with_capacity(lines.len());
        let mut terminals: Vec<String> = Vec::new();
        for (lhs, rhs) in &lines {
            let mut prods = Vec::new();
            for alt in rhs.split('|') {
                let mut toks: Vec<&str> = alt.split_whitespace().collect();
                let prob_tok = toks
                    .pop()
                    .ok_or_else(|| Error::Grammar(format!("empty alternative for `{lhs}`")))?;
                let prob = prob_tok
                    .strip_prefix('[')
                    .and_then(|p| p.strip_suffix(']'))
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Grammar(format!("expected `[p]` at the end of `{}`", alt.trim()))
                    })?;
                if !(prob > 0.0 && prob <= 1.0) {
                    return Err(Error::Grammar(format!("probability {prob} outside (0, 1]")));
                }
                if toks.is_empty() {
                    return Err(Error::Grammar(format!("empty production for `{lhs}`")));
                }
                let mut items = Vec::with_capacity(toks.len());
                for tok in toks {
                    if is_nonterminal_name(tok) {
                        let id = nonterminals
                            .iter()
                            .position(|n| n == tok)
                            .ok_or_else(|| Error::Grammar(format!("unknown nonterminal `{tok}`")))?;
                        items.push(Item::Nonterminal(id));
                    } else {
                        if tok != "(" && tok != ")" {
                            Symbol::from_name(tok)?;
                            if !terminals.iter().any(|t| t == tok) {
                                terminals.push(tok.to_string());
                            }
                        }
                        items.push(Item::Terminal(tok.to_string()));
                    }
                }
                prods.push(Production { rhs: items, prob });
            }
            let total: f64 = prods.iter().map(|p| p.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Grammar(format!(
                    "probabilities of `{lhs}` sum to {total}, not 1"
                )));
            }
            rules.push(prods);
        }

        let vocab = Vocabulary::from_names(&terminals)
            .map_err(|e| Error::Grammar(format!("terminals do not form a token library: {e}")))?;
        let g = Pcfg {
            nonterminals,
            start: 0,
            rules,
            vocab,
        };
        g.check_productive()?;
        Ok(g)
    }

    fn check_productive(&self) -> Result<()> {
        let mut productive = vec![false; self.nonterminals.len()];
        loop {
            let mut changed = false;
            for (nt, prods) in self.rules.iter().enumerate() {
                if productive[nt] {
                    continue;
                }
                let ok = prods.iter().any(|p| {
                    p.rhs.iter().all(|it| match it {
                        Item::Nonterminal(i) => productive[*i],
                        Item::Terminal(_) => true,
                    })
                });
                if ok {
                    productive[nt] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        match productive.iter().position(|p| !p) {
            Some(i) => Err(Error::Grammar(format!(
                "nonterminal `{}` has no finite derivation",
                self.nonterminals[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn start(&self) -> &str {
        &self.nonterminals[self.start]
    }

    pub fn rules(&self, nonterminal: &str) -> Option<&[Production]> {
        let i = self.nonterminals.iter().position(|n| n == nonterminal)?;
        Some(&self.rules[i])
    }

    /// The terminals that can appear in derived expressions.
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn empty_counts(&self) -> RuleCounts {
        self.rules.iter().map(|p| vec![0; p.len()]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (nt, prods) in self.nonterminals.iter().zip(&self.rules) {
            let _ = write!(out, "{nt} ->");
            for (k, p) in prods.iter().enumerate() {
                if k > 0 {
                    out.push_str(" |");
                }
                for item in &p.rhs {
                    match item {
                        Item::Nonterminal(i) => {
                            let _ = write!(out, " {}", self.nonterminals[*i]);
                        }
                        Item::Terminal(t) => {
                            let _ = write!(out, " {t}");
                        }
                    }
                }
                let _ = write!(out, " [{}]", p.prob);
            }
            out.push('\n');
        }
        out
    }

    /// Leftmost derivation from the start symbol. Every production is drawn
    /// independently with its probability. Gives up (returning `None`) once
    /// more than `max_terminals` non-parenthesis terminals were produced.
    pub fn derive<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        max_terminals: usize,
        mut counts: Option<&mut RuleCounts>,
    ) -> Option<Vec<String>> {
        let mut out = Vec::new();
        let mut emitted = 0usize;
        let mut stack = vec![Item::Nonterminal(self.start)];
        while let Some(item) = stack.pop() {
            match item {
                Item::Terminal(t) => {
                    if t != "(" && t != ")" {
                        emitted += 1;
                        if emitted > max_terminals {
                            return None;
                        }
                    }
                    out.push(t);
                }
                Item::Nonterminal(nt) => {
                    let prods = &self.rules[nt];
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = prods.len() - 1;
                    for (k, p) in prods.iter().enumerate() {
                        acc += p.prob;
                        if u < acc {
                            chosen = k;
                            break;
                        }
                    }
                    if let Some(c) = counts.as_deref_mut() {
                        c[nt][chosen] += 1;
                    }
                    stack.extend(prods[chosen].rhs.iter().rev().cloned());
                }
            }
        }
        Some(out)
    }
}

fn terminal_cap(max_height: usize) -> usize {
    // a binary tree of height h has at most 2^h - 1 nodes
    if max_height >= 24 {
        1 << 24
    } else {
        (1usize << max_height) - 1
    }
}

/// Samples one expression whose tree height is at most `max_height`,
/// rejecting and redrawing over-height derivations.
pub fn sample_expression<R: Rng + ?Sized>(
    g: &Pcfg,
    rng: &mut R,
    max_height: usize,
) -> Result<ExprTree> {
    sample_expression_with(g, rng, max_height, DEFAULT_RESAMPLE_BUDGET, None)
}

pub fn sample_expression_with<R: Rng + ?Sized>(
    g: &Pcfg,
    rng: &mut R,
    max_height: usize,
    budget: usize,
    mut counts: Option<&mut RuleCounts>,
) -> Result<ExprTree> {
    if max_height == 0 {
        return Err(Error::Config("max_height must be at least 1".into()));
    }
    let cap = terminal_cap(max_height);
    for _ in 0..budget {
        let Some(tokens) = g.derive(rng, cap, counts.as_deref_mut()) else {
            continue;
        };
        let tree = parse_infix(&tokens, &g.vocab)?;
        if tree.height() <= max_height {
            return Ok(tree);
        }
    }
    Err(Error::Rejected {
        attempts: budget,
        reason: format!("no derivation of height <= {max_height}"),
    })
}

/// Draws `n` canonicalized expressions. Literals produced by simplification
/// become constant placeholders when the grammar has `c`; otherwise the
/// sample is redrawn. With `dedup`, postfix serializations are distinct.
pub fn generate_corpus<R: Rng + ?Sized>(
    g: &Pcfg,
    n: usize,
    max_height: usize,
    dedup: bool,
    rng: &mut R,
) -> Result<Vec<ExprTree>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let has_const = g.vocab.has_constant();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut accepted = false;
        for _ in 0..DEFAULT_RESAMPLE_BUDGET {
            let raw = sample_expression(g, rng, max_height)?;
            let mut t = canonicalize(&raw);
            if t.contains_literal() {
                if !has_const {
                    continue;
                }
                t = canonicalize(&t.literals_to_constants());
            }
            if dedup && !seen.insert(t.postfix_string()) {
                continue;
            }
            out.push(t);
            accepted = true;
            break;
        }
        if !accepted {
            return Err(Error::Rejected {
                attempts: DEFAULT_RESAMPLE_BUDGET,
                reason: format!("could not find expression {} of {n}", out.len() + 1),
            });
        }
    }
    Ok(out)
}

pub const AE_GRAMMAR: &str = "\
S -> S A F [0.4] | F [0.6]
A -> + [0.5] | - [0.5]
F -> F B T [0.4] | T [0.6]
B -> * [0.5] | / [0.5]
T -> ( S ) [0.25] | c [0.375] | x [0.375]
";

pub const TRIG_GRAMMAR: &str = "\
S -> S A F [0.4] | F [0.6]
A -> + [0.5] | - [0.5]
F -> F B T [0.4] | T [0.6]
B -> * [0.5] | / [0.5]
T -> ( S ) [0.15] | cos ( S ) [0.05] | sin ( S ) [0.05] | L [0.75]
L -> c [0.5] | x [0.5]
";

const NGUYEN_BODY: &str = "\
E -> E + F [0.2] | E - F [0.2] | F [0.6]
F -> E * T [0.2] | E / T [0.2] | T [0.6]
T -> V [0.4] | ( E ) P [0.2] | ( E ) [0.2] | R ( E ) [0.2]
P -> ^2 [0.39] | ^3 [0.26] | ^4 [0.19] | ^5 [0.16]
R -> sin [0.2] | cos [0.2] | exp [0.2] | log [0.2] | sqrt [0.2]
";

const FEYNMAN_BODY: &str = "\
E -> E + F [0.2] | E - F [0.2] | F [0.6]
F -> E * T [0.2] | E / T [0.2] | T [0.6]
T -> V [0.4] | c [0.3] | A [0.3]
A -> ( E ) P [0.1] | ( E ) [0.55] | R ( E ) [0.35]
P -> ^2 [0.8] | ^3 [0.2]
R -> sin [0.25] | cos [0.25] | exp [0.25] | sqrt [0.25]
";

const ONE_VAR: &str = "V -> x [1.0]\n";
const TWO_VARS: &str = "V -> x [0.5] | y [0.5]\n";

pub const BUILTIN_NAMES: [&str; 6] = ["ae", "trig", "nguyen", "nguyen2", "feynman", "feynman2"];

pub fn builtin_grammar_text(name: &str) -> Option<String> {
    Some(match name {
        "ae" => AE_GRAMMAR.to_string(),
        "trig" => TRIG_GRAMMAR.to_string(),
        "nguyen" => format!("{NGUYEN_BODY}{ONE_VAR}"),
        "nguyen2" => format!("{NGUYEN_BODY}{TWO_VARS}"),
        "feynman" => format!("{FEYNMAN_BODY}{ONE_VAR}"),
        "feynman2" => format!("{FEYNMAN_BODY}{TWO_VARS}"),
        _ => return None,
    })
}

pub fn builtin_grammars() -> BTreeMap<&'static str, Pcfg> {
    BUILTIN_NAMES
        .iter()
        .map(|&n| {
            let g = Pcfg::parse(&builtin_grammar_text(n).unwrap()).expect("builtin grammar parses");
            (n, g)
        })
        .collect()
}

/// The token library a model for the named corpus is trained with.
///
/// The arithmetic libraries include `^2` because canonicalization rewrites
/// `t * t` into a square.
pub fn builtin_vocabulary(name: &str) -> Option<Vocabulary> {
    let names: &[&str] = match name {
        "ae" => &["x", "c", "+", "-", "*", "/", "^2"],
        "trig" => &["x", "c", "+", "-", "*", "/", "^2", "sin", "cos"],
        "nguyen" => &[
            "x", "+", "-", "*", "/", "^2", "^3", "^4", "^5", "sin", "cos", "exp", "log", "sqrt",
        ],
        "nguyen2" => &[
            "x", "y", "+", "-", "*", "/", "^2", "^3", "^4", "^5", "sin", "cos", "exp", "log", "sqrt",
        ],
        "feynman" => &["x", "c", "+", "-", "*", "/", "^2", "^3", "sin", "cos", "exp", "sqrt"],
        "feynman2" => &["x", "y", "c", "+", "-", "*", "/", "^2", "^3", "sin", "cos", "exp", "sqrt"],
        _ => return None,
    };
    Some(Vocabulary::from_names(names).expect("builtin vocabulary"))
}
