//! Expression trees and the symbols they are built from.
//!
//! A tree is binary: operators have two children, functions only a left
//! child, and leaves (variables, constant placeholders, literals) none.

mod canon;
mod edit;
mod eval;
mod notation;

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use canon::canonicalize;
pub use edit::{edit_distance, levenshtein};
pub use eval::{rmse, CompiledExpr};
pub use notation::{parse_infix, parse_postfix, Notation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolKind {
    BinaryOp,
    UnaryFn,
    Variable,
    Constant,
    Literal,
}

impl SymbolKind {
    pub fn arity(self) -> usize {
        match self {
            SymbolKind::BinaryOp => 2,
            SymbolKind::UnaryFn => 1,
            _ => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SymbolKind::BinaryOp => "binary",
            SymbolKind::UnaryFn => "unary",
            SymbolKind::Variable => "variable",
            SymbolKind::Constant => "constant",
            SymbolKind::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "binary" | "binary-op" => SymbolKind::BinaryOp,
            "unary" | "unary-fn" => SymbolKind::UnaryFn,
            "variable" => SymbolKind::Variable,
            "constant" | "constant-placeholder" => SymbolKind::Constant,
            "literal" => SymbolKind::Literal,
            _ => return None,
        })
    }
}

/// A node label. Evaluation semantics are fixed per variant.
#[derive(Clone, Debug)]
pub enum Symbol {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    /// Only used by ground-truth benchmark expressions; no token library has it.
    Asin,
    /// Integer power `^k`, modeled as a unary function.
    Pow(u8),
    Var(Arc<str>),
    /// The constant placeholder `c`, fitted against data.
    Const,
    Lit(f64),
}

impl Symbol {
    /// Resolves a token name to a symbol. Known operator names map to
    /// operators, `c` to the placeholder, numbers to literals and any other
    /// identifier to a variable.
    pub fn from_name(name: &str) -> Result<Symbol> {
        let sym = match name {
            "+" => Symbol::Add,
            "-" => Symbol::Sub,
            "*" => Symbol::Mul,
            "/" => Symbol::Div,
            "sin" => Symbol::Sin,
            "cos" => Symbol::Cos,
            "exp" => Symbol::Exp,
            "log" => Symbol::Log,
            "sqrt" => Symbol::Sqrt,
            "asin" => Symbol::Asin,
            "c" => Symbol::Const,
            _ => {
                if let Some(k) = name.strip_prefix('^') {
                    match k.parse::<u8>() {
                        Ok(k) if (2..=9).contains(&k) => Symbol::Pow(k),
                        _ => return Err(Error::UnknownToken(name.to_string())),
                    }
                } else if let Some(v) = parse_literal(name) {
                    Symbol::Lit(v)
                } else if is_identifier(name) {
                    Symbol::Var(Arc::from(name))
                } else {
                    return Err(Error::UnknownToken(name.to_string()));
                }
            }
        };
        Ok(sym)
    }

    pub fn kind(&self) -> SymbolKind {
        match self {
            Symbol::Add | Symbol::Sub | Symbol::Mul | Symbol::Div => SymbolKind::BinaryOp,
            Symbol::Sin
            | Symbol::Cos
            | Symbol::Exp
            | Symbol::Log
            | Symbol::Sqrt
            | Symbol::Asin
            | Symbol::Pow(_) => SymbolKind::UnaryFn,
            Symbol::Var(_) => SymbolKind::Variable,
            Symbol::Const => SymbolKind::Constant,
            Symbol::Lit(_) => SymbolKind::Literal,
        }
    }

    pub fn arity(&self) -> usize {
        self.kind().arity()
    }

    pub fn name(&self) -> String {
        match self {
            Symbol::Add => "+".into(),
            Symbol::Sub => "-".into(),
            Symbol::Mul => "*".into(),
            Symbol::Div => "/".into(),
            Symbol::Sin => "sin".into(),
            Symbol::Cos => "cos".into(),
            Symbol::Exp => "exp".into(),
            Symbol::Log => "log".into(),
            Symbol::Sqrt => "sqrt".into(),
            Symbol::Asin => "asin".into(),
            Symbol::Pow(k) => format!("^{k}"),
            Symbol::Var(v) => v.to_string(),
            Symbol::Const => "c".into(),
            Symbol::Lit(v) => format!("{v}"),
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Symbol::Const)
    }

    /// Applies the symbol to already-evaluated children. `None` marks a
    /// singularity (zero division, log of a non-positive number, square root
    /// of a negative number, non-finite result).
    pub fn apply(&self, a: f64, b: f64) -> Option<f64> {
        let v = match self {
            Symbol::Add => a + b,
            Symbol::Sub => a - b,
            Symbol::Mul => a * b,
            Symbol::Div => {
                if b == 0.0 {
                    return None;
                }
                a / b
            }
            Symbol::Sin => a.sin(),
            Symbol::Cos => a.cos(),
            Symbol::Exp => a.exp(),
            Symbol::Log => {
                if a <= 0.0 {
                    return None;
                }
                a.ln()
            }
            Symbol::Sqrt => {
                if a < 0.0 {
                    return None;
                }
                a.sqrt()
            }
            Symbol::Asin => {
                if !(-1.0..=1.0).contains(&a) {
                    return None;
                }
                a.asin()
            }
            Symbol::Pow(k) => a.powi(*k as i32),
            Symbol::Lit(v) => *v,
            Symbol::Var(_) | Symbol::Const => a,
        };
        v.is_finite().then_some(v)
    }
}

impl PartialEq for Symbol {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Symbol::Pow(a), Symbol::Pow(b)) => a == b,
            (Symbol::Var(a), Symbol::Var(b)) => a == b,
            (Symbol::Lit(a), Symbol::Lit(b)) => a.to_bits() == b.to_bits(),
            _ => std::mem::discriminant(self) == std::mem::discriminant(other),
        }
    }
}

impl Eq for Symbol {}

impl Hash for Symbol {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Symbol::Pow(k) => k.hash(state),
            Symbol::Var(v) => v.hash(state),
            Symbol::Lit(v) => v.to_bits().hash(state),
            _ => {}
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn parse_literal(s: &str) -> Option<f64> {
    let first = s.chars().next()?;
    if !(first.is_ascii_digit() || first == '-' || first == '.') || s == "-" {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The ordered token library a model is trained on. Symbol order fixes the
/// one-hot positions, so it must survive save/load unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<Symbol>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.name(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate symbol `{s}`")));
            }
        }
        if !symbols.iter().any(|s| s.kind() == SymbolKind::Variable) {
            return Err(Error::Vocabulary("no variable symbol".into()));
        }
        Ok(Vocabulary { symbols, index })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let symbols = names
            .iter()
            .map(|n| Symbol::from_name(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn symbol(&self, i: usize) -> &Symbol {
        &self.symbols[i]
    }

    pub fn position(&self, sym: &Symbol) -> Option<usize> {
        self.index.get(&sym.name()).copied()
    }

    pub fn position_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Looks a token up, also accepting numeric literals, which are never
    /// part of a library but may appear in ground-truth expressions.
    pub fn resolve(&self, token: &str) -> Result<Symbol> {
        if let Some(&i) = self.index.get(token) {
            return Ok(self.symbols[i].clone());
        }
        match parse_literal(token) {
            Some(v) => Ok(Symbol::Lit(v)),
            None => Err(Error::UnknownToken(token.to_string())),
        }
    }

    pub fn variables(&self) -> Vec<String> {
        self.symbols
            .iter()
            .filter_map(|s| match s {
                Symbol::Var(v) => Some(v.to_string()),
                _ => None,
            })
            .collect()
    }

    pub fn has_constant(&self) -> bool {
        self.symbols.iter().any(Symbol::is_const)
    }

    /// `name<TAB>kind` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(&s.name());
            out.push('\t');
            out.push_str(s.kind().as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocabulary(format!("missing kind in `{line}`")))?;
            let kind = SymbolKind::parse(kind.trim())
                .ok_or_else(|| Error::Vocabulary(format!("unknown kind `{kind}`")))?;
            let sym = Symbol::from_name(name)?;
            if sym.kind() != kind {
                return Err(Error::Vocabulary(format!(
                    "`{name}` is a {}, not a {}",
                    sym.kind().as_str(),
                    kind.as_str()
                )));
            }
            symbols.push(sym);
        }
        Self::new(symbols)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExprTree {
    symbol: Symbol,
    left: Option<Box<ExprTree>>,
    right: Option<Box<ExprTree>>,
}

impl ExprTree {
    /// Builds a node, checking that the number of children matches the arity.
    pub fn new(symbol: Symbol, left: Option<ExprTree>, right: Option<ExprTree>) -> Result<Self> {
        let ok = match symbol.arity() {
            2 => left.is_some() && right.is_some(),
            1 => left.is_some() && right.is_none(),
            _ => left.is_none() && right.is_none(),
        };
        if !ok {
            return Err(Error::InvalidTree(format!(
                "`{symbol}` has arity {} but got {} children",
                symbol.arity(),
                left.is_some() as usize + right.is_some() as usize
            )));
        }
        Ok(ExprTree {
            symbol,
            left: left.map(Box::new),
            right: right.map(Box::new),
        })
    }

    pub fn leaf(symbol: Symbol) -> Result<Self> {
        Self::new(symbol, None, None)
    }

    pub fn unary(symbol: Symbol, child: ExprTree) -> Result<Self> {
        Self::new(symbol, Some(child), None)
    }

    pub fn binary(symbol: Symbol, left: ExprTree, right: ExprTree) -> Result<Self> {
        Self::new(symbol, Some(left), Some(right))
    }

    pub fn var(name: &str) -> Self {
        ExprTree::leaf(Symbol::Var(Arc::from(name))).expect("leaf")
    }

    pub fn constant() -> Self {
        ExprTree::leaf(Symbol::Const).expect("leaf")
    }

    pub fn literal(v: f64) -> Self {
        ExprTree::leaf(Symbol::Lit(v)).expect("leaf")
    }

    pub fn symbol(&self) -> &Symbol {
        &self.symbol
    }

    pub fn left(&self) -> Option<&ExprTree> {
        self.left.as_deref()
    }

    pub fn right(&self) -> Option<&ExprTree> {
        self.right.as_deref()
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        1 + self
            .left()
            .map_or(0, ExprTree::height)
            .max(self.right().map_or(0, ExprTree::height))
    }

    pub fn size(&self) -> usize {
        1 + self.left().map_or(0, ExprTree::size) + self.right().map_or(0, ExprTree::size)
    }

    /// Symbols in in-order (left subtree, node, right subtree).
    pub fn in_order(&self) -> Vec<&Symbol> {
        fn walk<'a>(t: &'a ExprTree, out: &mut Vec<&'a Symbol>) {
            if let Some(l) = t.left() {
                walk(l, out);
            }
            out.push(&t.symbol);
            if let Some(r) = t.right() {
                walk(r, out);
            }
        }
        let mut out = Vec::with_capacity(self.size());
        walk(self, &mut out);
        out
    }

    pub fn count_constants(&self) -> usize {
        self.in_order().into_iter().filter(|s| s.is_const()).count()
    }

    pub fn has_constants(&self) -> bool {
        self.symbol.is_const()
            || self.left().is_some_and(ExprTree::has_constants)
            || self.right().is_some_and(ExprTree::has_constants)
    }

    pub fn variables(&self) -> Vec<String> {
        let mut vars: Vec<String> = self
            .in_order()
            .into_iter()
            .filter_map(|s| match s {
                Symbol::Var(v) => Some(v.to_string()),
                _ => None,
            })
            .collect();
        vars.sort();
        vars.dedup();
        vars
    }

    /// True if every symbol (except literals) belongs to `vocab`.
    pub fn fits_vocabulary(&self, vocab: &Vocabulary) -> bool {
        self.in_order()
            .into_iter()
            .all(|s| matches!(s, Symbol::Lit(_)) || vocab.position(s).is_some())
    }

    /// Replaces every literal leaf with a constant placeholder.
    pub fn literals_to_constants(&self) -> ExprTree {
        match &self.symbol {
            Symbol::Lit(_) => ExprTree::constant(),
            _ => ExprTree {
                symbol: self.symbol.clone(),
                left: self.left.as_ref().map(|l| Box::new(l.literals_to_constants())),
                right: self.right.as_ref().map(|r| Box::new(r.literals_to_constants())),
            },
        }
    }

    pub fn contains_literal(&self) -> bool {
        matches!(self.symbol, Symbol::Lit(_))
            || self.left().is_some_and(ExprTree::contains_literal)
            || self.right().is_some_and(ExprTree::contains_literal)
    }

    pub fn postfix_string(&self) -> String {
        self.to_notation(Notation::Postfix).join(" ")
    }

    pub fn infix_string(&self) -> String {
        self.to_notation(Notation::Infix).join(" ")
    }

    pub(crate) fn into_parts(self) -> (Symbol, Option<ExprTree>, Option<ExprTree>) {
        (self.symbol, self.left.map(|b| *b), self.right.map(|b| *b))
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.postfix_string())
    }
}

/// Reads a corpus: one postfix expression per line, `#` starts a comment.
pub fn read_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<ExprTree>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| parse_postfix(&l.split(' ').collect::<Vec<_>>(), vocab))
        .collect()
}

pub fn write_corpus(trees: &[ExprTree]) -> String {
    let mut out = String::new();
    for t in trees {
        out.push_str(&t.postfix_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arity_is_enforced() {
        let x = ExprTree::var("x");
        assert!(ExprTree::new(Symbol::Sin, Some(x.clone()), Some(x.clone())).is_err());
        assert!(ExprTree::new(Symbol::Add, Some(x.clone()), None).is_err());
        assert!(ExprTree::new(Symbol::Const, Some(x.clone()), None).is_err());
        assert!(ExprTree::unary(Symbol::Sin, x).is_ok());
    }

    #[test]
    fn height_counts_nodes() {
        let x = ExprTree::var("x");
        let cos = ExprTree::unary(Symbol::Cos, x.clone()).unwrap();
        let t = ExprTree::binary(Symbol::Add, x.clone(), cos).unwrap();
        assert_eq!(x.height(), 1);
        assert_eq!(t.height(), 3);
        assert_eq!(t.size(), 4);
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::from_names(&["x", "c", "+", "sin", "^2"]).unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("x\tvariable"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_variable() {
        assert!(Vocabulary::from_names(&["x", "x"]).is_err());
        assert!(Vocabulary::from_names(&["c", "+"]).is_err());
        assert!(Vocabulary::from_text("x\tunary\n").is_err());
    }

    #[test]
    fn token_resolution() {
        assert_eq!(Symbol::from_name("^3").unwrap(), Symbol::Pow(3));
        assert_eq!(Symbol::from_name("-0.5").unwrap(), Symbol::Lit(-0.5));
        assert!(matches!(Symbol::from_name("y").unwrap(), Symbol::Var(_)));
        assert!(Symbol::from_name("^1").is_err());
        assert!(Symbol::from_name("$").is_err());
    }
}
