use std::str::FromStr;

use super::{ExprTree, Symbol, SymbolKind, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Notation {
    Infix,
    Prefix,
    Postfix,
}

impl FromStr for Notation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infix" => Ok(Notation::Infix),
            "prefix" => Ok(Notation::Prefix),
            "postfix" => Ok(Notation::Postfix),
            _ => Err(Error::Config(format!("unknown notation `{s}`"))),
        }
    }
}

impl ExprTree {
    /// Serializes the tree. Infix wraps every binary subexpression in
    /// parentheses, functions are written `f ( a )` and powers as a
    /// postfix `a ^k`.
    pub fn to_notation(&self, notation: Notation) -> Vec<String> {
        let mut out = Vec::with_capacity(self.size() * 2);
        match notation {
            Notation::Postfix => postfix(self, &mut out),
            Notation::Prefix => prefix(self, &mut out),
            Notation::Infix => infix(self, &mut out),
        }
        out
    }
}

fn postfix(t: &ExprTree, out: &mut Vec<String>) {
    if let Some(l) = t.left() {
        postfix(l, out);
    }
    if let Some(r) = t.right() {
        postfix(r, out);
    }
    out.push(t.symbol().name());
}

fn prefix(t: &ExprTree, out: &mut Vec<String>) {
    out.push(t.symbol().name());
    if let Some(l) = t.left() {
        prefix(l, out);
    }
    if let Some(r) = t.right() {
        prefix(r, out);
    }
}

fn infix(t: &ExprTree, out: &mut Vec<String>) {
    match (t.symbol(), t.left(), t.right()) {
        (s, Some(l), Some(r)) => {
            out.push("(".into());
            infix(l, out);
            out.push(s.name());
            infix(r, out);
            out.push(")".into());
        }
        (Symbol::Pow(_), Some(a), None) => {
            infix(a, out);
            out.push(t.symbol().name());
        }
        (s, Some(a), None) => {
            out.push(s.name());
            out.push("(".into());
            infix(a, out);
            out.push(")".into());
        }
        (s, _, _) => out.push(s.name()),
    }
}

/// Builds a tree from reverse Polish tokens.
pub fn parse_postfix<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<ExprTree> {
    let mut stack: Vec<ExprTree> = Vec::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let sym = vocab.resolve(tok)?;
        let node = match sym.arity() {
            2 => {
                let r = stack.pop();
                let l = stack.pop();
                match (l, r) {
                    (Some(l), Some(r)) => ExprTree::binary(sym, l, r)?,
                    _ => return Err(Error::Malformed(format!("stack underflow at `{tok}`"))),
                }
            }
            1 => {
                let a = stack
                    .pop()
                    .ok_or_else(|| Error::Malformed(format!("stack underflow at `{tok}`")))?;
                ExprTree::unary(sym, a)?
            }
            _ => ExprTree::leaf(sym)?,
        };
        stack.push(node);
    }
    match stack.len() {
        1 => Ok(stack.pop().unwrap()),
        0 => Err(Error::Malformed("empty expression".into())),
        n => Err(Error::Malformed(format!("{n} items left on the stack"))),
    }
}

/// Parses conventional infix tokens with the usual precedence: `+ -` bind
/// weakest, then `* /`, then postfix powers; all binary operators are left
/// associative. Functions take a parenthesized argument.
pub fn parse_infix<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<ExprTree> {
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut p = InfixParser {
        tokens: &tokens,
        pos: 0,
        vocab,
    };
    let t = p.expr()?;
    if p.pos != tokens.len() {
        return Err(Error::Malformed(format!(
            "unexpected `{}` at position {}",
            tokens[p.pos], p.pos
        )));
    }
    Ok(t)
}

struct InfixParser<'a> {
    tokens: &'a [&'a str],
    pos: usize,
    vocab: &'a Vocabulary,
}

impl<'a> InfixParser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        match self.peek() {
            Some(t) if t == tok => {
                self.pos += 1;
                Ok(())
            }
            other => Err(Error::Malformed(format!("expected `{tok}`, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<ExprTree> {
        let mut lhs = self.term()?;
        while let Some(op @ ("+" | "-")) = self.peek() {
            let sym = self.vocab.resolve(op)?;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = ExprTree::binary(sym, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprTree> {
        let mut lhs = self.power()?;
        while let Some(op @ ("*" | "/")) = self.peek() {
            let sym = self.vocab.resolve(op)?;
            self.pos += 1;
            let rhs = self.power()?;
            lhs = ExprTree::binary(sym, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<ExprTree> {
        let mut base = self.primary()?;
        while let Some(tok) = self.peek().filter(|t| t.starts_with('^')) {
            let sym = self.vocab.resolve(tok)?;
            self.pos += 1;
            base = ExprTree::unary(sym, base)?;
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<ExprTree> {
        let tok = self
            .peek()
            .ok_or_else(|| Error::Malformed("unexpected end of input".into()))?;
        self.pos += 1;
        if tok == "(" {
            let inner = self.expr()?;
            self.expect(")")?;
            return Ok(inner);
        }
        let sym = self.vocab.resolve(tok)?;
        match sym.kind() {
            SymbolKind::UnaryFn => {
                self.expect("(")?;
                let arg = self.expr()?;
                self.expect(")")?;
                ExprTree::unary(sym, arg)
            }
            SymbolKind::BinaryOp => Err(Error::Malformed(format!("operator `{tok}` without left operand"))),
            _ => ExprTree::leaf(sym),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_names(&["x", "y", "c", "+", "-", "*", "/", "sin", "cos", "^2", "^3"]).unwrap()
    }

    fn pf(s: &str) -> ExprTree {
        parse_postfix(&s.split(' ').collect::<Vec<_>>(), &vocab()).unwrap()
    }

    #[test]
    fn single_binary_op() {
        let t = pf("x x +");
        assert_eq!(t.symbol(), &Symbol::Add);
        assert_eq!(t.to_notation(Notation::Postfix), ["x", "x", "+"]);
    }

    #[test]
    fn x_plus_cos_x() {
        let t = pf("x x cos +");
        assert_eq!(t.to_notation(Notation::Infix), ["(", "x", "+", "cos", "(", "x", ")", ")"]);
        assert_eq!(t.to_notation(Notation::Prefix), ["+", "x", "cos", "x"]);
        // cos(x) + x
        let t2 = pf("x cos x +");
        assert_eq!(t2.to_notation(Notation::Infix), ["(", "cos", "(", "x", ")", "+", "x", ")"]);
    }

    #[test]
    fn round_trip_with_constant() {
        let toks = ["x", "c", "+", "x", "*"];
        let t = parse_postfix(&toks, &vocab()).unwrap();
        assert_eq!(t.symbol(), &Symbol::Mul);
        assert_eq!(t.left().unwrap().symbol(), &Symbol::Add);
        assert_eq!(t.to_notation(Notation::Postfix), toks);
    }

    #[test]
    fn height_four_tree_notations() {
        // (c * x) + sin(x / c)
        let t = pf("c x * x c / sin +");
        assert_eq!(t.height(), 4);
        assert_eq!(
            t.to_notation(Notation::Infix).join(" "),
            "( ( c * x ) + sin ( ( x / c ) ) )"
        );
        assert_eq!(t.to_notation(Notation::Prefix).join(" "), "+ * c x sin / x c");
    }

    #[test]
    fn postfix_errors() {
        let v = vocab();
        assert!(matches!(parse_postfix(&["x", "q"], &v), Err(Error::UnknownToken(_))));
        assert!(matches!(parse_postfix(&["x", "+"], &v), Err(Error::Malformed(_))));
        assert!(matches!(parse_postfix(&["x", "x"], &v), Err(Error::Malformed(_))));
        assert!(matches!(parse_postfix::<&str>(&[], &v), Err(Error::Malformed(_))));
    }

    #[test]
    fn infix_precedence_and_functions() {
        let v = vocab();
        let parse = |s: &str| parse_infix(&s.split(' ').collect::<Vec<_>>(), &v).unwrap();
        assert_eq!(parse("x + c * x").postfix_string(), "x c x * +");
        assert_eq!(parse("x - x - c").postfix_string(), "x x - c -");
        assert_eq!(parse("( x + c ) ^2").postfix_string(), "x c + ^2");
        assert_eq!(parse("sin ( x * y ) / x").postfix_string(), "x y * sin x /");
        assert_eq!(parse("x ^2 ^3").postfix_string(), "x ^2 ^3");
        assert!(parse_infix(&["x", "+"], &v).is_err());
        assert!(parse_infix(&["(", "x"], &v).is_err());
        assert!(parse_infix(&["x", ")"], &v).is_err());
    }

    #[test]
    fn infix_output_reparses() {
        let t = pf("x c + ^2 y sin / x -");
        let v = vocab();
        assert_eq!(parse_infix(&t.to_notation(Notation::Infix), &v).unwrap(), t);
    }
}
