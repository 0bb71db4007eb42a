//! A small, fixed rewrite system used to normalize expressions.
//!
//! Rules, applied bottom-up until nothing changes:
//! - literal-only subtrees fold to a literal (when defined);
//! - `c ∘ c → c` for any binary operator over two placeholders;
//! - `t - t → 0` and `t / t → 1` when `t` has no placeholders
//!   (two placeholders are independent constants, so the rule stays off);
//! - `t + 0`, `0 + t`, `t - 0`, `t * 1`, `1 * t`, `t / 1 → t`;
//! - `0 - (0 - t) → t`;
//! - `t * t → t ^2` when `t` has no placeholders.

use super::{ExprTree, Symbol};

pub fn canonicalize(tree: &ExprTree) -> ExprTree {
    let mut current = rewrite(tree.clone());
    loop {
        let next = rewrite(current.clone());
        if next == current {
            return current;
        }
        current = next;
    }
}

fn rewrite(t: ExprTree) -> ExprTree {
    let (sym, left, right) = t.into_parts();
    let left = left.map(rewrite);
    let right = right.map(rewrite);
    let mut node = ExprTree::new(sym, left, right).expect("rewrite keeps arity");
    while let Some(next) = rewrite_node(&node) {
        node = next;
    }
    node
}

fn lit(t: &ExprTree) -> Option<f64> {
    match t.symbol() {
        Symbol::Lit(v) => Some(*v),
        _ => None,
    }
}

fn rewrite_node(t: &ExprTree) -> Option<ExprTree> {
    let sym = t.symbol();
    match (t.left(), t.right()) {
        (Some(a), None) => {
            let v = sym.apply(lit(a)?, 0.0)?;
            Some(ExprTree::literal(v))
        }
        (Some(a), Some(b)) => {
            if let (Some(x), Some(y)) = (lit(a), lit(b)) {
                if let Some(v) = sym.apply(x, y) {
                    return Some(ExprTree::literal(v));
                }
            }
            if a.symbol().is_const() && b.symbol().is_const() {
                return Some(ExprTree::constant());
            }
            let same = a == b && !a.has_constants();
            match sym {
                Symbol::Sub if same => Some(ExprTree::literal(0.0)),
                Symbol::Div if same => Some(ExprTree::literal(1.0)),
                Symbol::Mul if same => Some(ExprTree::unary(Symbol::Pow(2), a.clone()).unwrap()),
                Symbol::Add if lit(b) == Some(0.0) => Some(a.clone()),
                Symbol::Add if lit(a) == Some(0.0) => Some(b.clone()),
                Symbol::Sub if lit(b) == Some(0.0) => Some(a.clone()),
                Symbol::Sub if lit(a) == Some(0.0) && b.symbol() == &Symbol::Sub => {
                    let inner = b.left().unwrap();
                    (lit(inner) == Some(0.0)).then(|| b.right().unwrap().clone())
                }
                Symbol::Mul if lit(b) == Some(1.0) => Some(a.clone()),
                Symbol::Mul if lit(a) == Some(1.0) => Some(b.clone()),
                Symbol::Div if lit(b) == Some(1.0) => Some(a.clone()),
                _ => None,
            }
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_postfix, Vocabulary};

    fn tree(s: &str) -> ExprTree {
        let v = Vocabulary::from_names(&["x", "y", "c", "+", "-", "*", "/", "sin", "^2"]).unwrap();
        parse_postfix(&s.split(' ').collect::<Vec<_>>(), &v).unwrap()
    }

    fn canon(s: &str) -> String {
        canonicalize(&tree(s)).postfix_string()
    }

    #[test]
    fn placeholder_absorption() {
        assert_eq!(canon("c c +"), "c");
        assert_eq!(canon("c c * c /"), "c");
    }

    #[test]
    fn literal_folding() {
        assert_eq!(canon("2 3 *"), "6");
        assert_eq!(canon("2 sin 0 *"), format!("{}", 2f64.sin() * 0.0));
        // 1/0 is undefined, so it stays
        assert_eq!(canon("1 0 /"), "1 0 /");
    }

    #[test]
    fn self_cancellation_only_without_placeholders() {
        assert_eq!(canon("x x -"), "0");
        assert_eq!(canon("x sin x sin /"), "1");
        assert_eq!(canon("c x * c x * -"), "c x * c x * -");
        assert_eq!(canon("x x - y +"), "y");
    }

    #[test]
    fn double_negation_and_identities() {
        assert_eq!(canon("0 0 x - -"), "x");
        assert_eq!(canon("x 1 *"), "x");
        assert_eq!(canon("x 1 /"), "x");
        assert_eq!(canon("0 x +"), "x");
    }

    #[test]
    fn square_folding() {
        assert_eq!(canon("x x *"), "x ^2");
        assert_eq!(canon("x y + x y + *"), "x y + ^2");
        assert_eq!(canon("c c *"), "c");
    }

    #[test]
    fn deterministic() {
        let t = tree("x x * x x * + c c - /");
        assert_eq!(canonicalize(&t), canonicalize(&t));
        assert_eq!(canonicalize(&t).postfix_string(), "x ^2 x ^2 + c /");
    }
}
