use std::collections::HashMap;

use super::{ExprTree, Symbol};
use crate::error::{Error, Result};

impl ExprTree {
    /// Evaluates at a single point. Constant placeholders take their values
    /// from `consts` in left-to-right order. `Ok(None)` marks a singularity.
    pub fn evaluate(&self, bindings: &HashMap<String, f64>, consts: &[f64]) -> Result<Option<f64>> {
        let expected = self.count_constants();
        if consts.len() != expected {
            return Err(Error::ConstantCount {
                expected,
                got: consts.len(),
            });
        }
        let mut next_const = 0;
        eval_point(self, bindings, consts, &mut next_const)
    }
}

fn eval_point(
    t: &ExprTree,
    bindings: &HashMap<String, f64>,
    consts: &[f64],
    next_const: &mut usize,
) -> Result<Option<f64>> {
    // children first keeps constant indexing in leaf (left-to-right) order
    let a = match t.left() {
        Some(l) => match eval_point(l, bindings, consts, next_const)? {
            Some(v) => v,
            None => return Ok(None),
        },
        None => 0.0,
    };
    let b = match t.right() {
        Some(r) => match eval_point(r, bindings, consts, next_const)? {
            Some(v) => v,
            None => return Ok(None),
        },
        None => 0.0,
    };
    Ok(match t.symbol() {
        Symbol::Var(name) => {
            let v = *bindings
                .get(name.as_ref())
                .ok_or_else(|| Error::UnboundVariable(name.to_string()))?;
            Some(v)
        }
        Symbol::Const => {
            let v = consts[*next_const];
            *next_const += 1;
            v.is_finite().then_some(v)
        }
        s => s.apply(a, b),
    })
}

#[derive(Clone, Debug)]
enum Instr {
    Var(usize),
    Const(usize),
    Lit(f64),
    Apply(Symbol),
}

/// A tree flattened into a postfix program over named data columns, for
/// evaluating many rows at once.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    program: Vec<Instr>,
    n_consts: usize,
}

impl CompiledExpr {
    /// `variables` fixes the column order expected by [`CompiledExpr::eval`].
    pub fn compile(tree: &ExprTree, variables: &[String]) -> Result<Self> {
        let mut program = Vec::with_capacity(tree.size());
        let mut n_consts = 0;
        fn walk(
            t: &ExprTree,
            variables: &[String],
            program: &mut Vec<Instr>,
            n_consts: &mut usize,
        ) -> Result<()> {
            if let Some(l) = t.left() {
                walk(l, variables, program, n_consts)?;
            }
            if let Some(r) = t.right() {
                walk(r, variables, program, n_consts)?;
            }
            program.push(match t.symbol() {
                Symbol::Var(name) => Instr::Var(
                    variables
                        .iter()
                        .position(|v| v.as_str() == name.as_ref())
                        .ok_or_else(|| Error::UnboundVariable(name.to_string()))?,
                ),
                Symbol::Const => {
                    *n_consts += 1;
                    Instr::Const(*n_consts - 1)
                }
                Symbol::Lit(v) => Instr::Lit(*v),
                s => Instr::Apply(s.clone()),
            });
            Ok(())
        }
        walk(tree, variables, &mut program, &mut n_consts)?;
        Ok(CompiledExpr { program, n_consts })
    }

    pub fn n_constants(&self) -> usize {
        self.n_consts
    }

    /// Evaluates every row; `None` if any row hits a singularity.
    pub fn eval(&self, columns: &[Vec<f64>], consts: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(consts.len(), self.n_consts, "constant count");
        let rows = columns.first().map_or(1, Vec::len);
        let mut stack: Vec<Vec<f64>> = Vec::with_capacity(8);
        for ins in &self.program {
            match ins {
                Instr::Var(i) => stack.push(columns[*i].clone()),
                Instr::Const(i) => {
                    let c = consts[*i];
                    if !c.is_finite() {
                        return None;
                    }
                    stack.push(vec![c; rows]);
                }
                Instr::Lit(v) => stack.push(vec![*v; rows]),
                Instr::Apply(sym) => {
                    if sym.arity() == 2 {
                        let b = stack.pop().expect("well-formed program");
                        let a = stack.last_mut().expect("well-formed program");
                        for (x, y) in a.iter_mut().zip(&b) {
                            *x = sym.apply(*x, *y)?;
                        }
                    } else {
                        let a = stack.last_mut().expect("well-formed program");
                        for x in a.iter_mut() {
                            *x = sym.apply(*x, 0.0)?;
                        }
                    }
                }
            }
        }
        stack.pop()
    }
}

/// Root mean squared error; infinite when the prediction is undefined.
pub fn rmse(pred: Option<&[f64]>, y: &[f64]) -> f64 {
    match pred {
        Some(p) if !y.is_empty() => {
            let sse: f64 = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = (sse / y.len() as f64).sqrt();
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        }
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_postfix, Vocabulary};

    fn tree(s: &str) -> ExprTree {
        let v = Vocabulary::from_names(&["x", "y", "c", "+", "-", "*", "/", "^2", "^3", "log", "sqrt"]).unwrap();
        parse_postfix(&s.split(' ').collect::<Vec<_>>(), &v).unwrap()
    }

    fn at(x: f64) -> HashMap<String, f64> {
        HashMap::from([("x".to_string(), x)])
    }

    #[test]
    fn simple_sum() {
        assert_eq!(tree("x x +").evaluate(&at(3.0), &[]).unwrap(), Some(6.0));
    }

    #[test]
    fn nguyen_one_at_two() {
        // direct arithmetic: 8 + 4 + 2
        let t = tree("x ^3 x ^2 + x +");
        assert_eq!(t.evaluate(&at(2.0), &[]).unwrap(), Some(2f64.powi(3) + 2f64.powi(2) + 2.0));
        assert_eq!(t.evaluate(&at(2.0), &[]).unwrap(), Some(14.0));
    }

    #[test]
    fn singularities_are_undefined() {
        assert_eq!(tree("x c /").evaluate(&at(1.0), &[0.0]).unwrap(), None);
        assert_eq!(tree("x log").evaluate(&at(-1.0), &[]).unwrap(), None);
        assert_eq!(tree("x sqrt").evaluate(&at(-1.0), &[]).unwrap(), None);
    }

    #[test]
    fn constants_in_leaf_order() {
        let t = tree("c x * c -");
        assert_eq!(t.evaluate(&at(2.0), &[3.0, 1.0]).unwrap(), Some(5.0));
    }

    #[test]
    fn evaluation_errors() {
        assert!(matches!(
            tree("x y +").evaluate(&at(1.0), &[]),
            Err(Error::UnboundVariable(_))
        ));
        assert!(matches!(
            tree("x c +").evaluate(&at(1.0), &[]),
            Err(Error::ConstantCount { expected: 1, got: 0 })
        ));
    }

    #[test]
    fn compiled_matches_pointwise() {
        let t = tree("c x * y / x ^2 +");
        let vars = vec!["x".to_string(), "y".to_string()];
        let prog = CompiledExpr::compile(&t, &vars).unwrap();
        let xs = vec![1.0, 2.0, -3.0];
        let ys = vec![0.5, 4.0, 2.0];
        let out = prog.eval(&[xs.clone(), ys.clone()], &[1.5]).unwrap();
        for i in 0..3 {
            let b = HashMap::from([("x".to_string(), xs[i]), ("y".to_string(), ys[i])]);
            assert_eq!(Some(out[i]), t.evaluate(&b, &[1.5]).unwrap());
        }
        assert!(prog.eval(&[xs, vec![1.0, 0.0, 1.0]], &[1.0]).is_none());
    }

    #[test]
    fn rmse_of_undefined_is_infinite() {
        assert_eq!(rmse(None, &[1.0]), f64::INFINITY);
        assert_eq!(rmse(Some(&[1.0, 3.0]), &[1.0, 1.0]), 2f64.sqrt());
    }
}
