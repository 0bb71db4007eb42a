use super::{dot, log_sum_exp, sigmoid, softmax, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    /// A parameter matrix flattened into a vector (used for biases).
    Param(usize),
    /// `W x + b`
    Affine { w: usize, b: Option<usize>, x: Var },
    /// Column `col` of `W`, i.e. `W` times a one-hot vector.
    Column { w: usize, col: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Softmax(Var),
    CrossEntropy { probs: Var, target: usize },
    CrossEntropyLogits { logits: Var, target: usize },
    Sum(Var),
    Kl { mu: Var, logvar: Var },
    Reparam { mu: Var, logvar: Var, eps: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records vector operations for one forward pass so gradients can be
/// pulled back to the inputs and to the referenced parameters.
///
/// Nodes are appended in evaluation order, which is already topological,
/// so the backward sweep visits each recorded op exactly once.
pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn shape_err(what: &str, a: usize, b: usize) -> Error {
    Error::Shape(format!("{what}: {a} vs {b}"))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a recorded value (zeros before any backward).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .filter(|g| !g.is_empty())
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.input(vec![0.0; n])
    }

    pub fn param(&mut self, p: usize) -> Var {
        let value = self.params[p].data.clone();
        self.push(value, Op::Param(p))
    }

    pub fn affine(&mut self, w: usize, b: Option<usize>, x: Var) -> Result<Var> {
        let wm = &self.params[w];
        let xv = &self.nodes[x.0].value;
        if wm.cols != xv.len() {
            return Err(shape_err("affine input", wm.cols, xv.len()));
        }
        let mut out = wm.matvec(xv);
        if let Some(b) = b {
            let bm = &self.params[b];
            if bm.len() != out.len() {
                return Err(shape_err("affine bias", bm.len(), out.len()));
            }
            for (o, bv) in out.iter_mut().zip(&bm.data) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Affine { w, b, x }))
    }

    pub fn matvec(&mut self, w: usize, x: Var) -> Result<Var> {
        self.affine(w, None, x)
    }

    pub fn column(&mut self, w: usize, col: usize) -> Result<Var> {
        let wm = &self.params[w];
        if col >= wm.cols {
            return Err(shape_err("column index", col, wm.cols));
        }
        let out = (0..wm.rows).map(|r| wm.get(r, col)).collect();
        Ok(self.push(out, Op::Column { w, col }))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(shape_err(what, av.len(), bv.len()));
        }
        Ok(av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.unary(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        v.extend_from_slice(&self.nodes[b.0].value);
        self.push(v, Op::Concat(a, b))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if start + len > xv.len() {
            return Err(shape_err("slice end", start + len, xv.len()));
        }
        let v = xv[start..start + len].to_vec();
        Ok(self.push(v, Op::Slice { x, start }))
    }

    /// Splits an even-length vector into its two halves.
    pub fn split_half(&mut self, x: Var) -> Result<(Var, Var)> {
        let n = self.len_of(x);
        if !n.is_multiple_of(2) {
            return Err(Error::Shape(format!("split_half of odd length {n}")));
        }
        Ok((self.slice(x, 0, n / 2)?, self.slice(x, n / 2, n / 2)?))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.len_of(x) == 0 {
            return Err(Error::Shape("softmax of an empty vector".into()));
        }
        let v = softmax(&self.nodes[x.0].value);
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// `-ln p[target]` for a probability vector.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let p = &self.nodes[probs.0].value;
        if target >= p.len() {
            return Err(shape_err("cross-entropy target", target, p.len()));
        }
        let v = -p[target].ln();
        Ok(self.push(vec![v], Op::CrossEntropy { probs, target }))
    }

    /// Softmax followed by cross-entropy, computed stably from logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = &self.nodes[logits.0].value;
        if l.is_empty() || target >= l.len() {
            return Err(shape_err("cross-entropy target", target, l.len()));
        }
        let v = log_sum_exp(l) - l[target];
        Ok(self.push(vec![v], Op::CrossEntropyLogits { logits, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().sum();
        self.push(vec![v], Op::Sum(x))
    }

    /// `-1/2 * sum(1 + logvar - mu^2 - exp(logvar))`.
    pub fn kl_divergence(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let v = kl_divergence(&self.nodes[mu.0].value, &self.nodes[logvar.0].value)?;
        Ok(self.push(vec![v], Op::Kl { mu, logvar }))
    }

    /// `mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Vec<f64>) -> Result<Var> {
        let (m, lv) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
        if m.len() != lv.len() || m.len() != eps.len() {
            return Err(shape_err("reparameterize", m.len(), eps.len()));
        }
        let v = m
            .iter()
            .zip(lv)
            .zip(&eps)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect();
        Ok(self.push(v, Op::Reparam { mu, logvar, eps }))
    }

    /// Pulls the gradient of the scalar `root` back through the tape,
    /// accumulating into `param_grads` and into the per-value gradients.
    pub fn backward(&mut self, root: Var, param_grads: &mut [Matrix]) -> Result<()> {
        if self.len_of(root) != 1 {
            return Err(Error::Shape(format!(
                "backward from a non-scalar of length {}",
                self.len_of(root)
            )));
        }
        if param_grads.len() != self.params.len() {
            return Err(shape_err("parameter gradients", param_grads.len(), self.params.len()));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        adj[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.is_empty() {
                continue;
            }
            self.pull(i, &g, &mut adj, param_grads);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), Vec::new());
            }
            let acc = &mut self.grads[i];
            if acc.is_empty() {
                *acc = g;
            } else {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn pull(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>], pg: &mut [Matrix]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(usize) -> f64| {
            let n = self.nodes[v.0].value.len();
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; n];
            }
            for (k, s) in slot.iter_mut().enumerate() {
                *s += f(k);
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(p) => {
                for (a, b) in pg[*p].data.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Affine { w, b, x } => {
                let wm = &self.params[*w];
                let xv = &self.nodes[x.0].value;
                let gw = &mut pg[*w];
                for (r, gr) in g.iter().enumerate() {
                    if *gr == 0.0 {
                        continue;
                    }
                    let row = &mut gw.data[r * wm.cols..(r + 1) * wm.cols];
                    for (d, xv) in row.iter_mut().zip(xv) {
                        *d += gr * xv;
                    }
                }
                if let Some(b) = b {
                    for (a, gr) in pg[*b].data.iter_mut().zip(g) {
                        *a += gr;
                    }
                }
                let mut gx = vec![0.0; wm.cols];
                for (r, gr) in g.iter().enumerate() {
                    if *gr == 0.0 {
                        continue;
                    }
                    for (d, wv) in gx.iter_mut().zip(wm.row(r)) {
                        *d += gr * wv;
                    }
                }
                acc(*x, &mut |k| gx[k]);
            }
            Op::Column { w, col } => {
                let gw = &mut pg[*w];
                let cols = gw.cols;
                for (r, gr) in g.iter().enumerate() {
                    gw.data[r * cols + col] += gr;
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |k| g[k]);
                acc(*b, &mut |k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |k| g[k]);
                acc(*b, &mut |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |k| g[k] * bv[k]);
                acc(*b, &mut |k| g[k] * av[k]);
            }
            Op::Scale(a, s) => acc(*a, &mut |k| g[k] * s),
            Op::OneMinus(a) => acc(*a, &mut |k| -g[k]),
            Op::Sigmoid(a) => acc(*a, &mut |k| g[k] * y[k] * (1.0 - y[k])),
            Op::Tanh(a) => acc(*a, &mut |k| g[k] * (1.0 - y[k] * y[k])),
            Op::Exp(a) => acc(*a, &mut |k| g[k] * y[k]),
            Op::Concat(a, b) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, &mut |k| g[k]);
                acc(*b, &mut |k| g[n + k]);
            }
            Op::Slice { x, start } => {
                let n = g.len();
                acc(*x, &mut |k| {
                    if k >= *start && k < start + n {
                        g[k - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::Softmax(x) => {
                let s = dot(g, y);
                acc(*x, &mut |k| y[k] * (g[k] - s));
            }
            Op::CrossEntropy { probs, target } => {
                let p = self.nodes[probs.0].value[*target];
                acc(*probs, &mut |k| if k == *target { -g[0] / p } else { 0.0 });
            }
            Op::CrossEntropyLogits { logits, target } => {
                let p = softmax(&self.nodes[logits.0].value);
                acc(*logits, &mut |k| {
                    g[0] * (p[k] - if k == *target { 1.0 } else { 0.0 })
                });
            }
            Op::Sum(x) => acc(*x, &mut |_| g[0]),
            Op::Kl { mu, logvar } => {
                let (m, lv) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
                acc(*mu, &mut |k| g[0] * m[k]);
                acc(*logvar, &mut |k| g[0] * 0.5 * (lv[k].exp() - 1.0));
            }
            Op::Reparam { mu, logvar, eps } => {
                let lv = &self.nodes[logvar.0].value;
                acc(*mu, &mut |k| g[k]);
                acc(*logvar, &mut |k| g[k] * eps[k] * 0.5 * (lv[k] / 2.0).exp());
            }
        }
    }
}

/// Closed-form KL divergence of `N(mu, exp(logvar))` from `N(0, I)`,
/// summed over dimensions.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(shape_err("kl", mu.len(), logvar.len()));
    }
    Ok(0.5
        * mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}
