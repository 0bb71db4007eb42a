//! The hierarchical VAE.
//!
//! Encoding runs a GRU21 cell bottom-up over the tree: each node combines
//! its symbol with the codes of its two children (zeros where a child is
//! missing). The root code goes through two linear heads giving the mean
//! and log-variance of the latent Gaussian. Decoding maps a latent point to
//! the root code and then, top-down, predicts a symbol from each code; for
//! operators and functions a GRU12 cell splits the code into codes for the
//! left and right child.

mod io;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::expr::{ExprTree, Symbol, Vocabulary};
use crate::nnmath::{argmax, softmax, Matrix, Tape, Var};

pub use crate::nnmath::kl_divergence;
pub use io::FORMAT_VERSION;

/// Parameter slots, in serialization order.
pub mod param {
    pub const ENC_W_IR: usize = 0;
    pub const ENC_W_IU: usize = 1;
    pub const ENC_W_IN: usize = 2;
    pub const ENC_W_HR: usize = 3;
    pub const ENC_W_HU: usize = 4;
    pub const ENC_W_HN: usize = 5;
    pub const ENC_B_IR: usize = 6;
    pub const ENC_B_IU: usize = 7;
    pub const ENC_B_IN: usize = 8;
    pub const ENC_B_HR: usize = 9;
    pub const ENC_B_HU: usize = 10;
    pub const ENC_B_HN: usize = 11;
    pub const MU_W: usize = 12;
    pub const MU_B: usize = 13;
    pub const LOGVAR_W: usize = 14;
    pub const LOGVAR_B: usize = 15;
    pub const Z2H_W: usize = 16;
    pub const Z2H_B: usize = 17;
    pub const SYM_W: usize = 18;
    pub const SYM_B: usize = 19;
    pub const DEC_W_IR: usize = 20;
    pub const DEC_W_IU: usize = 21;
    pub const DEC_W_IN: usize = 22;
    pub const DEC_W_HR: usize = 23;
    pub const DEC_W_HU: usize = 24;
    pub const DEC_W_HN: usize = 25;
    pub const DEC_B_IR: usize = 26;
    pub const DEC_B_IU: usize = 27;
    pub const DEC_B_IN: usize = 28;
    pub const DEC_B_HR: usize = 29;
    pub const DEC_B_HU: usize = 30;
    pub const DEC_B_HN: usize = 31;
    pub const COUNT: usize = 32;

    pub const NAMES: [&str; COUNT] = [
        "enc.w_ir", "enc.w_iu", "enc.w_in", "enc.w_hr", "enc.w_hu", "enc.w_hn", "enc.b_ir",
        "enc.b_iu", "enc.b_in", "enc.b_hr", "enc.b_hu", "enc.b_hn", "mu.w", "mu.b", "logvar.w",
        "logvar.b", "z2h.w", "z2h.b", "sym.w", "sym.b", "dec.w_ir", "dec.w_iu", "dec.w_in",
        "dec.w_hr", "dec.w_hu", "dec.w_hn", "dec.b_ir", "dec.b_iu", "dec.b_in", "dec.b_hr",
        "dec.b_hu", "dec.b_hn",
    ];
}

use param::*;

/// Input of a cell: a symbol index (one-hot) or an arbitrary dense vector.
#[derive(Clone, Copy, Debug)]
pub enum CellInput {
    OneHot(usize),
    Dense(Var),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedNode {
    pub symbol: usize,
    /// Codes for the left and right child; `None` for leaves.
    pub children: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HvaeModel {
    vocab: Vocabulary,
    hidden_dim: usize,
    latent_dim: usize,
    /// Depth at which free decoding only allows leaves.
    max_height: usize,
    params: Vec<Matrix>,
}

fn shapes(v: usize, h: usize, l: usize) -> [(usize, usize, usize); COUNT] {
    // (rows, cols, fan_in)
    let mut s = [(0, 0, 0); COUNT];
    for w in [ENC_W_IR, ENC_W_IU, ENC_W_IN] {
        s[w] = (h, v, v);
    }
    for w in [ENC_W_HR, ENC_W_HU, ENC_W_HN] {
        s[w] = (h, 2 * h, 2 * h);
    }
    for b in [ENC_B_IR, ENC_B_IU, ENC_B_IN] {
        s[b] = (h, 1, v);
    }
    for b in [ENC_B_HR, ENC_B_HU, ENC_B_HN] {
        s[b] = (h, 1, 2 * h);
    }
    s[MU_W] = (l, h, h);
    s[MU_B] = (l, 1, h);
    s[LOGVAR_W] = (l, h, h);
    s[LOGVAR_B] = (l, 1, h);
    s[Z2H_W] = (h, l, l);
    s[Z2H_B] = (h, 1, l);
    s[SYM_W] = (v, h, h);
    s[SYM_B] = (v, 1, h);
    for w in [DEC_W_IR, DEC_W_IU, DEC_W_IN] {
        s[w] = (2 * h, v, v);
    }
    for w in [DEC_W_HR, DEC_W_HU, DEC_W_HN] {
        s[w] = (2 * h, h, h);
    }
    for b in [DEC_B_IR, DEC_B_IU, DEC_B_IN] {
        s[b] = (2 * h, 1, v);
    }
    for b in [DEC_B_HR, DEC_B_HU, DEC_B_HN] {
        s[b] = (2 * h, 1, h);
    }
    s
}

impl HvaeModel {
    /// Fresh model with weights uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        vocab: Vocabulary,
        hidden_dim: usize,
        latent_dim: usize,
        max_height: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden_dim == 0 || latent_dim == 0 || max_height == 0 {
            return Err(Error::Config("dimensions and max height must be positive".into()));
        }
        let params = shapes(vocab.len(), hidden_dim, latent_dim)
            .iter()
            .map(|&(r, c, fan)| Matrix::uniform(r, c, fan, rng))
            .collect();
        Ok(HvaeModel {
            vocab,
            hidden_dim,
            latent_dim,
            max_height,
            params,
        })
    }

    pub fn from_parts(
        vocab: Vocabulary,
        hidden_dim: usize,
        latent_dim: usize,
        max_height: usize,
        params: Vec<Matrix>,
    ) -> Result<Self> {
        let expected = shapes(vocab.len(), hidden_dim, latent_dim);
        if params.len() != COUNT {
            return Err(Error::Shape(format!("{} parameter blocks, expected {COUNT}", params.len())));
        }
        for (i, (p, &(r, c, _))) in params.iter().zip(&expected).enumerate() {
            if p.rows != r || p.cols != c || p.data.len() != r * c {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {r}x{c}",
                    NAMES[i], p.rows, p.cols
                )));
            }
        }
        if max_height == 0 {
            return Err(Error::Config("max height must be positive".into()));
        }
        Ok(HvaeModel {
            vocab,
            hidden_dim,
            latent_dim,
            max_height,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn max_height(&self) -> usize {
        self.max_height
    }

    pub fn set_max_height(&mut self, h: usize) {
        self.max_height = h.max(1);
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.params.iter().map(Matrix::zeros_like).collect()
    }

    fn symbol_index(&self, s: &Symbol) -> Result<usize> {
        self.vocab
            .position(s)
            .ok_or_else(|| Error::UnknownToken(s.name()))
    }

    fn input_term(&self, tape: &mut Tape, x: CellInput, w: usize, b: usize) -> Result<Var> {
        let wx = match x {
            CellInput::OneHot(i) => tape.column(w, i)?,
            CellInput::Dense(v) => tape.matvec(w, v)?,
        };
        let bias = tape.param(b);
        tape.add(wx, bias)
    }

    /// GRU21: `(x, h_l, h_r) -> h`.
    pub fn gru21(&self, tape: &mut Tape, x: CellInput, hl: Var, hr: Var) -> Result<Var> {
        let hc = tape.concat(hl, hr);
        let r_in = self.input_term(tape, x, ENC_W_IR, ENC_B_IR)?;
        let r_h = tape.affine(ENC_W_HR, Some(ENC_B_HR), hc)?;
        let r_pre = tape.add(r_in, r_h)?;
        let r = tape.sigmoid(r_pre);
        let u_in = self.input_term(tape, x, ENC_W_IU, ENC_B_IU)?;
        let u_h = tape.affine(ENC_W_HU, Some(ENC_B_HU), hc)?;
        let u_pre = tape.add(u_in, u_h)?;
        let u = tape.sigmoid(u_pre);
        let n_in = self.input_term(tape, x, ENC_W_IN, ENC_B_IN)?;
        let n_h = tape.affine(ENC_W_HN, Some(ENC_B_HN), hc)?;
        let gated = tape.mul(r, n_h)?;
        let n_pre = tape.add(n_in, gated)?;
        let n = tape.tanh(n_pre);
        let keep = tape.one_minus(u);
        let new = tape.mul(keep, n)?;
        let half = tape.scale(u, 0.5);
        let from_l = tape.mul(half, hl)?;
        let from_r = tape.mul(half, hr)?;
        let children = tape.add(from_l, from_r)?;
        tape.add(new, children)
    }

    /// GRU12: `(x, h) -> (h_l, h_r)`.
    pub fn gru12(&self, tape: &mut Tape, x: CellInput, h: Var) -> Result<(Var, Var)> {
        let r_in = self.input_term(tape, x, DEC_W_IR, DEC_B_IR)?;
        let r_h = tape.affine(DEC_W_HR, Some(DEC_B_HR), h)?;
        let r_pre = tape.add(r_in, r_h)?;
        let r = tape.sigmoid(r_pre);
        let u_in = self.input_term(tape, x, DEC_W_IU, DEC_B_IU)?;
        let u_h = tape.affine(DEC_W_HU, Some(DEC_B_HU), h)?;
        let u_pre = tape.add(u_in, u_h)?;
        let u = tape.sigmoid(u_pre);
        let n_in = self.input_term(tape, x, DEC_W_IN, DEC_B_IN)?;
        let n_h = tape.affine(DEC_W_HN, Some(DEC_B_HN), h)?;
        let gated = tape.mul(r, n_h)?;
        let n_pre = tape.add(n_in, gated)?;
        let n = tape.tanh(n_pre);
        let keep = tape.one_minus(u);
        let new = tape.mul(keep, n)?;
        let hh = tape.concat(h, h);
        let carried = tape.mul(u, hh)?;
        let d = tape.add(new, carried)?;
        tape.split_half(d)
    }

    fn check_len(&self, what: &str, v: &[f64], n: usize) -> Result<()> {
        if v.len() != n {
            return Err(Error::Shape(format!("{what}: length {} expected {n}", v.len())));
        }
        Ok(())
    }

    /// One encoder step on plain vectors. `x` is usually one-hot.
    pub fn encode_node(&self, x: &[f64], hl: &[f64], hr: &[f64]) -> Result<Vec<f64>> {
        self.check_len("symbol input", x, self.vocab.len())?;
        self.check_len("left code", hl, self.hidden_dim)?;
        self.check_len("right code", hr, self.hidden_dim)?;
        let mut tape = Tape::new(&self.params);
        let xv = tape.input(x.to_vec());
        let l = tape.input(hl.to_vec());
        let r = tape.input(hr.to_vec());
        let h = self.gru21(&mut tape, CellInput::Dense(xv), l, r)?;
        Ok(tape.value(h).to_vec())
    }

    fn encode_subtree(
        &self,
        tape: &mut Tape,
        t: &ExprTree,
        trace: &mut Option<&mut Vec<(Symbol, Vec<f64>)>>,
    ) -> Result<Var> {
        let hl = match t.left() {
            Some(l) => self.encode_subtree(tape, l, trace)?,
            None => tape.zeros(self.hidden_dim),
        };
        let hr = match t.right() {
            Some(r) => self.encode_subtree(tape, r, trace)?,
            None => tape.zeros(self.hidden_dim),
        };
        let idx = self.symbol_index(t.symbol())?;
        let h = self.gru21(tape, CellInput::OneHot(idx), hl, hr)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t.symbol().clone(), tape.value(h).to_vec()));
        }
        Ok(h)
    }

    /// Records the encoder on `tape`, returning the `(mu, logvar)` handles.
    pub fn encode_on(&self, tape: &mut Tape, t: &ExprTree) -> Result<(Var, Var)> {
        let h = self.encode_subtree(tape, t, &mut None)?;
        let mu = tape.affine(MU_W, Some(MU_B), h)?;
        let logvar = tape.affine(LOGVAR_W, Some(LOGVAR_B), h)?;
        Ok((mu, logvar))
    }

    /// Mean and log-variance of the posterior for `t`.
    pub fn encode_mean(&self, t: &ExprTree) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let (mu, lv) = self.encode_on(&mut tape, t)?;
        Ok((tape.value(mu).to_vec(), tape.value(lv).to_vec()))
    }

    pub fn encode_tree<R: Rng + ?Sized>(&self, t: &ExprTree, rng: &mut R) -> Result<LatentPoint> {
        let (mu, logvar) = self.encode_mean(t)?;
        let z = reparameterize(&mu, &logvar, rng);
        Ok(LatentPoint { mu, logvar, z })
    }

    /// Node codes in the order the encoder produced them (post-order).
    pub fn encode_trace(&self, t: &ExprTree) -> Result<Vec<(Symbol, Vec<f64>)>> {
        let mut tape = Tape::new(&self.params);
        let mut out = Vec::new();
        self.encode_subtree(&mut tape, t, &mut Some(&mut out))?;
        Ok(out)
    }

    fn allowed_mask(&self, leaves_only: bool) -> Vec<bool> {
        self.vocab
            .symbols()
            .iter()
            .map(|s| !leaves_only || s.arity() == 0)
            .collect()
    }

    fn choose(&self, logits: &[f64], mask: &[bool], rng: Option<&mut (dyn RngCore + '_)>) -> usize {
        let masked: Vec<f64> = logits
            .iter()
            .zip(mask)
            .map(|(l, ok)| if *ok { *l } else { f64::NEG_INFINITY })
            .collect();
        match rng {
            None => argmax(&masked),
            Some(rng) => {
                let p = softmax(&masked);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for (i, pi) in p.iter().enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    last = i;
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                last
            }
        }
    }

    /// One decoder step on a plain code: pick a symbol (greedy when `rng`
    /// is `None`), and for non-leaves compute the child codes.
    pub fn decode_node(&self, h: &[f64], rng: Option<&mut (dyn RngCore + '_)>) -> Result<DecodedNode> {
        self.check_len("code", h, self.hidden_dim)?;
        let mut tape = Tape::new(&self.params);
        let hv = tape.input(h.to_vec());
        let mask = self.allowed_mask(false);
        self.decode_step(&mut tape, hv, &mask, rng)
    }

    fn decode_step(
        &self,
        tape: &mut Tape,
        h: Var,
        mask: &[bool],
        rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<DecodedNode> {
        let logits = tape.affine(SYM_W, Some(SYM_B), h)?;
        let symbol = self.choose(tape.value(logits), mask, rng);
        if self.vocab.symbol(symbol).arity() == 0 {
            return Ok(DecodedNode {
                symbol,
                children: None,
            });
        }
        let (l, r) = self.gru12(tape, CellInput::OneHot(symbol), h)?;
        Ok(DecodedNode {
            symbol,
            children: Some((tape.value(l).to_vec(), tape.value(r).to_vec())),
        })
    }

    fn decode_rec(
        &self,
        tape: &mut Tape,
        h: Var,
        depth: usize,
        max_height: usize,
        rng: &mut Option<&mut (dyn RngCore + '_)>,
    ) -> Result<ExprTree> {
        let mask = self.allowed_mask(depth >= max_height);
        let logits = tape.affine(SYM_W, Some(SYM_B), h)?;
        let idx = self.choose(tape.value(logits), &mask, rng.as_deref_mut());
        let sym = self.vocab.symbol(idx).clone();
        match sym.arity() {
            0 => ExprTree::leaf(sym),
            arity => {
                let (hl, hr) = self.gru12(tape, CellInput::OneHot(idx), h)?;
                let left = self.decode_rec(tape, hl, depth + 1, max_height, rng)?;
                if arity == 1 {
                    ExprTree::unary(sym, left)
                } else {
                    let right = self.decode_rec(tape, hr, depth + 1, max_height, rng)?;
                    ExprTree::binary(sym, left, right)
                }
            }
        }
    }

    fn decode_with(
        &self,
        z: &[f64],
        max_height: usize,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<ExprTree> {
        self.check_len("latent", z, self.latent_dim)?;
        let mut tape = Tape::new(&self.params);
        let zv = tape.input(z.to_vec());
        let h = tape.affine(Z2H_W, Some(Z2H_B), zv)?;
        self.decode_rec(&mut tape, h, 1, max_height.max(1), &mut rng)
    }

    /// Greedy decoding. At depth `max_height` only leaves are allowed, so the
    /// result is always a valid tree of at most that height.
    pub fn decode_tree(&self, z: &[f64], max_height: usize) -> Result<ExprTree> {
        self.decode_with(z, max_height, None)
    }

    /// Decoding with categorical sampling of each symbol.
    pub fn sample_tree<R: RngCore>(&self, z: &[f64], max_height: usize, rng: &mut R) -> Result<ExprTree> {
        self.decode_with(z, max_height, Some(rng))
    }

    /// Teacher-forced decoding: follows the structure of `t`, appending one
    /// cross-entropy term per node in in-order.
    fn reconstruction_terms(&self, tape: &mut Tape, t: &ExprTree, h: Var, terms: &mut Vec<Var>) -> Result<()> {
        let idx = self.symbol_index(t.symbol())?;
        let logits = tape.affine(SYM_W, Some(SYM_B), h)?;
        let ce = tape.cross_entropy_logits(logits, idx)?;
        match t.left() {
            None => terms.push(ce),
            Some(l) => {
                let (hl, hr) = self.gru12(tape, CellInput::OneHot(idx), h)?;
                self.reconstruction_terms(tape, l, hl, terms)?;
                terms.push(ce);
                if let Some(r) = t.right() {
                    self.reconstruction_terms(tape, r, hr, terms)?;
                }
            }
        }
        Ok(())
    }

    /// Loss with a given reparameterization noise; gradients are
    /// accumulated into `grads` when provided.
    pub fn loss_with_noise(
        &self,
        t: &ExprTree,
        lambda: f64,
        eps: &[f64],
        grads: Option<&mut [Matrix]>,
    ) -> Result<LossParts> {
        self.check_len("noise", eps, self.latent_dim)?;
        let mut tape = Tape::new(&self.params);
        let (mu, logvar) = self.encode_on(&mut tape, t)?;
        let z = tape.reparameterize(mu, logvar, eps.to_vec())?;
        let h = tape.affine(Z2H_W, Some(Z2H_B), z)?;
        let mut terms = Vec::with_capacity(t.size());
        self.reconstruction_terms(&mut tape, t, h, &mut terms)?;
        let mut rec = terms[0];
        for &term in &terms[1..] {
            rec = tape.add(rec, term)?;
        }
        let kl = tape.kl_divergence(mu, logvar)?;
        let weighted = tape.scale(kl, lambda);
        let total = tape.add(rec, weighted)?;
        if let Some(g) = grads {
            tape.backward(total, g)?;
        }
        Ok(LossParts {
            total: tape.scalar(total),
            reconstruction: tape.scalar(rec),
            kl: tape.scalar(kl),
        })
    }

    /// `J = sum of per-node cross-entropies + lambda * KL`.
    pub fn loss<R: Rng + ?Sized>(&self, t: &ExprTree, lambda: f64, rng: &mut R) -> Result<LossParts> {
        if lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        let eps = standard_normal(self.latent_dim, rng);
        self.loss_with_noise(t, lambda, &eps, None)
    }

    /// Reconstruction loss decoding from the posterior mean (no noise).
    pub fn mean_reconstruction_loss(&self, t: &ExprTree) -> Result<f64> {
        let eps = vec![0.0; self.latent_dim];
        Ok(self.loss_with_noise(t, 0.0, &eps, None)?.reconstruction)
    }

    /// Greedy reconstruction through the posterior mean.
    pub fn reconstruct(&self, t: &ExprTree) -> Result<ExprTree> {
        let (mu, _) = self.encode_mean(t)?;
        self.decode_tree(&mu, self.max_height)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `mu + exp(logvar / 2) * eps` with the given noise.
pub fn reparameterize_with(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

pub fn reparameterize<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> Vec<f64> {
    let eps = standard_normal(mu.len(), rng);
    reparameterize_with(mu, logvar, &eps)
}
