use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(Matrix::zeros_like).collect(),
            v: params.iter().map(Matrix::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and zeroes `grads`. A non-finite gradient skips
    /// the update (the step counter does not move) and is reported.
    pub fn step(&mut self, params: &mut [Matrix], grads: &mut [Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} / {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads.iter()).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("parameter shape changed".into()));
            }
        }
        let finite = grads.iter().all(|g| g.data.iter().all(|v| v.is_finite()));
        if !finite {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            g.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_descends() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![1.0])];
        let mut opt = Adam::new(&p, 0.1);
        let mut g = vec![Matrix::from_vec(1, 1, vec![2.0])]; // d/dw w^2
        opt.step(&mut p, &mut g).unwrap();
        assert!(p[0].data[0] < 1.0);
        assert_eq!(g[0].data[0], 0.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn converges_on_shifted_square() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![0.0])];
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let w = p[0].data[0];
            let mut g = vec![Matrix::from_vec(1, 1, vec![2.0 * (w - 3.0)])];
            opt.step(&mut p, &mut g).unwrap();
        }
        assert!((p[0].data[0] - 3.0).abs() < 1e-2, "{}", p[0].data[0]);
    }

    #[test]
    fn nan_gradient_is_skipped() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![1.0])];
        let mut opt = Adam::new(&p, 0.1);
        let mut g = vec![Matrix::from_vec(1, 1, vec![f64::NAN])];
        assert!(matches!(opt.step(&mut p, &mut g), Err(Error::NonFiniteGradient)));
        assert_eq!(opt.steps(), 0);
        assert_eq!(p[0].data[0], 1.0);
    }
}
