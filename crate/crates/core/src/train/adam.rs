use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Matrix;

/// Adam with bias correction. Step counts are kept per tensor, so a tensor
/// that receives no gradient in a step is left untouched, moments included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: Vec<u64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: vec![0; params.len()],
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Param(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((w, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Matrix::from_rows(&[[1.5, -2.0]])];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &p);
        for _ in 0..5 {
            adam.step(&mut p, &[Some(Matrix::zeros(1, 2))]).unwrap();
        }
        assert_eq!(p[0], Matrix::from_rows(&[[1.5, -2.0]]));
    }

    #[test]
    fn missing_gradient_is_skipped() {
        let mut p = vec![Matrix::scalar(1.0), Matrix::scalar(2.0)];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &p);
        adam.step(&mut p, &[Some(Matrix::scalar(1.0)), None]).unwrap();
        assert_eq!(p[1].item(), 2.0);
        assert_eq!(adam.steps(), &[1, 0]);
    }

    #[test]
    fn quadratic_trace_shrinks_monotonically() {
        let mut p = vec![Matrix::scalar(1.0)];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &p);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = Matrix::scalar(2.0 * p[0].item());
            adam.step(&mut p, &[Some(g)]).unwrap();
            let x = p[0].item();
            assert!(x.abs() < prev.abs(), "{x} after {prev}");
            prev = x;
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first update exactly lr·sign(g) up to eps.
        let mut p = vec![Matrix::scalar(0.0)];
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8, &p);
        adam.step(&mut p, &[Some(Matrix::scalar(-3.0))]).unwrap();
        assert!((p[0].item() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Matrix::from_rows(&[[0.3, -0.1, 2.0]])];
            let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8, &p);
            for s in 0..10 {
                let g = p[0].map(|x| x * x - 0.1 * s as f64);
                adam.step(&mut p, &[Some(g)]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
