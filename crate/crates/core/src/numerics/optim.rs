use rand::seq::SliceRandom;
use rand::Rng;

use super::{Gradients, ParamId, Tensor};
use crate::error::{contract, Result};

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(contract(format!(
                "invalid optimizer settings lr={lr}, momentum={momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Updates `params[i]` with the gradient registered as `ParamId(i)`;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> Result<()> {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (i, (p, vel)) in params.iter_mut().zip(&mut self.velocity).enumerate() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            g.check_finite("gradient")?;
            for ((w, v), &gi) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + gi;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// A shuffled partition of `0..n` into batches of at most `batch_size`.
pub fn minibatches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::from_slice(&[3.0, -2.0])];
        let mut opt = Sgd::new(0.1, 0.5).unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(ParamId(0), &params[0]);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            let g = tape.grad(loss).unwrap();
            opt.step(&mut params, &g).unwrap();
        }
        assert!(params[0].data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut all: Vec<usize> = minibatches(10, 3, &mut rng).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Sgd::new(0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }
}
