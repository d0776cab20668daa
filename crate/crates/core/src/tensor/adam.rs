use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Adam with bias correction and inverse-time learning-rate decay
/// (`lr / (1 + decay · t)`, `t` = updates already applied).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub const DEFAULT_LR: f64 = 2e-4;
    pub const DEFAULT_DECAY: f64 = 1e-8;

    /// Fresh optimizer state for parameters of the given element counts.
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64, decay: f64) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn for_params(params: &[Tensor<T>], lr: f64, decay: f64) -> Self {
        Self::new(params.iter().map(Tensor::numel), lr, decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from persisted moments.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let congruent = |m: &[Vec<T>]| {
            m.len() == self.first.len()
                && m.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
        };
        if !congruent(&first) || !congruent(&second) {
            return Err(shape_err!(
                "adam: restored moments do not match parameter sizes"
            ));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr / (1.0 + self.decay * self.step as f64)
    }

    /// One update. Any non-finite gradient rejects the whole step and leaves
    /// parameters, moments and the step counter untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(shape_err!(
                    "adam: parameter {i} shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "adam: non-finite gradient in parameter {i}"
                )));
            }
        }

        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
