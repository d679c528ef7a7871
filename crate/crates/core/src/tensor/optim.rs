use super::array::{Array, Real};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW hyper-parameters plus per-parameter moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array<T>>,
    second: Vec<Array<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array<T>> = (0..params.len())
            .map(|i| Array::zeros(params.value(i).shape()))
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update. Decay applies to matrices only.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Array<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.shape() != params.value(id).shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: params.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let lr = T::lit(self.lr);
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for (id, g) in grads.iter().enumerate() {
            let decay = if params.value(id).shape().len() >= 2 {
                T::lit(self.weight_decay)
            } else {
                T::zero()
            };
            let m = self.first[id].data_mut();
            let v = self.second[id].data_mut();
            let p = params.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] = p[i] - lr * decay * p[i];
                p[i] = p[i] - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Real>(grads: &[Array<T>]) -> f64 {
    grads.iter().map(|g| g.norm_sq().f64()).sum::<f64>().sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// Elementwise `acc += g`.
pub fn accumulate<T: Real>(acc: &mut [Array<T>], grads: &[Array<T>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
            *x = *x + y;
        }
    }
}
