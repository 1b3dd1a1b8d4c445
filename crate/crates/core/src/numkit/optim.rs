use crate::error::{ensure, Result};
use crate::numkit::graph::{Gradients, ParamStore};
use crate::numkit::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            Dimension,
            "optimizer holds {} moments, got {} params and {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for id in params.ids() {
            ensure!(
                params.get(id).shape() == grads.get(id).shape()
                    && self.m[id.0].shape() == params.get(id).shape(),
                Dimension,
                "shape mismatch for parameter {}",
                params.name(id)
            );
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.get(id).ensure_finite(params.name(id))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: Vec<f32>) -> ParamStore {
        let mut p = ParamStore::new();
        let n = values.len();
        p.insert("w", Tensor::new([n], values).unwrap()).unwrap();
        p
    }

    fn grads_of(values: Vec<f32>) -> Gradients {
        let n = values.len();
        Gradients::new(vec![Tensor::new([n], values).unwrap()])
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = single(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut opt = AdamW::new(&p, 1e-2, 0.0);
        let g = Gradients::zeros_like(&p);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn constant_gradient_steps_like_sign() {
        let mut p = single(vec![0.0, 0.0]);
        let mut opt = AdamW::new(&p, 1e-3, 0.0);
        let g = grads_of(vec![0.7, -3.0]);
        let mut prev = p.clone();
        for _ in 0..200 {
            prev = p.clone();
            opt.step(&mut p, &g).unwrap();
        }
        let id = crate::numkit::ParamId(0);
        for (i, sign) in [(0usize, 1.0f32), (1, -1.0)] {
            let delta = p.get(id).data()[i] - prev.get(id).data()[i];
            assert!((delta + 1e-3 * sign).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn one_step_matches_hand_recurrence() {
        let init = [0.5f64, -2.0];
        let grad = [0.25f64, -4.0];
        let (lr, wd, b1, b2, eps) = (5e-4f64, 0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut p = single(init.iter().map(|&v| v as f32).collect());
        let mut opt = AdamW::new(&p, lr as f32, wd as f32);
        let g = grads_of(grad.iter().map(|&v| v as f32).collect());
        opt.step(&mut p, &g).unwrap();
        for i in 0..2 {
            let m = (1.0 - b1) * grad[i];
            let v = (1.0 - b2) * grad[i] * grad[i];
            let mhat = m / (1.0 - b1);
            let vhat = v / (1.0 - b2);
            let mut x = init[i];
            x -= lr * wd * x;
            x -= lr * mhat / (vhat.sqrt() + eps);
            let got = f64::from(p.get(crate::numkit::ParamId(0)).data()[i]);
            assert!((got - x).abs() < 1e-7, "{got} vs {x}");
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = single(vec![1.0, 2.0]);
        let mut opt = AdamW::new(&p, 1e-3, 0.0);
        let other = single(vec![1.0, 2.0, 3.0]);
        let g = Gradients::zeros_like(&other);
        assert!(matches!(
            opt.step(&mut p, &g),
            Err(crate::error::Error::Dimension(_))
        ));
    }
}
