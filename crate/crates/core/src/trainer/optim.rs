use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamStore, Tensor};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Adam with decoupled weight decay. A parameter without a gradient is
/// treated as having gradient zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f32, weight_decay: f32) -> Result<()> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "optimizer step",
                left: vec![params.len()],
                right: vec![grads.grads.len(), self.m.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, p) in params.tensors_mut().enumerate() {
            let g = grads.grads[i].as_deref();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if g.is_some_and(|g| g.len() != m.len()) || p.len() != m.len() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: vec![p.len()],
                    right: vec![m.len()],
                });
            }
            let decay = 1.0 - lr * weight_decay;
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                *w *= decay;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Moment tensors named after the parameters, for checkpoints.
    pub fn named_moments(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("adam.m/{name}"),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v/{name}"),
                Tensor::new(shape, self.v[i].clone()).expect("moment shape"),
            ));
        }
        out
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f32) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > f64::from(max_norm) {
        grads.scale((f64::from(max_norm) / norm) as f32);
    }
    norm
}
