use crate::error::{Error, Result};
use crate::nn::ParamTree;

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamTree,
    v: ParamTree,
}

impl Adam {
    pub fn new(params: &ParamTree) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Every parameter must have
    /// a gradient of the same shape.
    pub fn update(&mut self, params: &mut ParamTree, grads: &ParamTree, lr: f64) -> Result<()> {
        self.m.check_compatible(params)?;
        grads
            .check_compatible(params)
            .map_err(|e| Error::Shape(format!("gradients do not match parameters: {e}")))?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.m.get_mut(name).expect("checked above").data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("checked above").data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("checked above").data();
            let v = self.v.get(name).expect("checked above").data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as one tree with `m.` / `v.` prefixes, for checkpoints.
    pub fn moments(&self) -> ParamTree {
        let mut out = ParamTree::new();
        out.merge_prefixed("m.", &self.m);
        out.merge_prefixed("v.", &self.v);
        out
    }

    /// Rebuilds the optimizer from [`Adam::moments`] output.
    pub fn from_moments(params: &ParamTree, moments: &ParamTree, step: u64) -> Result<Self> {
        let m = moments.strip_prefix("m.");
        let v = moments.strip_prefix("v.");
        m.check_compatible(params)?;
        v.check_compatible(params)?;
        Ok(Adam {
            step,
            m,
            v,
            ..Adam::new(&ParamTree::new())
        })
    }
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamTree, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
