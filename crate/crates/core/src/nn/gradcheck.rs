//! Central finite-difference gradient checking.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamTree;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Number of randomly sampled coordinates.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor in the relative error, so that gradients that are
    /// zero up to round-off do not dominate.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            samples: 50,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<Sample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Sample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

impl GradCheck {
    fn rel_error(&self, a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(self.floor)
    }

    /// Checks the gradient of `build` with respect to each of `inputs`.
    pub fn inputs<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let loss = build(&mut g, &vars)?;
            g.scalar(loss)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();

        let total: usize = inputs.iter().map(Tensor::numel).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("nothing to check".into()));
        }
        let mut rng = seed::rng(self.seed);
        let mut report = GradCheckReport::default();
        for _ in 0..self.samples {
            let mut flat = rng.random_range(0..total);
            let mut which = 0;
            while flat >= inputs[which].numel() {
                flat -= inputs[which].numel();
                which += 1;
            }
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[flat] += self.step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[flat] -= self.step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * self.step);
            let analytic = grads[which].data()[flat];
            report.samples.push(Sample {
                location: format!("input{which}[{flat}]"),
                analytic,
                numeric,
                rel_error: self.rel_error(analytic, numeric),
            });
        }
        Ok(report)
    }

    /// Checks the gradient of `build` with respect to the trainable
    /// parameters it binds from `tree`.
    pub fn params<F>(&self, tree: &ParamTree, build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamTree) -> Result<Var>,
    {
        let mut g = Graph::new();
        let loss = build(&mut g, tree)?;
        g.backward(loss)?;
        let grads = g.param_grads();
        let names: Vec<&str> = grads.names().collect();
        let total: usize = grads.num_values();
        if total == 0 {
            return Err(Error::InvalidArgument(
                "no trainable parameters bound".into(),
            ));
        }
        let mut rng = seed::rng(self.seed);
        let mut report = GradCheckReport::default();
        for _ in 0..self.samples {
            let mut flat = rng.random_range(0..total);
            let mut idx = 0;
            while flat >= grads.get(names[idx]).expect("listed").numel() {
                flat -= grads.get(names[idx]).expect("listed").numel();
                idx += 1;
            }
            let name = names[idx];
            let perturbed = |delta: f64| -> Result<f64> {
                let mut t = tree.clone();
                t.get_mut(name).expect("bound from tree").data_mut()[flat] += delta;
                let mut g = Graph::new();
                let loss = build(&mut g, &t)?;
                g.scalar(loss)
            };
            let numeric = (perturbed(self.step)? - perturbed(-self.step)?) / (2.0 * self.step);
            let analytic = grads.get(name).expect("listed").data()[flat];
            report.samples.push(Sample {
                location: format!("{name}[{flat}]"),
                analytic,
                numeric,
                rel_error: self.rel_error(analytic, numeric),
            });
        }
        Ok(report)
    }
}
