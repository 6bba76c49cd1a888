//! Adam with bias correction.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one variable.
#[derive(Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    names: Vec<String>,
    moments: Vec<Moments>,
}

impl Adam {
    /// Zero moments for every variable in `vars`.
    pub fn new(config: AdamConfig, vars: &[(String, &Var)]) -> Result<Adam> {
        let mut names = Vec::with_capacity(vars.len());
        let mut moments = Vec::with_capacity(vars.len());
        for (name, var) in vars {
            names.push(name.clone());
            moments.push(Moments {
                m: var.zeros_like()?,
                v: var.zeros_like()?,
            });
        }
        Ok(Adam {
            config,
            t: 0,
            names,
            moments,
        })
    }

    /// Rebuilds an optimizer from stored moments, checking names and shapes.
    pub fn from_parts(config: AdamConfig, t: u64, vars: &[(String, &Var)], moments: Vec<(String, Moments)>) -> Result<Adam> {
        if moments.len() != vars.len() {
            return Err(NnError::Config(format!(
                "optimizer state has {} variables, expected {}",
                moments.len(),
                vars.len()
            )));
        }
        for ((name, var), (mname, mom)) in vars.iter().zip(&moments) {
            if name != mname || mom.m.dims() != var.dims() || mom.v.dims() != var.dims() {
                return Err(NnError::Config(format!("optimizer state for {mname} does not match variable {name}")));
            }
        }
        let (names, moments) = moments.into_iter().unzip();
        Ok(Adam {
            config,
            t,
            names,
            moments,
        })
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.names.iter().map(String::as_str).zip(&self.moments)
    }

    /// One update of every variable that received a gradient. With `lr = 0`
    /// the moments advance but no variable changes.
    pub fn step(&mut self, vars: &[(String, &Var)], grads: &GradStore, lr: f64) -> Result<()> {
        if vars.len() != self.names.len() || vars.iter().zip(&self.names).any(|((a, _), b)| a != b) {
            return Err(NnError::Config("optimizer variables changed between steps".into()));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((_, var), mom) in vars.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            mom.m = ((&mom.m * beta1)? + (&g * (1.0 - beta1))?)?;
            mom.v = ((&mom.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            if lr == 0.0 {
                continue;
            }
            let m_hat = (&mom.m / c1)?;
            let denom = ((&mom.v / c2)?.sqrt()? + eps)?;
            let update = (m_hat.div(&denom)? * lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f32, -2.0], &device()).unwrap();
        let vars = vec![("x".to_string(), &x)];
        let mut adam = Adam::new(AdamConfig::default(), &vars).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            adam.step(&vars, &g, 0.05).unwrap();
        }
        let v: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert!(v.iter().all(|p| p.abs() < 1e-2), "{v:?}");
        assert_eq!(adam.t, 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = Var::new(&[1.0f32], &device()).unwrap();
        let vars = vec![("x".to_string(), &x)];
        let mut adam = Adam::new(AdamConfig::default(), &vars).unwrap();
        let g = (x.as_tensor() * 4.0).unwrap().sum_all().unwrap().backward().unwrap();
        adam.step(&vars, &g, 0.1).unwrap();
        let v: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn zero_lr_keeps_variables() {
        let x = Var::new(&[1.5f32, 2.5], &device()).unwrap();
        let vars = vec![("x".to_string(), &x)];
        let mut adam = Adam::new(AdamConfig::default(), &vars).unwrap();
        let g = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        adam.step(&vars, &g, 0.0).unwrap();
        let v: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert_eq!(v, vec![1.5, 2.5]);
    }
}
