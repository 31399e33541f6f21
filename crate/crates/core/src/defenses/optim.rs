use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Param]) -> Result<Self> {
        let ok = cfg.learning_rate > 0.0
            && (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0;
        if !ok {
            return Err(Error::param(format!("invalid optimizer settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        })
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::param("one gradient per parameter expected"));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.shape() != p.value.shape() {
                return Err(Error::param(format!(
                    "gradient shape mismatch for {}",
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.value.to_vec();
            for (j, (&gj, w)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
            p.value = Tensor::new(p.value.shape(), data)?;
        }
        Ok(())
    }
}
