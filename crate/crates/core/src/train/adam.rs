//! Adam with per-parameter state keyed by parameter name.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a Param>, grads: &GradStore) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for p in params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            // Gradients keep their autograd history; moments must not.
            let g = &g.detach();
            let st = match self.state.get_mut(&p.name) {
                Some(s) => s,
                None => {
                    let z = p.var.zeros_like()?;
                    self.state.entry(p.name.clone()).or_insert(Moments {
                        m: z.clone(),
                        v: z,
                        t: 0,
                    })
                }
            };
            st.t += 1;
            st.m = ((&st.m * beta1)? + (g * (1.0 - beta1))?)?;
            st.v = ((&st.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let denom = ((&st.v / bc2)?.sqrt()? + eps)?;
            let update = ((&st.m / bc1)? / denom)?;
            p.var.set(&(p.var.as_detached_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    /// Step counts per parameter.
    pub fn steps(&self) -> BTreeMap<String, u64> {
        self.state.iter().map(|(k, s)| (k.clone(), s.t)).collect()
    }

    /// Moment tensors keyed `adam/m/<param>` and `adam/v/<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.state
            .iter()
            .flat_map(|(k, s)| [(format!("adam/m/{k}"), s.m.clone()), (format!("adam/v/{k}"), s.v.clone())])
            .collect()
    }

    /// Restore from [`Adam::state_tensors`] (prefix stripped) and [`Adam::steps`].
    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<()> {
        self.state.clear();
        for (name, &t) in steps {
            let get = |kind: &str| {
                tensors
                    .get(&format!("{kind}/{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer state {kind}/{name}")))
            };
            self.state.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, t });
        }
        Ok(())
    }
}
