use std::collections::HashMap;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// A set of parameters sharing a learning rate and weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<ParamId>, learning_rate: f64, weight_decay: f64) -> Self {
        ParamGroup {
            name: name.into(),
            params,
            learning_rate,
            weight_decay,
        }
    }
}

/// Checks that groups are disjoint and learning rates are positive.
pub fn validate_groups(groups: &[ParamGroup], store: &ParamStore) -> Result<()> {
    let mut owner: HashMap<ParamId, &str> = HashMap::new();
    for g in groups {
        if !(g.learning_rate > 0.0) {
            return Err(Error::Config(format!("group `{}` has non-positive learning rate", g.name)));
        }
        for &p in &g.params {
            if let Some(prev) = owner.insert(p, &g.name) {
                return Err(Error::Config(format!(
                    "parameter `{}` belongs to groups `{prev}` and `{}`",
                    store.name(p),
                    g.name
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub state: HashMap<ParamId, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    /// One update over every group. Each parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            for &p in &g.params {
                if store.get(p).grad().is_none() {
                    return Err(Error::UninitializedGradient(store.name(p).to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for g in groups {
            let (lr, wd) = (g.learning_rate, g.weight_decay);
            for &p in &g.params {
                let tensor = store.get_mut(p);
                let n = tensor.len();
                let grad = tensor.grad().expect("checked above").to_vec();
                let st = self.state.entry(p).or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                let data = tensor.data_mut();
                for i in 0..n {
                    data[i] -= lr * wd * data[i];
                    st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * grad[i];
                    st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mhat = st.m[i] / bc1;
                    let vhat = st.v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all group gradients; rescales them to `max_norm`
/// when the norm exceeds it. Returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, groups: &[ParamGroup], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.params.iter())
        .filter_map(|&p| store.get(p).grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in groups {
            for &p in &g.params {
                if let Some(buf) = store.get_mut(p).grad_mut() {
                    buf.iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
    }
    total
}
