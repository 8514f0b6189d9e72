use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Learning rate plus per-parameter moment accumulators, lazily shaped on first use.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    learning_rate: f64,
    kind: OptimizerKind,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: Vec<u64>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if let OptimizerKind::Sgd { momentum } = kind {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!(
                    "momentum must be in [0,1), got {momentum}"
                )));
            }
        }
        Ok(Self {
            learning_rate,
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimizerKind::default())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Store moments under `{prefix}m1/<name>` and `{prefix}m2/<name>`, step
    /// counts in the metadata.
    pub fn write_into(
        &self,
        params: &ParamSet<T>,
        ck: &mut super::Checkpoint,
        prefix: &str,
    ) -> Result<()> {
        let mut steps = Vec::new();
        for id in params.ids() {
            let i = id.index();
            let name = &params.entry(id).name;
            if let Some(Some(m)) = self.first.get(i) {
                ck.insert(format!("{prefix}m1/{name}"), m.cast());
            }
            if let Some(Some(m)) = self.second.get(i) {
                ck.insert(format!("{prefix}m2/{name}"), m.cast());
            }
            steps.push(self.steps.get(i).copied().unwrap_or(0));
        }
        ck.set_meta(format!("{prefix}steps"), serde_json::to_string(&steps)?);
        Ok(())
    }

    pub fn read_from(
        &mut self,
        params: &ParamSet<T>,
        ck: &super::Checkpoint,
        prefix: &str,
    ) -> Result<()> {
        let n = params.len();
        let steps: Vec<u64> = serde_json::from_str(ck.require_meta(&format!("{prefix}steps"))?)?;
        if steps.len() != n {
            return Err(Error::Format(format!(
                "optimizer state covers {} parameters, expected {n}",
                steps.len()
            )));
        }
        self.steps = steps;
        self.first = vec![None; n];
        self.second = vec![None; n];
        for id in params.ids() {
            let name = &params.entry(id).name;
            self.first[id.index()] = ck
                .tensors
                .get(&format!("{prefix}m1/{name}"))
                .map(|t| t.cast());
            self.second[id.index()] = ck
                .tensors
                .get(&format!("{prefix}m2/{name}"))
                .map(|t| t.cast());
        }
        Ok(())
    }

    /// Update every parameter, then zero all gradients.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        self.step_where(params, |_| true)
    }

    /// Update only the parameters selected by `include`; the gradients of all
    /// parameters are zeroed afterwards. Unselected parameters keep their values
    /// and optimizer moments bit-for-bit.
    pub fn step_where(
        &mut self,
        params: &mut ParamSet<T>,
        include: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let n = params.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.steps.resize(n, 0);

        let selected: Vec<ParamId> = params
            .ids()
            .filter(|&id| include(&params.entry(id).name))
            .collect();
        for &id in &selected {
            let p = params.entry(id);
            if let Some(bad) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Training {
                    name: p.name.clone(),
                    reason: format!("non-finite gradient at element {bad}"),
                });
            }
        }

        let lr = T::of(self.learning_rate);
        for id in selected {
            let i = id.index();
            let p = params.entry_mut(id);
            match self.kind {
                OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                    for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::of(momentum);
                    let vel = self.first[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    for ((v, &g), m) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(vel.data_mut())
                    {
                        *m = mu * *m + g;
                        *v -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    self.steps[i] += 1;
                    let t = self.steps[i] as i32;
                    let c1 = T::of(1.0 - beta1.powi(t));
                    let c2 = T::of(1.0 - beta2.powi(t));
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let m1 = self.first[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    let m2 = self.second[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    for (((v, &g), m), s) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m1.data_mut())
                        .zip(m2.data_mut())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *s = b2 * *s + (T::one() - b2) * g * g;
                        let mhat = *m / c1;
                        let shat = *s / c2;
                        *v -= lr * mhat / (shat.sqrt() + e);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// One optimizer step over all parameters.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, opt: &mut OptimizerState<T>) -> Result<()> {
    opt.step(params)
}
