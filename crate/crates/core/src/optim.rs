//! Adam and the single training step.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::model::HattFlowModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        let c = &config;
        if !(c.lr >= 0.0) || !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || !(c.eps > 0.0) {
            return Err(Error::contract(format!("invalid Adam settings {c:?}")));
        }
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update given gradients in store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("Adam::update", &[grads.len()], &[store.len()]));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            let mut data = p.data().to_vec();
            for (k, (&g, x)) in grads[i].data().iter().zip(data.iter_mut()).enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            let next = Tensor::new(p.shape().to_vec(), data)?;
            store.set(id, next)?;
        }
        Ok(())
    }
}

/// Loss and gradients (store order) for one batch.
pub fn loss_and_grads(model: &HattFlowModel, batch: &[(GraphBatch, GraphBatch)]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let loss = model.loss_var(&mut tape, &p, batch)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// One Adam step on the contrastive loss; returns the loss before the step.
pub fn train_step(model: &mut HattFlowModel, batch: &[(GraphBatch, GraphBatch)], opt: &mut Adam) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch)?;
    if !loss.is_finite() {
        let worst = grads
            .iter()
            .zip(model.store.iter())
            .map(|(g, (name, _))| (name, g.data().iter().fold(0.0f64, |a, x| a.max(x.abs()))))
            .fold(("", 0.0), |a, b| if b.1.is_nan() || b.1 > a.1 { b } else { a });
        return Err(Error::Training(format!(
            "non-finite loss {loss} at step {} (batch size {}, tau {:.4e}, largest gradient {:.3e} in {})",
            opt.steps() + 1,
            batch.len(),
            model.tau(),
            worst.1,
            worst.0
        )));
    }
    opt.update(&mut model.store, &grads)?;
    Ok(loss)
}
