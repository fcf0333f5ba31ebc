//! Domain discriminator: a two-layer MLP that assigns a pseudo-domain label
//! to each input. Trained during initialization, frozen for adaptation.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Session, Var};
use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub input_dim: usize,
    pub hidden: usize,
    pub domains: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    frozen: bool,
}

impl Discriminator {
    /// Default hidden width `2 * D * 4`.
    pub fn default_hidden(domains: usize) -> usize {
        2 * domains * 4
    }

    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        domains: usize,
        rng: &mut CounterRng,
    ) -> Self {
        let s1 = 1.0 / libm::sqrt(input_dim as f64);
        let s2 = 1.0 / libm::sqrt(hidden as f64);
        Self {
            input_dim,
            hidden,
            domains,
            w1: store.add("dd.w1", Tensor::randn(&[input_dim, hidden], s1, rng), true),
            b1: store.add("dd.b1", Tensor::zeros(&[hidden]), true),
            w2: store.add("dd.w2", Tensor::randn(&[hidden, domains], s2, rng), true),
            b2: store.add("dd.b2", Tensor::zeros(&[domains]), true),
            frozen: false,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the discriminator frozen and stops its parameters training.
    pub fn freeze(&mut self, store: &mut ParamStore) {
        for id in self.params() {
            store.set_trainable(id, false);
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self, store: &mut ParamStore) {
        for id in self.params() {
            store.set_trainable(id, true);
        }
        self.frozen = false;
    }

    /// `gelu(x W1 + b1) W2 + b2`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            bail!(Dimension, "discriminator expects [B, {}], got {:?}", self.input_dim, shape);
        }
        let (w1, b1, w2, b2) = (s.param(self.w1), s.param(self.b1), s.param(self.w2), s.param(self.b2));
        let h = s.matmul(x, w1)?;
        let h = s.add(h, b1)?;
        let h = s.gelu(h);
        let o = s.matmul(h, w2)?;
        s.add(o, b2)
    }

    /// Pseudo-domain per row; requires a frozen discriminator.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
        if !self.frozen {
            bail!(Contract, "discriminator must be frozen before predicting pseudo-domains");
        }
        let mut s = Session::inference(store);
        let xv = s.constant(x.clone());
        let logits = self.forward(&mut s, xv)?;
        s.argmax_rows(logits)
    }
}

/// Mean cross-entropy `-(1/B) sum ln softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = g.value(logits).dims2()?;
    if labels.len() != b {
        bail!(Dimension, "{} labels for {} rows", labels.len(), b);
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(crate::Error::Domain(format!("label {} outside [0, {})", l, c)));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}
