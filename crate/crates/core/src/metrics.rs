//! Continual-learning metrics over a rounds x domains accuracy matrix.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::layer::GateRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// `a[k][j]`: accuracy on domain `j` after round `k`.
    pub a: Vec<Vec<f64>>,
    /// Accuracy on domain `j` right after first adapting through it.
    pub a_tilde: Vec<f64>,
    pub param_count: usize,
    /// `[layer][domain][expert]` selection rates.
    pub expert_freq: Vec<Vec<Vec<f64>>>,
}

impl RoundMetrics {
    pub fn rounds(&self) -> usize {
        self.a.len()
    }

    pub fn domains(&self) -> usize {
        self.a_tilde.len()
    }

    pub fn avg_acc(&self, k: usize) -> Result<f64> {
        avg_acc(&self.a, k)
    }

    pub fn bwt(&self, k: usize) -> Result<f64> {
        bwt(&self.a, &self.a_tilde, k)
    }

    pub fn delta(&self) -> Result<f64> {
        delta(&self.a)
    }
}

/// Mean of row `k`.
pub fn avg_acc(a: &[Vec<f64>], k: usize) -> Result<f64> {
    let Some(row) = a.get(k) else { bail!(Contract, "round {} not recorded ({} rounds)", k, a.len()) };
    if row.is_empty() {
        bail!(Contract, "round {} has no domains", k);
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `(1/D) sum_j (a[k][j] - a_tilde[j])`.
pub fn bwt(a: &[Vec<f64>], a_tilde: &[f64], k: usize) -> Result<f64> {
    let Some(row) = a.get(k) else { bail!(Contract, "round {} not recorded ({} rounds)", k, a.len()) };
    if row.len() != a_tilde.len() || row.is_empty() {
        bail!(Dimension, "round has {} domains, reference has {}", row.len(), a_tilde.len());
    }
    Ok(row.iter().zip(a_tilde).map(|(x, y)| x - y).sum::<f64>() / row.len() as f64)
}

/// Mean accuracy of the last round minus that of the first.
pub fn delta(a: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 {
        bail!(Contract, "delta needs at least two rounds, got {}", a.len());
    }
    Ok(avg_acc(a, a.len() - 1)? - avg_acc(a, 0)?)
}

/// Counts of how often each expert lands in a sample's gate support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTally {
    pub domains: usize,
    pub experts: usize,
    counts: Vec<Vec<u64>>,
}

impl SelectionTally {
    pub fn new(layers: usize, domains: usize, experts: usize) -> Self {
        Self { domains, experts, counts: vec![vec![0; domains * experts]; layers] }
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, rec: &GateRecord) -> Result<()> {
        if rec.layer >= self.counts.len() || rec.domain >= self.domains || rec.gate.len() != self.experts {
            bail!(Contract, "record does not fit the tally");
        }
        let base = rec.domain * self.experts;
        for i in rec.support() {
            self.counts[rec.layer][base + i] += 1;
        }
        Ok(())
    }

    pub fn counts(&self, layer: usize) -> &[u64] {
        &self.counts[layer]
    }
}

/// Per layer, per domain, the share of selections each expert received.
/// Rows sum to one; a domain never routed reports the uniform row.
pub fn expert_frequency(snapshots: &[SelectionTally]) -> Result<Vec<Vec<Vec<f64>>>> {
    let Some(first) = snapshots.first() else { bail!(Contract, "no tally snapshots") };
    let (layers, dn, n) = (first.layers(), first.domains, first.experts);
    if snapshots.iter().any(|s| (s.layers(), s.domains, s.experts) != (layers, dn, n)) {
        bail!(Dimension, "tally snapshots disagree in shape");
    }
    Ok((0..layers)
        .map(|l| {
            (0..dn)
                .map(|d| {
                    let mut row = vec![0.0; n];
                    for s in snapshots {
                        for (r, c) in row.iter_mut().zip(&s.counts[l][d * n..(d + 1) * n]) {
                            *r += *c as f64;
                        }
                    }
                    let total: f64 = row.iter().sum();
                    if total == 0.0 {
                        vec![1.0 / n as f64; n]
                    } else {
                        row.into_iter().map(|c| c / total).collect()
                    }
                })
                .collect()
        })
        .collect())
}
