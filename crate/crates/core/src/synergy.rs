//! Domain-expert synergy: running `P(A_i | d)` estimates and the mutual
//! information between the routed domain and the chosen expert.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::layer::GateRecord;
use crate::math::plogp;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynergyVariant {
    /// `sum P(A,d) ln(P(A,d) / (P(A) P(d)))`.
    #[default]
    MutualInformation,
    /// `sum P(A,d) ln P(A,d)`.
    NegEntropy,
}

/// Per-layer `D x N` tables of exponentially averaged gate mass. Rows that
/// never received a record stay at the uniform prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAssignmentStats {
    pub domains: usize,
    pub experts: usize,
    pub ema_beta: f64,
    tables: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl DomainAssignmentStats {
    pub fn new(layers: usize, domains: usize, experts: usize, ema_beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_beta) {
            bail!(Contract, "ema_beta {} outside [0, 1)", ema_beta);
        }
        if domains == 0 || experts == 0 {
            bail!(Contract, "empty stats table");
        }
        let uniform = 1.0 / experts as f64;
        Ok(Self {
            domains,
            experts,
            ema_beta,
            tables: vec![vec![uniform; domains * experts]; layers],
            counts: vec![vec![0; domains]; layers],
        })
    }

    pub fn layers(&self) -> usize {
        self.tables.len()
    }

    /// `row_d <- beta * row_d + (1 - beta) * gate`.
    pub fn update(&mut self, rec: &GateRecord) -> Result<()> {
        let (d, n) = (self.domains, self.experts);
        if rec.layer >= self.tables.len() || rec.domain >= d || rec.gate.len() != n {
            bail!(Contract, "record (layer {}, domain {}, {} gates) does not fit {}x{}x{}", rec.layer, rec.domain, rec.gate.len(), self.tables.len(), d, n);
        }
        if rec.gate.iter().any(|g| !(*g >= 0.0)) {
            bail!(Contract, "negative gate in record");
        }
        let s: f64 = rec.gate.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            bail!(Contract, "gate sums to {}", s);
        }
        let beta = self.ema_beta;
        let row = &mut self.tables[rec.layer][rec.domain * n..(rec.domain + 1) * n];
        for (r, g) in row.iter_mut().zip(&rec.gate) {
            *r = beta * *r + (1.0 - beta) * g;
        }
        self.counts[rec.layer][rec.domain] += 1;
        Ok(())
    }

    pub fn row(&self, layer: usize, domain: usize) -> &[f64] {
        let n = self.experts;
        &self.tables[layer][domain * n..(domain + 1) * n]
    }

    pub fn counts(&self, layer: usize) -> &[u64] {
        &self.counts[layer]
    }

    /// `P(A_i | d)` as a `[D, N]` tensor.
    pub fn table(&self, layer: usize) -> Tensor {
        Tensor::matrix(self.domains, self.experts, self.tables[layer].clone()).expect("table shape")
    }

    /// `P(A_i, d) = P(A_i | d) / D` under a uniform domain prior.
    pub fn joint(&self, layer: usize) -> Tensor {
        let inv = 1.0 / self.domains as f64;
        let data = self.tables[layer].iter().map(|p| p * inv).collect();
        Tensor::matrix(self.domains, self.experts, data).expect("table shape")
    }
}

fn check_joint(joint: &Tensor) -> Result<(usize, usize)> {
    let (d, n) = joint.dims2()?;
    if joint.data().iter().any(|p| !(*p >= 0.0)) {
        bail!(Contract, "joint has a negative or NaN entry");
    }
    let s: f64 = joint.data().iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        bail!(Contract, "joint sums to {}", s);
    }
    Ok((d, n))
}

/// Mutual information in nats between rows (domains) and columns (experts).
pub fn synergy_mi(joint: &Tensor) -> Result<f64> {
    let (d, n) = check_joint(joint)?;
    let p = joint.data();
    let row: Vec<f64> = (0..d).map(|i| p[i * n..(i + 1) * n].iter().sum()).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..d).map(|i| p[i * n + j]).sum()).collect();
    let h_joint: f64 = p.iter().map(|&x| plogp(x)).sum();
    let h_row: f64 = row.iter().map(|&x| plogp(x)).sum();
    let h_col: f64 = col.iter().map(|&x| plogp(x)).sum();
    Ok(h_joint - h_row - h_col)
}

/// `sum p ln p` over the joint (the negative joint entropy).
pub fn synergy_negentropy(joint: &Tensor) -> Result<f64> {
    check_joint(joint)?;
    Ok(joint.data().iter().map(|&x| plogp(x)).sum())
}

/// Differentiable counterpart of [`synergy_mi`].
pub fn mi_graph(g: &mut Graph, joint: Var) -> Result<Var> {
    let pl = g.plogp(joint);
    let h_joint = g.sum(pl);
    let col = g.sum_axis(joint, 0)?;
    let col = g.plogp(col);
    let h_col = g.sum(col);
    let row = g.sum_axis(joint, 1)?;
    let row = g.plogp(row);
    let h_row = g.sum(row);
    let t = g.sub(h_joint, h_col)?;
    g.sub(t, h_row)
}

pub fn negentropy_graph(g: &mut Graph, joint: Var) -> Var {
    let pl = g.plogp(joint);
    g.sum(pl)
}

/// Gates from the current step for samples routed to `domain` in `layer`.
#[derive(Debug, Clone, Copy)]
pub struct CurrentGates {
    pub layer: usize,
    pub domain: usize,
    /// `[B, N]` differentiable gate rows.
    pub gates: Var,
}

/// Synergy averaged over the layers present in `current`.
///
/// Each layer's joint takes its rows from the running stats, except that
/// the rows of domains seen in this step are replaced by the batch mean of
/// their current gates. Gradients reach only those current gates.
pub fn synergy_loss_term(
    g: &mut Graph,
    current: &[CurrentGates],
    stats: &DomainAssignmentStats,
    variant: SynergyVariant,
) -> Result<Var> {
    if current.is_empty() {
        bail!(Contract, "synergy term needs at least one gate record");
    }
    let (dn, n) = (stats.domains, stats.experts);
    let mut by_layer: BTreeMap<usize, BTreeMap<usize, Vec<Var>>> = BTreeMap::new();
    for c in current {
        if c.layer >= stats.layers() || c.domain >= dn {
            bail!(Contract, "gates for layer {} / domain {} outside stats", c.layer, c.domain);
        }
        by_layer.entry(c.layer).or_default().entry(c.domain).or_default().push(c.gates);
    }

    let mut terms = Vec::with_capacity(by_layer.len());
    for (layer, domains) in &by_layer {
        let mut rows = Vec::with_capacity(dn);
        for d in 0..dn {
            let row = match domains.get(&d) {
                Some(parts) => {
                    let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts)? };
                    let b = g.value(all).dims2()?.0;
                    let s = g.sum_axis(all, 0)?;
                    g.scale(s, 1.0 / b as f64)
                }
                None => g.constant(Tensor::vector(stats.row(*layer, d).to_vec())),
            };
            rows.push(row);
        }
        let table = g.concat_rows(&rows)?;
        if g.value(table).shape() != [dn, n] {
            bail!(Dimension, "assembled table {:?}, expected [{}, {}]", g.value(table).shape(), dn, n);
        }
        let joint = g.scale(table, 1.0 / dn as f64);
        terms.push(match variant {
            SynergyVariant::MutualInformation => mi_graph(g, joint)?,
            SynergyVariant::NegEntropy => negentropy_graph(g, joint),
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}
