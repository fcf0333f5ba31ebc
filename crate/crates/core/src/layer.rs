//! The MoDE layer: `N` low-rank experts, `D` noisy top-k domain routers,
//! sparse aggregation and a skip connection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Session, Var};
use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Nonlinearity between the down and up projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Router `d` keeps its `K` largest noisy logits.
    #[default]
    TopK,
    /// One expert drawn uniformly per sample; routers are not consulted.
    Stochastic,
    /// A predetermined set of `K` experts per domain with equal weight.
    FixedMultitask,
}

/// Which logits the gate softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSpan {
    /// Softmax over the retained top-K logits only.
    #[default]
    Retained,
    /// Softmax over all `N` logits, then non-top-K entries zeroed.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeLayerConfig {
    pub dim: usize,
    pub rank: usize,
    pub experts: usize,
    pub domains: usize,
    pub top_k: usize,
    pub policy: RoutingPolicy,
    pub span: GateSpan,
    pub activation: Activation,
}

impl ModeLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.dim {
            bail!(Contract, "rank {} must lie in [1, dim={}]", self.rank, self.dim);
        }
        if self.top_k == 0 || self.top_k > self.experts {
            bail!(Contract, "K={} must lie in [1, N={}]", self.top_k, self.experts);
        }
        if self.domains == 0 {
            bail!(Contract, "need at least one domain router");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowRankExpert {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl LowRankExpert {
    pub fn params(&self) -> [ParamId; 4] {
        [self.w_down, self.b_down, self.w_up, self.b_up]
    }

    /// `(dim*r + r) + (r*dim + dim)`.
    pub fn param_count(dim: usize, rank: usize) -> usize {
        (dim * rank + rank) + (rank * dim + dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRouter {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
}

impl DomainRouter {
    pub fn params(&self) -> [ParamId; 2] {
        [self.w_gate, self.w_noise]
    }

    pub fn param_count(dim: usize, experts: usize) -> usize {
        2 * dim * experts
    }
}

/// Gate assigned to one sample by one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer: usize,
    pub domain: usize,
    pub gate: Vec<f64>,
}

impl GateRecord {
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.gate.iter().enumerate().filter(|(_, g)| **g > 0.0).map(|(i, _)| i)
    }
}

pub struct ModeOutput {
    /// `x + sum_i gate_i * A_i(x)`.
    pub output: Var,
    /// Differentiable `[B x N]` gates.
    pub gates: Var,
    pub records: Vec<GateRecord>,
    /// Experts evaluated in this forward, ascending.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLayer {
    pub index: usize,
    pub config: ModeLayerConfig,
    pub experts: Vec<LowRankExpert>,
    pub routers: Vec<DomainRouter>,
}

impl ModeLayer {
    /// Registers the layer's parameters. Expert up-projections start at zero
    /// so a freshly inserted layer is the identity map.
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        config: ModeLayerConfig,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        config.validate()?;
        let (dim, r, n) = (config.dim, config.rank, config.experts);
        let std_in = 1.0 / libm::sqrt(dim as f64);
        let experts = (0..n)
            .map(|i| {
                let p = format!("mode{index}.expert{i}");
                LowRankExpert {
                    w_down: store.add(format!("{p}.w_down"), Tensor::randn(&[dim, r], std_in, rng), true),
                    b_down: store.add(format!("{p}.b_down"), Tensor::zeros(&[r]), true),
                    w_up: store.add(format!("{p}.w_up"), Tensor::zeros(&[r, dim]), true),
                    b_up: store.add(format!("{p}.b_up"), Tensor::zeros(&[dim]), true),
                }
            })
            .collect();
        let routers = (0..config.domains)
            .map(|d| {
                let p = format!("mode{index}.router{d}");
                DomainRouter {
                    w_gate: store.add(format!("{p}.w_gate"), Tensor::randn(&[dim, n], std_in, rng), true),
                    w_noise: store.add(format!("{p}.w_noise"), Tensor::zeros(&[dim, n]), true),
                }
            })
            .collect();
        Ok(Self { index, config, experts, routers })
    }

    pub fn expert_params(&self, i: usize) -> [ParamId; 4] {
        self.experts[i].params()
    }

    pub fn router_params(&self, d: usize) -> [ParamId; 2] {
        self.routers[d].params()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| e.params()).collect();
        ids.extend(self.routers.iter().flat_map(|r| r.params()));
        ids
    }

    pub fn param_count(&self) -> usize {
        let c = &self.config;
        layer_param_count(c.dim, c.rank, c.experts, c.domains)
    }

    fn check_width(&self, s: &Session<'_>, x: Var) -> Result<()> {
        let shape = s.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.dim {
            bail!(Dimension, "MoDE layer {} expects [B, {}], got {:?}", self.index, self.config.dim, shape);
        }
        Ok(())
    }

    /// `act(x W_down + b_down) W_up + b_up`.
    pub fn expert_forward(&self, s: &mut Session<'_>, i: usize, x: Var) -> Result<Var> {
        self.check_width(s, x)?;
        let e = self.experts[i];
        let (wd, bd, wu, bu) = (s.param(e.w_down), s.param(e.b_down), s.param(e.w_up), s.param(e.b_up));
        let h = s.matmul(x, wd)?;
        let h = s.add(h, bd)?;
        let h = self.config.activation.apply(s, h);
        let o = s.matmul(h, wu)?;
        s.add(o, bu)
    }

    /// `x W_g + eps * softplus(x W_noise)` with `eps ~ N(0, 1)` drawn per
    /// (row, expert); exactly `x W_g` when `noise_on` is false.
    pub fn noisy_gate_logits(
        &self,
        s: &mut Session<'_>,
        d: usize,
        x: Var,
        rng: &mut CounterRng,
        noise_on: bool,
    ) -> Result<Var> {
        self.check_width(s, x)?;
        let router = self.routers.get(d).copied().ok_or_else(|| {
            crate::Error::Routing(format!("domain {} has no router (D={})", d, self.routers.len()))
        })?;
        let wg = s.param(router.w_gate);
        let clean = s.matmul(x, wg)?;
        if !noise_on {
            return Ok(clean);
        }
        let wn = s.param(router.w_noise);
        let raw = s.matmul(x, wn)?;
        let scale = s.softplus(raw);
        let shape = s.value(clean).shape().to_vec();
        let eps = Tensor::randn(&shape, 1.0, rng);
        let eps = s.constant(eps);
        let noise = s.mul(eps, scale)?;
        s.add(clean, noise)
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        d: usize,
        rng: &mut CounterRng,
        noise_on: bool,
    ) -> Result<ModeOutput> {
        self.check_width(s, x)?;
        let c = self.config;
        let b = s.value(x).shape()[0];
        let gates = match c.policy {
            RoutingPolicy::TopK => {
                let logits = self.noisy_gate_logits(s, d, x, rng, noise_on)?;
                topk_softmax(s, logits, c.top_k, c.span)?
            }
            RoutingPolicy::Stochastic => {
                let mut g = vec![0.0; b * c.experts];
                for row in 0..b {
                    g[row * c.experts + rng.below(c.experts)] = 1.0;
                }
                s.constant(Tensor::matrix(b, c.experts, g)?)
            }
            RoutingPolicy::FixedMultitask => {
                if d >= c.domains {
                    bail!(Routing, "domain {} out of range (D={})", d, c.domains);
                }
                let subset = fixed_assignment(d, c.top_k, c.experts);
                let mut g = vec![0.0; b * c.experts];
                for row in 0..b {
                    for &i in &subset {
                        g[row * c.experts + i] = 1.0 / c.top_k as f64;
                    }
                }
                s.constant(Tensor::matrix(b, c.experts, g)?)
            }
        };

        let gv = s.value(gates).clone();
        let selected: Vec<usize> =
            (0..c.experts).filter(|&i| (0..b).any(|r| gv.data()[r * c.experts + i] > 0.0)).collect();
        let domain = if c.policy == RoutingPolicy::Stochastic { 0 } else { d };
        let records = (0..b)
            .map(|r| {
                let row = gv.row(r);
                let total: f64 = row.iter().sum();
                GateRecord { layer: self.index, domain, gate: row.iter().map(|v| v / total).collect() }
            })
            .collect();

        let mut mixed: Option<Var> = None;
        for &i in &selected {
            let a = self.expert_forward(s, i, x)?;
            let col = s.column(gates, i)?;
            let term = s.mul(a, col)?;
            mixed = Some(match mixed {
                Some(m) => s.add(m, term)?,
                None => term,
            });
        }
        let output = match mixed {
            Some(h) => s.add(x, h)?,
            None => x,
        };
        Ok(ModeOutput { output, gates, records, selected })
    }
}

/// Experts `{(d*K + j) mod N : j < K}` for the fixed multi-task policy.
pub fn fixed_assignment(d: usize, k: usize, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..k).map(|j| (d * k + j) % n).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Row-wise mask keeping the `k` largest entries; ties go to the lower index.
pub fn topk_mask(logits: &[f64], cols: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > cols {
        bail!(Contract, "K={} must lie in [1, N={}]", k, cols);
    }
    let rows = logits.len() / cols;
    let mut mask = vec![false; logits.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // stable sort keeps lower indices first among equal logits
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal));
        for &j in &order[..k] {
            mask[r * cols + j] = true;
        }
    }
    Ok(mask)
}

/// `Softmax(TopK(logits))` per row.
pub fn topk_softmax(g: &mut Graph, logits: Var, k: usize, span: GateSpan) -> Result<Var> {
    let (_, n) = g.value(logits).dims2()?;
    let mask = topk_mask(g.value(logits).data(), n, k)?;
    match span {
        GateSpan::Retained => g.softmax(logits, Some(mask)),
        GateSpan::All => {
            let shape = g.value(logits).shape().to_vec();
            let full = g.softmax(logits, None)?;
            let keep = Tensor::new(shape, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
            let keep = g.constant(keep);
            g.mul(full, keep)
        }
    }
}

/// Parameters of one MoDE layer: `N` experts plus `D` routers.
pub fn layer_param_count(dim: usize, rank: usize, experts: usize, domains: usize) -> usize {
    experts * LowRankExpert::param_count(dim, rank) + domains * DomainRouter::param_count(dim, experts)
}

/// Parameters over a staged backbone. A stage with rank 0 has no MoDE layer.
pub fn param_count(
    dims: &[usize],
    ranks: &[usize],
    blocks: &[usize],
    experts: usize,
    domains: usize,
) -> Result<usize> {
    if dims.len() != ranks.len() || dims.len() != blocks.len() {
        bail!(Dimension, "stage lists differ in length: {} dims, {} ranks, {} blocks", dims.len(), ranks.len(), blocks.len());
    }
    Ok(dims
        .iter()
        .zip(ranks)
        .zip(blocks)
        .filter(|((_, &r), _)| r > 0)
        .map(|((&dim, &r), &nb)| nb * layer_param_count(dim, r, experts, domains))
        .sum())
}
