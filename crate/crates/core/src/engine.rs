//! The adaptation pipeline: a frozen source model with MoDE layers after
//! each block, a three-way initialization phase, and source-free continual
//! test-time adaptation that only ever updates MoDE parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Session, Var};
use crate::discriminator::{cross_entropy, Discriminator};
use crate::error::{bail, Error, Result};
use crate::layer::{layer_param_count, Activation, GateRecord, GateSpan, ModeLayer, ModeLayerConfig, RoutingPolicy};
use crate::metrics::{expert_frequency, RoundMetrics, SelectionTally};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scenario::{Sample, Scenario};
use crate::synergy::{mi_graph, negentropy_graph, synergy_loss_term, CurrentGates, DomainAssignmentStats, SynergyVariant};
use crate::tensor::Tensor;
use crate::math;

const STREAM_WEIGHTS: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TTA: u64 = 4;
const STREAM_EVAL: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// MoDE layers keep their identity-at-insertion initialization.
    Random,
    /// MoDE layers fit to the labeled source domain.
    SourceOnly,
    /// MoDE layers and the discriminator fit to augmented proxy domains.
    #[default]
    Sda,
}

/// What the test-time phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Entropy-filtered updates of MoDE parameters only.
    #[default]
    Mode,
    /// No updates at all.
    Frozen,
    /// Unfiltered entropy minimization of every backbone parameter, with
    /// MoDE layers bypassed.
    FullEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width of each stage.
    pub dims: Vec<usize>,
    /// Blocks per stage.
    pub blocks: Vec<usize>,
    /// Expert rank per stage; 0 means no MoDE layers in that stage.
    pub ranks: Vec<usize>,
    pub classes: usize,
    pub experts: usize,
    pub domains: usize,
    pub top_k: usize,
    pub policy: RoutingPolicy,
    pub span: GateSpan,
    pub activation: Activation,
    pub dd_hidden: usize,
    pub ema_beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            dims: vec![32],
            blocks: vec![3],
            ranks: vec![4],
            classes: 4,
            experts: 6,
            domains: 4,
            top_k: 3,
            policy: RoutingPolicy::TopK,
            span: GateSpan::Retained,
            activation: Activation::Gelu,
            dd_hidden: Discriminator::default_hidden(4),
            ema_beta: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            bail!(Contract, "input_dim must be positive and classes at least two");
        }
        if self.dims.is_empty() || self.dims.len() != self.blocks.len() || self.dims.len() != self.ranks.len() {
            bail!(
                Contract,
                "dims, blocks and ranks must have one entry per stage, got {}, {}, {}",
                self.dims.len(),
                self.blocks.len(),
                self.ranks.len()
            );
        }
        if self.dims.contains(&0) || self.blocks.contains(&0) {
            bail!(Contract, "stage widths and block counts must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            bail!(Contract, "ema_beta must lie in [0, 1)");
        }
        for (&dim, &r) in self.dims.iter().zip(&self.ranks).filter(|(_, &r)| r > 0) {
            self.layer_config(dim, r).validate()?;
        }
        Ok(())
    }

    fn layer_config(&self, dim: usize, rank: usize) -> ModeLayerConfig {
        ModeLayerConfig {
            dim,
            rank,
            experts: self.experts,
            domains: self.domains,
            top_k: self.top_k,
            policy: self.policy,
            span: self.span,
            activation: self.activation,
        }
    }

    /// `(fan_in, width, rank)` of every block, stages flattened in order.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut fan_in = self.input_dim;
        let mut out = Vec::new();
        for ((&dim, &n), &r) in self.dims.iter().zip(&self.blocks).zip(&self.ranks) {
            for _ in 0..n {
                out.push((fan_in, dim, r));
                fan_in = dim;
            }
        }
        out
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Scalar count of all MoDE parameters.
    pub fn mode_param_count(&self) -> usize {
        self.block_shapes()
            .iter()
            .filter(|b| b.2 > 0)
            .map(|&(_, dim, r)| layer_param_count(dim, r, self.experts, self.domains))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self { lr: 0.005, epochs: 20, batch: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub init_mode: InitMode,
    pub method: Method,
    pub lambda_d: f64,
    pub lambda_m: f64,
    /// Threshold on entropy normalized by `ln C`; `1.0` disables filtering.
    pub kappa: f64,
    pub lr_init: f64,
    pub lr_tta: f64,
    /// Learning rate of the full-update entropy baseline.
    pub lr_baseline: f64,
    pub epochs_init: usize,
    pub weight_decay_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_init: usize,
    pub batch_tta: usize,
    pub noise_init: bool,
    pub noise_tta: bool,
    pub stochastic_restore_p: f64,
    pub synergy_variant: SynergyVariant,
    pub freeze_routers_tta: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::Sda,
            method: Method::Mode,
            lambda_d: 0.1,
            lambda_m: 0.0005,
            kappa: 0.4,
            lr_init: 6e-5,
            lr_tta: 6e-5 / 100.0,
            lr_baseline: 1e-3,
            epochs_init: 10,
            weight_decay_init: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            batch_init: 1,
            batch_tta: 1,
            noise_init: true,
            noise_tta: true,
            stochastic_restore_p: 0.0,
            synergy_variant: SynergyVariant::MutualInformation,
            freeze_routers_tta: false,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            bail!(Contract, "kappa {} outside (0, 1]", self.kappa);
        }
        // lr_tta = 0 is allowed: it freezes adaptation while keeping the protocol
        if !(self.lr_init > 0.0) || !(self.lr_tta >= 0.0) || !(self.lr_baseline >= 0.0) {
            bail!(Contract, "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.stochastic_restore_p) {
            bail!(Contract, "stochastic_restore_p must lie in [0, 1)");
        }
        if self.batch_init == 0 || self.batch_tta == 0 {
            bail!(Contract, "batch sizes must be positive");
        }
        Ok(())
    }

    fn adamw(&self, lr: f64) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, ..AdamConfig::adamw(lr, self.weight_decay_init) }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, ..AdamConfig::adam(lr) }
    }
}

/// Shared, revocable access to a labeled dataset. Initialization revokes
/// the handle on exit, so nothing downstream can read source data.
#[derive(Debug, Clone)]
pub struct DataHandle {
    samples: Arc<Vec<Sample>>,
    revoked: Arc<AtomicBool>,
}

impl DataHandle {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples: Arc::new(samples), revoked: Arc::new(AtomicBool::new(false)) }
    }

    pub fn samples(&self) -> Result<&[Sample]> {
        if self.is_revoked() {
            bail!(Contract, "data handle revoked: source data is unavailable after initialization");
        }
        Ok(&self.samples)
    }

    pub fn revoke(&self) {
        self.revoked.store(true, Ordering::SeqCst);
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked.load(Ordering::SeqCst)
    }
}

pub enum InitData {
    None,
    Source(DataHandle),
    Sda(DataHandle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut CounterRng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true),
        }
    }

    fn apply(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.matmul(x, w)?;
        s.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fresh,
    SourceTrained,
    Initialized,
}

/// One forward pass through the stack for rows sharing a routing domain.
pub struct Forward {
    pub logits: Var,
    pub gates: Vec<CurrentGates>,
    pub records: Vec<GateRecord>,
    /// `(layer, expert)` pairs evaluated.
    pub selected: Vec<(usize, usize)>,
}

/// A forward over rows with mixed routing domains. Rows are grouped by
/// domain; `order[i]` is the input row that produced output row `i`.
pub struct RoutedForward {
    pub logits: Var,
    pub order: Vec<usize>,
    pub gates: Vec<CurrentGates>,
    pub records: Vec<GateRecord>,
    pub selected: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAssembly {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Vec<Linear>,
    pub mode_layers: Vec<Option<ModeLayer>>,
    pub head: Linear,
    pub dd: Discriminator,
    pub stats: DomainAssignmentStats,
    pub tally: SelectionTally,
    pub stage: Stage,
    pub init_mode: Option<InitMode>,
}

impl ModelAssembly {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed).split(STREAM_WEIGHTS);
        let mut store = ParamStore::new();
        let shapes = config.block_shapes();
        let backbone = shapes
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, width, _))| {
                let std = math::sqrt(2.0 / fan_in as f64);
                Linear::new(&mut store, &format!("block{i}"), fan_in, width, std, &mut rng)
            })
            .collect();
        let last = shapes.last().map_or(config.input_dim, |b| b.1);
        let head_std = 1.0 / math::sqrt(last as f64);
        let head = Linear::new(&mut store, "head", last, config.classes, head_std, &mut rng);
        let mode_layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(_, width, r))| {
                (r > 0).then(|| ModeLayer::new(&mut store, i, config.layer_config(width, r), &mut rng)).transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let dd = Discriminator::new(&mut store, config.input_dim, config.dd_hidden, config.domains, &mut rng);
        let layers = config.total_blocks();
        let stats = DomainAssignmentStats::new(layers, config.domains, config.experts, config.ema_beta)?;
        let tally = SelectionTally::new(layers, config.domains, config.experts);
        Ok(Self { config, store, backbone, mode_layers, head, dd, stats, tally, stage: Stage::Fresh, init_mode: None })
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.iter().flat_map(|l| l.params()).collect()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.params().to_vec()
    }

    pub fn mode_params(&self) -> Vec<ParamId> {
        self.mode_layers.iter().flatten().flat_map(|l| l.params()).collect()
    }

    pub fn router_params(&self) -> Vec<ParamId> {
        self.mode_layers.iter().flatten().flat_map(|l| l.routers.iter().flat_map(|r| r.params())).collect()
    }

    /// Parameters that must never change during adaptation.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut ids = self.backbone_params();
        ids.extend(self.head_params());
        ids.extend(self.dd.params());
        ids
    }

    /// SHA-256 over backbone, head and discriminator parameters.
    pub fn frozen_digest(&self) -> [u8; 32] {
        self.store.digest(&self.frozen_params())
    }

    pub fn mode_param_count(&self) -> usize {
        self.store.count(&self.mode_params())
    }

    /// Makes exactly `ids` trainable.
    pub fn set_trainable_only(&mut self, ids: &[ParamId]) {
        let all: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in all {
            self.store.set_trainable(id, false);
        }
        for &id in ids {
            self.store.set_trainable(id, true);
        }
    }

    /// Runs rows routed to `domain` through the backbone, with each block
    /// followed by its MoDE layer when `use_mode` is set.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        domain: usize,
        rng: &mut CounterRng,
        noise_on: bool,
        use_mode: bool,
    ) -> Result<Forward> {
        let mut h = x;
        let mut gates = Vec::new();
        let mut records = Vec::new();
        let mut selected = Vec::new();
        for (block, layer) in self.backbone.iter().zip(&self.mode_layers) {
            let z = block.apply(s, h)?;
            h = s.gelu(z);
            if let (true, Some(layer)) = (use_mode, layer) {
                let out = layer.forward(s, h, domain, rng, noise_on)?;
                h = out.output;
                let routed = if layer.config.policy == RoutingPolicy::Stochastic { 0 } else { domain };
                gates.push(CurrentGates { layer: layer.index, domain: routed, gates: out.gates });
                selected.extend(out.selected.iter().map(|&e| (layer.index, e)));
                records.extend(out.records);
            }
        }
        let logits = self.head.apply(s, h)?;
        Ok(Forward { logits, gates, records, selected })
    }

    pub fn forward_routed(
        &self,
        s: &mut Session<'_>,
        x: &Tensor,
        domains: &[usize],
        rng: &mut CounterRng,
        noise_on: bool,
        use_mode: bool,
    ) -> Result<RoutedForward> {
        let (rows, _) = x.dims2()?;
        if domains.len() != rows {
            bail!(Dimension, "{} routing domains for {} rows", domains.len(), rows);
        }
        if use_mode {
            if let Some(&d) = domains.iter().find(|&&d| d >= self.config.domains) {
                bail!(Routing, "domain {} out of range (D={})", d, self.config.domains);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            groups.entry(d).or_default().push(i);
        }
        let xv = s.constant(x.clone());
        let mut parts = Vec::with_capacity(groups.len());
        let mut out = RoutedForward { logits: xv, order: Vec::with_capacity(rows), gates: Vec::new(), records: Vec::new(), selected: Vec::new() };
        for (&d, idx) in &groups {
            let xs = if groups.len() == 1 { xv } else { s.gather_rows(xv, idx)? };
            let f = self.forward(s, xs, d, rng, noise_on, use_mode)?;
            parts.push(f.logits);
            out.order.extend_from_slice(idx);
            out.gates.extend(f.gates);
            out.records.extend(f.records);
            out.selected.extend(f.selected);
        }
        out.logits = if parts.len() == 1 { parts[0] } else { s.concat_rows(&parts)? };
        out.selected.sort_unstable();
        out.selected.dedup();
        Ok(out)
    }

    /// Supervised training of backbone and head on clean source data; both
    /// are frozen afterwards. Returns the mean loss of each epoch.
    pub fn train_source(&mut self, data: &[Sample], cfg: &SourceTrainConfig, seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            bail!(Data, "empty source dataset");
        }
        let mut ids = self.backbone_params();
        ids.extend(self.head_params());
        self.set_trainable_only(&ids);
        let mut rng = CounterRng::new(seed).split(STREAM_SOURCE);
        let mut opt = Adam::new(AdamConfig::adam(cfg.lr));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let x = rows_tensor(chunk.iter().map(|&i| data[i].x.as_slice()))?;
                let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
                let mut s = Session::new(&self.store);
                let xv = s.constant(x);
                let f = self.forward(&mut s, xv, 0, &mut rng, false, false)?;
                let loss = cross_entropy(&mut s, f.logits, &labels)?;
                let lv = finite(s.value(loss).data()[0], "source loss")?;
                total += lv * chunk.len() as f64;
                s.backward(loss)?;
                let grads = s.grads();
                drop(s);
                opt.step(&mut self.store, &grads);
            }
            losses.push(total / data.len() as f64);
        }
        self.set_trainable_only(&[]);
        self.stage = Stage::SourceTrained;
        Ok(losses)
    }

    /// Accuracy of the source model alone (MoDE bypassed) on labeled data.
    pub fn source_accuracy(&self, data: &[Sample]) -> Result<f64> {
        let x = rows_tensor(data.iter().map(|s| s.x.as_slice()))?;
        let mut s = Session::inference(&self.store);
        let xv = s.constant(x);
        let f = self.forward(&mut s, xv, 0, &mut CounterRng::new(0), false, false)?;
        let pred = s.argmax_rows(f.logits)?;
        let correct = pred.iter().zip(data).filter(|(p, d)| **p == d.label).count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Synergy of the routing tables built from per-domain mean gates on
    /// labeled multi-domain data, noise off, averaged over MoDE layers.
    pub fn measure_synergy(&self, data: &[Sample], variant: SynergyVariant) -> Result<f64> {
        let (dn, n) = (self.config.domains, self.config.experts);
        let layers: Vec<&ModeLayer> = self.mode_layers.iter().flatten().collect();
        if layers.is_empty() {
            return Ok(0.0);
        }
        let mut sums = vec![vec![0.0; dn * n]; self.config.total_blocks()];
        let mut counts = vec![0usize; dn];
        let mut rng = CounterRng::new(0);
        for d in 0..dn {
            let rows: Vec<&[f64]> = data.iter().filter(|s| s.domain == d).map(|s| s.x.as_slice()).collect();
            if rows.is_empty() {
                continue;
            }
            counts[d] = rows.len();
            let mut s = Session::inference(&self.store);
            let xv = s.constant(rows_tensor(rows.into_iter())?);
            let f = self.forward(&mut s, xv, d, &mut rng, false, true)?;
            for r in &f.records {
                for (acc, g) in sums[r.layer][d * n..(d + 1) * n].iter_mut().zip(&r.gate) {
                    *acc += g;
                }
            }
        }
        let mut total = 0.0;
        for layer in &layers {
            let mut table = Vec::with_capacity(dn * n);
            for d in 0..dn {
                if counts[d] == 0 {
                    table.extend(core::iter::repeat_n(1.0 / n as f64, n));
                } else {
                    table.extend(sums[layer.index][d * n..(d + 1) * n].iter().map(|v| v / counts[d] as f64));
                }
            }
            let mut g = Graph::new();
            let joint = g.constant(Tensor::matrix(dn, n, table)?);
            let joint = g.scale(joint, 1.0 / dn as f64);
            let t = match variant {
                SynergyVariant::MutualInformation => mi_graph(&mut g, joint)?,
                SynergyVariant::NegEntropy => negentropy_graph(&mut g, joint),
            };
            total += g.value(t).data()[0];
        }
        Ok(total / layers.len() as f64)
    }

    /// The initialization phase. Freezes the discriminator and revokes the
    /// data handle on exit.
    pub fn init_phase(&mut self, cfg: &AdaptationConfig, data: InitData) -> Result<InitReport> {
        cfg.validate()?;
        if self.stage == Stage::Fresh {
            bail!(Contract, "source model must be trained before initialization");
        }
        let mut report = InitReport::default();
        let handle = match (cfg.init_mode, &data) {
            (InitMode::Random, _) => None,
            (InitMode::SourceOnly, InitData::Source(h)) | (InitMode::Sda, InitData::Sda(h)) => Some(h.clone()),
            (mode, _) => bail!(Data, "init mode {:?} needs its matching data stream", mode),
        };
        if let Some(h) = &handle {
            let samples = h.samples()?;
            if samples.is_empty() {
                bail!(Data, "empty initialization stream");
            }
            let sda = cfg.init_mode == InitMode::Sda;
            if sda {
                if let Some(s) = samples.iter().find(|s| s.domain >= self.config.domains) {
                    bail!(Data, "SDA sample tagged domain {} but D={}", s.domain, self.config.domains);
                }
                report.synergy.push(self.measure_synergy(samples, cfg.synergy_variant)?);
            }
            let mut ids = self.mode_params();
            if sda {
                self.dd.unfreeze(&mut self.store);
                ids.extend(self.dd.params());
            }
            self.set_trainable_only(&ids);
            let mut opt = Adam::new(cfg.adamw(cfg.lr_init));
            let mut rng = CounterRng::new(cfg.seed).split(STREAM_INIT);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            for _ in 0..cfg.epochs_init {
                rng.shuffle(&mut order);
                let mut total = 0.0;
                for chunk in order.chunks(cfg.batch_init) {
                    let lv = self.init_step(cfg, samples, chunk, sda, &mut rng, &mut opt)?;
                    total += lv * chunk.len() as f64;
                }
                report.epoch_losses.push(total / samples.len() as f64);
                if sda {
                    report.synergy.push(self.measure_synergy(samples, cfg.synergy_variant)?);
                }
            }
            h.revoke();
        }
        self.set_trainable_only(&[]);
        self.dd.freeze(&mut self.store);
        self.stage = Stage::Initialized;
        self.init_mode = Some(cfg.init_mode);
        drop(data);
        Ok(report)
    }

    fn init_step(
        &mut self,
        cfg: &AdaptationConfig,
        samples: &[Sample],
        chunk: &[usize],
        sda: bool,
        rng: &mut CounterRng,
        opt: &mut Adam,
    ) -> Result<f64> {
        let x = rows_tensor(chunk.iter().map(|&i| samples[i].x.as_slice()))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
        let domains: Vec<usize> = if sda {
            chunk.iter().map(|&i| samples[i].domain).collect()
        } else {
            vec![rng.below(self.config.domains); chunk.len()]
        };
        let mut s = Session::new(&self.store);
        let f = self.forward_routed(&mut s, &x, &domains, rng, cfg.noise_init, true)?;
        let ordered: Vec<usize> = f.order.iter().map(|&i| labels[i]).collect();
        let mut loss = cross_entropy(&mut s, f.logits, &ordered)?;
        if sda {
            let xv = s.constant(x.clone());
            let dl = self.dd.forward(&mut s, xv, )?;
            let dd_loss = cross_entropy(&mut s, dl, &domains)?;
            let dd_loss = s.scale(dd_loss, cfg.lambda_d);
            loss = s.add(loss, dd_loss)?;
            if cfg.lambda_m != 0.0 && !f.gates.is_empty() {
                let theta = synergy_loss_term(&mut s, &f.gates, &self.stats, cfg.synergy_variant)?;
                let theta = s.scale(theta, -cfg.lambda_m);
                loss = s.add(loss, theta)?;
            }
        }
        let lv = finite(s.value(loss).data()[0], "initialization loss")?;
        s.backward(loss)?;
        let grads = s.grads();
        drop(s);
        opt.step(&mut self.store, &grads);
        for r in &f.records {
            self.stats.update(r)?;
        }
        Ok(lv)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitReport {
    pub epoch_losses: Vec<f64>,
    /// Measured synergy before training and after each epoch (SDA only).
    pub synergy: Vec<f64>,
}

pub struct TtaLoss {
    pub loss: Var,
    /// Rows that passed the entropy filter.
    pub active: usize,
}

/// Mean over rows of `1{H(p)/ln C < kappa} * H(p)`. Filtered rows add
/// neither value nor gradient. `kappa >= 1` keeps every row.
pub fn tta_loss(g: &mut Graph, probs: Var, kappa: f64) -> Result<TtaLoss> {
    if !(kappa > 0.0) {
        bail!(Contract, "kappa must be positive");
    }
    let (rows, classes) = g.value(probs).dims2()?;
    let h = g.entropy_rows(probs)?;
    let norm = if classes > 1 { math::ln(classes as f64) } else { 1.0 };
    let mask: Vec<f64> = g
        .value(h)
        .data()
        .iter()
        .map(|&e| if kappa >= 1.0 || e / norm < kappa { 1.0 } else { 0.0 })
        .collect();
    let active = mask.iter().filter(|&&m| m > 0.0).count();
    let mask = g.constant(Tensor::vector(mask));
    let kept = g.mul(h, mask)?;
    let sum = g.sum(kept);
    Ok(TtaLoss { loss: g.scale(sum, 1.0 / rows as f64), active })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub active: usize,
    /// Routing domain per input row.
    pub domains: Vec<usize>,
    /// `(layer, expert)` pairs evaluated in the forward.
    pub selected: Vec<(usize, usize)>,
    /// Parameters that received a nonzero gradient.
    pub touched: Vec<ParamId>,
    pub updated: bool,
}

/// The test-time phase: owns the initialized model and its optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaEngine {
    pub model: ModelAssembly,
    pub cfg: AdaptationConfig,
    opt: Adam,
    pub rng: CounterRng,
    restore_to: Vec<(ParamId, Tensor)>,
}

impl TtaEngine {
    pub fn new(mut model: ModelAssembly, cfg: AdaptationConfig) -> Result<Self> {
        cfg.validate()?;
        if model.stage != Stage::Initialized {
            bail!(Contract, "model not initialized");
        }
        let (trainable, lr) = match cfg.method {
            Method::Mode => {
                let routers = model.router_params();
                let ids: Vec<ParamId> = model
                    .mode_params()
                    .into_iter()
                    .filter(|id| !(cfg.freeze_routers_tta && routers.contains(id)))
                    .collect();
                (ids, cfg.lr_tta)
            }
            Method::Frozen => (Vec::new(), 0.0),
            Method::FullEntropy => (model.backbone_params(), cfg.lr_baseline),
        };
        model.set_trainable_only(&trainable);
        let restore_to = if cfg.stochastic_restore_p > 0.0 {
            trainable.iter().map(|&id| (id, model.store.get(id).clone())).collect()
        } else {
            Vec::new()
        };
        let rng = CounterRng::new(cfg.seed).split(STREAM_TTA);
        let opt = Adam::new(cfg.adam(lr));
        Ok(Self { model, cfg, opt, rng, restore_to })
    }

    fn uses_mode(&self) -> bool {
        self.cfg.method != Method::FullEntropy
    }

    fn route(&self, x: &Tensor, rng: &mut CounterRng) -> Result<Vec<usize>> {
        let rows = x.dims2()?.0;
        if self.model.init_mode == Some(InitMode::Sda) {
            self.model.dd.predict(&self.model.store, x)
        } else {
            Ok(vec![rng.below(self.model.config.domains); rows])
        }
    }

    /// One unlabeled adaptation step.
    pub fn step(&mut self, batch: &[&[f64]]) -> Result<StepReport> {
        let x = rows_tensor(batch.iter().copied())?;
        if !x.is_finite() {
            bail!(Numeric, "non-finite value in adaptation batch");
        }
        let mut rng = self.rng;
        let domains = self.route(&x, &mut rng)?;
        let noise = self.cfg.noise_tta && self.cfg.method == Method::Mode;
        let use_mode = self.uses_mode();
        let kappa = if self.cfg.method == Method::FullEntropy { 1.0 } else { self.cfg.kappa };

        let mut s = Session::new(&self.model.store);
        let f = self.model.forward_routed(&mut s, &x, &domains, &mut rng, noise, use_mode)?;
        if !s.value(f.logits).is_finite() {
            bail!(Numeric, "non-finite logits");
        }
        let probs = s.softmax(f.logits, None)?;
        let tl = tta_loss(&mut s, probs, kappa)?;
        let loss = finite(s.value(tl.loss).data()[0], "adaptation loss")?;
        let update = tl.active > 0 && self.cfg.method != Method::Frozen;
        let mut grads = Vec::new();
        if update {
            s.backward(tl.loss)?;
            grads = s.grads();
        }
        drop(s);
        for (_, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                bail!(Numeric, "non-finite gradient");
            }
        }
        let touched = grads.iter().filter(|(_, g)| g.iter().any(|&v| v != 0.0)).map(|(id, _)| *id).collect();
        if update {
            self.opt.step(&mut self.model.store, &grads);
        }
        if use_mode {
            for r in &f.records {
                self.model.stats.update(r)?;
                self.model.tally.record(r)?;
            }
        }
        if update && self.cfg.stochastic_restore_p > 0.0 {
            let p = self.cfg.stochastic_restore_p;
            for (id, init) in &self.restore_to {
                let cur = self.model.store.get_mut(*id).data_mut();
                for (c, v) in cur.iter_mut().zip(init.data()) {
                    if rng.uniform() < p {
                        *c = *v;
                    }
                }
            }
        }
        self.rng = rng;
        Ok(StepReport { loss, active: tl.active, domains, selected: f.selected, touched, updated: update })
    }

    /// Per-domain accuracy with noise off and no updates. Routing draws come
    /// from a fixed stream, so a frozen model always scores the same.
    pub fn evaluate(&self, split: &[Vec<Sample>]) -> Result<Vec<f64>> {
        if split.is_empty() {
            bail!(Contract, "empty domain partition");
        }
        let mut rng = CounterRng::new(self.cfg.seed).split(STREAM_EVAL);
        split.iter().map(|samples| self.accuracy(samples, &mut rng)).collect()
    }

    fn accuracy(&self, samples: &[Sample], rng: &mut CounterRng) -> Result<f64> {
        if samples.is_empty() {
            bail!(Contract, "empty domain partition");
        }
        let x = rows_tensor(samples.iter().map(|s| s.x.as_slice()))?;
        let domains = if self.model.init_mode == Some(InitMode::Sda) {
            self.model.dd.predict(&self.model.store, &x)?
        } else {
            (0..samples.len()).map(|_| rng.below(self.model.config.domains)).collect()
        };
        let mut s = Session::inference(&self.model.store);
        let f = self.model.forward_routed(&mut s, &x, &domains, rng, false, self.uses_mode())?;
        let pred = s.argmax_rows(f.logits)?;
        let correct = pred.iter().zip(&f.order).filter(|(p, &i)| **p == samples[i].label).count();
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Scalars updated by this engine's method.
    pub fn trainable_count(&self) -> usize {
        let ids: Vec<ParamId> = self.model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        self.model.store.count(&ids)
    }
}

/// Streams every round through [`TtaEngine::step`], evaluating each domain
/// after its first task window of round one and every domain after each
/// round.
pub fn run_ctta(engine: &mut TtaEngine, scenario: &Scenario, rounds: usize) -> Result<RoundMetrics> {
    if rounds == 0 {
        bail!(Contract, "need at least one round");
    }
    let dn = scenario.domains();
    let mut a = Vec::with_capacity(rounds);
    let mut a_tilde = vec![f64::NAN; dn];
    let mut eval_rng = CounterRng::new(engine.cfg.seed).split(STREAM_EVAL);
    let batch = engine.cfg.batch_tta;
    for k in 0..rounds {
        for task in &scenario.tasks {
            for chunk in scenario.round[task.start..task.end].chunks(batch) {
                let xs: Vec<&[f64]> = chunk.iter().map(|r| r.x.as_slice()).collect();
                engine.step(&xs)?;
            }
            if k == 0 {
                eval_rng = CounterRng::new(engine.cfg.seed).split(STREAM_EVAL);
                a_tilde[task.domain] = engine.accuracy(&scenario.eval[task.domain], &mut eval_rng)?;
            }
        }
        a.push(engine.evaluate(&scenario.eval)?);
    }
    if let Some(j) = a_tilde.iter().position(|v| v.is_nan()) {
        bail!(Data, "domain {} has no task window", j);
    }
    let _ = eval_rng;
    let param_count = match engine.cfg.method {
        Method::Mode => engine.model.mode_param_count(),
        _ => engine.trainable_count(),
    };
    let expert_freq = expert_frequency(core::slice::from_ref(&engine.model.tally))?;
    Ok(RoundMetrics { a, a_tilde, param_count, expert_freq })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{} is {}", what, v)))
    }
}

fn rows_tensor<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = None;
    for r in rows {
        match width {
            None => width = Some(r.len()),
            Some(w) if w != r.len() => bail!(Dimension, "ragged batch rows"),
            _ => {}
        }
        data.extend_from_slice(r);
        n += 1;
    }
    if n == 0 {
        bail!(Data, "empty batch");
    }
    Tensor::matrix(n, width.unwrap_or(0), data)
}
