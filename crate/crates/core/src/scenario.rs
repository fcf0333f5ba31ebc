//! Synthetic domain-shift data: a Gaussian-cluster source task, parametric
//! feature-space corruptions, source-domain augmentation, and continual
//! disjoint (CDS) / gradual (CGS) target streams.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

/// A parametric corruption applied to a feature vector, in this order:
/// pairwise rotation, moving-average blur, gain, offset, additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub blur: usize,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self { name: name.to_string(), rotation: 0.0, blur: 0, gain: 1.0, offset: 0.0, noise: 0.0, noise_seed: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.blur <= 1 && self.gain == 1.0 && self.offset == 0.0 && self.noise == 0.0
    }

    /// Deterministic in `(self, x, key)`; `key` identifies the sample so its
    /// noise draw is stable.
    pub fn apply(&self, x: &[f64], key: u64) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.rotation != 0.0 {
            let (s, c) = (libm::sin(self.rotation), libm::cos(self.rotation));
            for pair in v.chunks_exact_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = c * a - s * b;
                pair[1] = s * a + c * b;
            }
        }
        if self.blur > 1 {
            let half = self.blur / 2;
            let src = v.clone();
            for (i, out) in v.iter_mut().enumerate() {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(src.len());
                *out = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        let mut rng = CounterRng::new(self.noise_seed).split(key);
        for x in &mut v {
            *x = *x * self.gain + self.offset;
            if self.noise != 0.0 {
                *x += self.noise * rng.normal();
            }
        }
        v
    }
}

/// Proxy domains built from the source for initialization. Domain 0 is the
/// source itself.
pub fn default_sda_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec::identity("source"),
        DomainSpec { offset: 1.5, gain: 1.2, ..DomainSpec::identity("bright") },
        DomainSpec { offset: -1.5, gain: 0.6, ..DomainSpec::identity("dark") },
        DomainSpec { blur: 5, offset: 0.8, noise: 0.3, noise_seed: 11, ..DomainSpec::identity("blur") },
    ]
}

/// Unseen target domains for the continual streams.
pub fn default_target_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec { blur: 3, offset: 0.8, noise: 0.6, noise_seed: 101, ..DomainSpec::identity("fog") },
        DomainSpec { gain: 0.5, offset: -1.2, noise: 0.8, noise_seed: 102, ..DomainSpec::identity("night") },
        DomainSpec { rotation: 0.35, noise: 0.9, noise_seed: 103, ..DomainSpec::identity("rain") },
        DomainSpec { gain: 1.3, offset: 1.4, noise: 0.7, noise_seed: 104, ..DomainSpec::identity("snow") },
    ]
}

/// `classes` isotropic unit-variance Gaussian clusters whose means sit at
/// `separation` along distinct coordinate axes. Labels are round-robin.
pub fn make_source(seed: u64, n: usize, classes: usize, dim: usize, separation: f64) -> Result<Vec<Sample>> {
    if classes == 0 || n < classes {
        bail!(Data, "need n >= C >= 1, got n={} C={}", n, classes);
    }
    if classes > dim {
        bail!(Data, "need C <= dim, got C={} dim={}", classes, dim);
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let x = (0..dim)
                .map(|j| rng.normal() + if j == label { separation } else { 0.0 })
                .collect();
            Sample { x, label, domain: 0 }
        })
        .collect())
}

/// Transformed copies of `source`, one per spec, tagged with the spec index.
pub fn make_sda(source: &[Sample], specs: &[DomainSpec]) -> Result<Vec<Sample>> {
    match specs.first() {
        None => bail!(Contract, "SDA needs at least one domain"),
        Some(s) if !s.is_identity() => bail!(Contract, "SDA domain 0 must be the identity, got {}", s.name),
        _ => {}
    }
    let mut out = Vec::with_capacity(source.len() * specs.len());
    for (d, spec) in specs.iter().enumerate() {
        for (i, s) in source.iter().enumerate() {
            out.push(Sample { x: spec.apply(&s.x, i as u64), label: s.label, domain: d });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sda,
    Cds,
    Cgs,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub t: u64,
    pub domain: usize,
    pub label: Option<usize>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStream {
    pub phase: Phase,
    pub records: Vec<StreamRecord>,
}

impl ScenarioStream {
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].t <= w[0].t {
                bail!(Data, "timesteps not strictly increasing at t={}", w[1].t);
            }
        }
        let labeled = self.records.iter().filter(|r| r.label.is_some()).count();
        match self.phase {
            Phase::Eval | Phase::Sda if labeled != self.records.len() => {
                bail!(Data, "{:?} stream must be fully labeled", self.phase)
            }
            Phase::Cds | Phase::Cgs if labeled != 0 => {
                bail!(Data, "adaptation stream must not carry labels")
            }
            _ => Ok(()),
        }
    }
}

/// Records `[start, end)` of one round that form task `domain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskWindow {
    pub start: usize,
    pub end: usize,
    pub domain: usize,
}

/// One round of an adaptation stream plus its labeled per-domain
/// evaluation split and task partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phase: Phase,
    pub round: Vec<StreamRecord>,
    pub rounds: usize,
    pub tasks: Vec<TaskWindow>,
    pub eval: Vec<Vec<Sample>>,
    /// CGS only: raw Gaussian timestamp draws per domain, before clamping.
    pub draws: Option<Vec<Vec<f64>>>,
}

impl Scenario {
    pub fn domains(&self) -> usize {
        self.eval.len()
    }

    /// The full stream, the round tiled `rounds` times with continuing
    /// timesteps.
    pub fn stream(&self) -> ScenarioStream {
        let per = self.round.len() as u64;
        let records = (0..self.rounds as u64)
            .flat_map(|k| {
                self.round.iter().map(move |r| StreamRecord { t: k * per + r.t, ..r.clone() })
            })
            .collect();
        ScenarioStream { phase: self.phase, records }
    }

    /// The labeled evaluation split as a stream.
    pub fn eval_stream(&self) -> ScenarioStream {
        let records = self
            .eval
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, s)| StreamRecord { t: i as u64 + 1, domain: s.domain, label: Some(s.label), x: s.x.clone() })
            .collect();
        ScenarioStream { phase: Phase::Eval, records }
    }
}

fn check_pool(pool: &[Sample], domains: usize, per_domain: usize) -> Result<()> {
    if domains == 0 || per_domain == 0 {
        bail!(Data, "scenario needs at least one domain and one sample per domain");
    }
    if pool.len() < domains * per_domain {
        bail!(Data, "pool of {} samples cannot fill {} x {}", pool.len(), domains, per_domain);
    }
    Ok(())
}

/// Domains as contiguous blocks of `per_domain` samples, in order, repeated
/// `rounds` times. Domain `j` draws its samples from
/// `pool[j * per_domain..(j + 1) * per_domain]`.
pub fn make_cds(pool: &[Sample], domains: &[DomainSpec], per_domain: usize, rounds: usize) -> Result<Scenario> {
    check_pool(pool, domains.len(), per_domain)?;
    if rounds == 0 {
        bail!(Contract, "need at least one round");
    }
    let mut round = Vec::with_capacity(domains.len() * per_domain);
    let mut eval = vec![Vec::with_capacity(per_domain); domains.len()];
    let mut tasks = Vec::with_capacity(domains.len());
    for (d, spec) in domains.iter().enumerate() {
        tasks.push(TaskWindow { start: round.len(), end: round.len() + per_domain, domain: d });
        for j in 0..per_domain {
            let idx = d * per_domain + j;
            let x = spec.apply(&pool[idx].x, idx as u64);
            eval[d].push(Sample { x: x.clone(), label: pool[idx].label, domain: d });
            round.push(StreamRecord { t: round.len() as u64 + 1, domain: d, label: None, x });
        }
    }
    Ok(Scenario { phase: Phase::Cds, round, rounds, tasks, eval, draws: None })
}

/// Gradual shifts: domain `i` (1-based) draws `T/D` timestamps from
/// `N(i * T/D, std)`, clamped to `[1, T]`; all draws are merged by a stable
/// sort and reindexed to `1..=T`. Tasks are `D` windows of `T/D` steps.
pub fn make_cgs(
    pool: &[Sample],
    domains: &[DomainSpec],
    total: usize,
    std: f64,
    rounds: usize,
    seed: u64,
) -> Result<Scenario> {
    let dn = domains.len();
    if dn == 0 || total % dn != 0 {
        bail!(Data, "T={} must be divisible by D={}", total, dn);
    }
    if !(std >= 0.0) {
        bail!(Data, "std must be nonnegative, got {}", std);
    }
    if rounds == 0 {
        bail!(Contract, "need at least one round");
    }
    let per = total / dn;
    check_pool(pool, dn, per)?;
    let mut rng = CounterRng::new(seed);
    let mut draws = vec![Vec::with_capacity(per); dn];
    let mut merged: Vec<(f64, usize)> = Vec::with_capacity(total);
    for (i, row) in draws.iter_mut().enumerate() {
        let mean = (per * (i + 1)) as f64;
        for _ in 0..per {
            let raw = mean + std * rng.normal();
            row.push(raw);
            merged.push((raw.clamp(1.0, total as f64), i));
        }
    }
    // stable: equal positions keep domain-major draw order
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal));

    let mut next = vec![0usize; dn];
    let mut round = Vec::with_capacity(total);
    let mut eval = vec![Vec::with_capacity(per); dn];
    for (pos, &(_, d)) in merged.iter().enumerate() {
        let idx = d * per + next[d];
        next[d] += 1;
        let x = domains[d].apply(&pool[idx].x, idx as u64);
        eval[d].push(Sample { x: x.clone(), label: pool[idx].label, domain: d });
        round.push(StreamRecord { t: pos as u64 + 1, domain: d, label: None, x });
    }
    let tasks = (0..dn).map(|d| TaskWindow { start: d * per, end: (d + 1) * per, domain: d }).collect();
    Ok(Scenario { phase: Phase::Cgs, round, rounds, tasks, eval, draws: Some(draws) })
}
