//! Central finite differences against reverse-mode gradients.

use mode_core::autodiff::{Session, Var};
use mode_core::discriminator::cross_entropy;
use mode_core::engine::tta_loss;
use mode_core::gradcheck::max_relative_error;
use mode_core::layer::{topk_softmax, Activation, GateRecord, GateSpan, ModeLayer, ModeLayerConfig, RoutingPolicy};
use mode_core::synergy::{synergy_loss_term, CurrentGates, DomainAssignmentStats, SynergyVariant};
use mode_core::{CounterRng, ParamId, ParamStore, Tensor};

const TRIALS: usize = 100;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn check_store<F>(store: &mut ParamStore, rng: &mut CounterRng, build: F) -> f64
where
    F: Fn(&mut Session<'_>) -> Var,
{
    max_relative_error(store, rng, H, build)
}

fn random_input(rng: &mut CounterRng, shape: &[usize], f: impl Fn(f64) -> f64) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.into_data().into_iter().map(f).collect()).unwrap()
}

fn dims(rng: &mut CounterRng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

/// Runs `TRIALS` trials of `setup` and returns the worst error.
fn suite(seed: u64, mut setup: impl FnMut(&mut CounterRng) -> f64) -> f64 {
    let mut rng = CounterRng::new(seed);
    (0..TRIALS).map(|_| setup(&mut rng)).fold(0.0, f64::max)
}

fn assert_ok(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative error {err:e}");
}

macro_rules! inputs {
    ($store:ident; $($t:expr),+) => {{
        let mut $store = ParamStore::new();
        let ids = [$( $store.add("in", $t, true) ),+];
        ($store, ids)
    }};
}

fn binary_case(seed: u64, op: fn(&mut Session<'_>, Var, Var) -> Var) -> f64 {
    suite(seed, |rng| {
        let (r, c) = dims(rng);
        let rshape: Vec<usize> = match rng.below(3) {
            0 => vec![r, c],
            1 => vec![c],
            _ => vec![r, 1],
        };
        let a = random_input(rng, &[r, c], |x| x);
        let b = random_input(rng, &rshape, |x| x.signum() * (0.5 + x.abs()));
        let (mut store, ids) = inputs!(store; a, b);
        check_store(&mut store, rng, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            op(s, a, b)
        })
    })
}

#[test]
fn binary_ops_with_broadcast() {
    assert_ok("add", binary_case(1, |s, a, b| s.add(a, b).unwrap()));
    assert_ok("sub", binary_case(2, |s, a, b| s.sub(a, b).unwrap()));
    assert_ok("mul", binary_case(3, |s, a, b| s.mul(a, b).unwrap()));
}

#[test]
fn matmul_and_scale() {
    let err = suite(4, |rng| {
        let (r, k) = dims(rng);
        let c = 1 + rng.below(4);
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, k], 1.0, rng), Tensor::randn(&[k, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            s.matmul(a, b).unwrap()
        })
    });
    assert_ok("matmul", err);
    let err = suite(5, |rng| {
        let (r, c) = dims(rng);
        let k = rng.normal() * 3.0;
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            s.scale(a, k)
        })
    });
    assert_ok("scale", err);
}

fn unary_case(seed: u64, domain: fn(f64) -> f64, op: fn(&mut Session<'_>, Var) -> Var) -> f64 {
    suite(seed, |rng| {
        let (r, c) = dims(rng);
        let (mut store, ids) = inputs!(store; random_input(rng, &[r, c], domain));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            op(s, a)
        })
    })
}

fn away_from_zero(x: f64) -> f64 {
    x.signum() * (0.01 + x.abs())
}

fn positive(x: f64) -> f64 {
    0.05 + x.abs()
}

#[test]
fn unary_ops() {
    assert_ok("gelu", unary_case(6, |x| 2.0 * x, |s, a| s.gelu(a)));
    assert_ok("relu", unary_case(7, away_from_zero, |s, a| s.relu(a)));
    assert_ok("softplus", unary_case(8, |x| 3.0 * x, |s, a| s.softplus(a)));
    assert_ok("log", unary_case(9, positive, |s, a| s.log(a)));
    assert_ok("exp", unary_case(10, |x| x, |s, a| s.exp(a)));
    assert_ok("plogp", unary_case(11, positive, |s, a| s.plogp(a)));
}

#[test]
fn reductions() {
    assert_ok("sum", unary_case(12, |x| x, |s, a| s.sum(a)));
    assert_ok("mean", unary_case(13, |x| x, |s, a| s.mean(a)));
    assert_ok("sum_axis0", unary_case(14, |x| x, |s, a| s.sum_axis(a, 0).unwrap()));
    assert_ok("sum_axis1", unary_case(15, |x| x, |s, a| s.sum_axis(a, 1).unwrap()));
}

#[test]
fn softmax_family() {
    assert_ok("softmax", unary_case(16, |x| 2.0 * x, |s, a| s.softmax(a, None).unwrap()));
    assert_ok("log_softmax", unary_case(17, |x| 2.0 * x, |s, a| s.log_softmax(a).unwrap()));
    let err = suite(18, |rng| {
        let (r, c) = dims(rng);
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.uniform() < 0.6).collect();
        for i in 0..r {
            mask[i * c + rng.below(c)] = true;
        }
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 2.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            s.softmax(a, Some(mask.clone())).unwrap()
        })
    });
    assert_ok("masked softmax", err);
    let err = suite(19, |rng| {
        let (r, c) = dims(rng);
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            let p = s.softmax(a, None).unwrap();
            s.entropy_rows(p).unwrap()
        })
    });
    assert_ok("entropy_rows", err);
    let err = suite(20, |rng| {
        let c = 1 + rng.below(6);
        let (mut store, ids) = inputs!(store; Tensor::randn(&[1, c], 1.5, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            let p = s.softmax(a, None).unwrap();
            s.entropy(p).unwrap()
        })
    });
    assert_ok("entropy", err);
}

#[test]
fn indexing_ops() {
    let err = suite(21, |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            s.pick(a, &idx).unwrap()
        })
    });
    assert_ok("pick", err);
    let err = suite(22, |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(r)).collect();
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            s.gather_rows(a, &idx).unwrap()
        })
    });
    assert_ok("gather_rows", err);
    let err = suite(23, |rng| {
        let (r, c) = dims(rng);
        let r2 = 1 + rng.below(3);
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng), Tensor::randn(&[r2, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            s.concat_rows(&[a, b, a]).unwrap()
        })
    });
    assert_ok("concat_rows", err);
    let err = suite(24, |rng| {
        let (r, c) = dims(rng);
        let j = rng.below(c);
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 1.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            let col = s.column(a, j).unwrap();
            let sq = s.mul(col, col).unwrap();
            s.reshape(sq, &[r]).unwrap()
        })
    });
    assert_ok("column/reshape", err);
    let err = suite(25, |rng| {
        let (r, c) = dims(rng);
        let labels: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        let (mut store, ids) = inputs!(store; Tensor::randn(&[r, c], 2.0, rng));
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            cross_entropy(s, a, &labels).unwrap()
        })
    });
    assert_ok("cross_entropy", err);
}

/// Logits whose K-th and (K+1)-th largest entries per row are well apart,
/// so a finite-difference step cannot change the retained set.
fn separated_logits(rng: &mut CounterRng, r: usize, n: usize, k: usize) -> Tensor {
    loop {
        let t = Tensor::randn(&[r, n], 1.5, rng);
        let ok = (0..r).all(|i| {
            let mut row = t.row(i).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            k == n || row[k - 1] - row[k] > 1e-3
        });
        if ok {
            return t;
        }
    }
}

#[test]
fn topk_softmax_retained_entries() {
    for span in [GateSpan::Retained, GateSpan::All] {
        let err = suite(26, |rng| {
            let n = 2 + rng.below(6);
            let k = 1 + rng.below(n);
            let r = 1 + rng.below(4);
            let (mut store, ids) = inputs!(store; separated_logits(rng, r, n, k));
            check_store(&mut store, rng, |s| {
                let a = s.param(ids[0]);
                topk_softmax(s, a, k, span).unwrap()
            })
        });
        assert_ok("topk_softmax", err);
    }
}

fn layer_store(rng: &mut CounterRng, activation: Activation) -> (ParamStore, ModeLayer, ParamId) {
    let dim = 3 + rng.below(3);
    let cfg = ModeLayerConfig {
        dim,
        rank: 1 + rng.below(3),
        experts: 3 + rng.below(3),
        domains: 2,
        top_k: 2,
        policy: RoutingPolicy::TopK,
        span: GateSpan::Retained,
        activation,
    };
    let mut store = ParamStore::new();
    let layer = ModeLayer::new(&mut store, 0, cfg, rng).unwrap();
    // nonzero up-projections and biases so every path carries gradient
    let ids: Vec<ParamId> = layer.params();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.7, rng);
    }
    let rows = 1 + rng.below(3);
    let x = store.add("x", Tensor::randn(&[rows, dim], 1.0, rng), true);
    (store, layer, x)
}

#[test]
fn expert_forward_matches_differences() {
    for act in [Activation::Gelu, Activation::Identity] {
        let err = suite(27, |rng| {
            let (mut store, layer, x) = layer_store(rng, act);
            let i = rng.below(layer.config.experts);
            let keep: Vec<ParamId> = layer.expert_params(i).into_iter().chain([x]).collect();
            let all: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            for id in all {
                store.set_trainable(id, keep.contains(&id));
            }
            check_store(&mut store, rng, |s| {
                let xv = s.param(x);
                layer.expert_forward(s, i, xv).unwrap()
            })
        });
        assert_ok("expert_forward", err);
    }
}

#[test]
fn mode_forward_matches_differences() {
    let err = suite(28, |rng| {
        let (mut store, layer, x) = layer_store(rng, Activation::Gelu);
        let d = rng.below(2);
        // reject inputs whose routing sits near a top-k boundary
        loop {
            let mut s = Session::inference(&store);
            let xv = s.param(x);
            let l = layer.noisy_gate_logits(&mut s, d, xv, &mut CounterRng::new(0), false).unwrap();
            let t = s.value(l).clone();
            let (r, n) = t.dims2().unwrap();
            let ok = (0..r).all(|i| {
                let mut row = t.row(i).to_vec();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                row[1] - row[2] > 1e-3 || n == 2
            });
            if ok {
                break;
            }
            let shape = store.get(x).shape().to_vec();
            *store.get_mut(x) = Tensor::randn(&shape, 1.0, rng);
        }
        check_store(&mut store, rng, |s| {
            let xv = s.param(x);
            layer.forward(s, xv, d, &mut CounterRng::new(0), false).unwrap().output
        })
    });
    assert_ok("mode forward", err);
}

#[test]
fn tta_loss_matches_differences() {
    let err = suite(29, |rng| {
        let r = 1 + rng.below(6);
        let c = 2 + rng.below(5);
        let kappa = 0.2 + 0.8 * rng.uniform();
        let logits = loop {
            let t = Tensor::randn(&[r, c], 3.0, rng);
            let ok = (0..r).all(|i| {
                let row = t.row(i);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let h: f64 = row.iter().map(|v| { let p = (v - m).exp() / z; -p * p.ln() }).sum();
                (h / (c as f64).ln() - kappa).abs() > 1e-3
            });
            if ok {
                break t;
            }
        };
        let (mut store, ids) = inputs!(store; logits);
        check_store(&mut store, rng, |s| {
            let a = s.param(ids[0]);
            let p = s.softmax(a, None).unwrap();
            tta_loss(s, p, kappa).unwrap().loss
        })
    });
    assert_ok("tta_loss", err);
}

#[test]
fn synergy_term_matches_differences() {
    for variant in [SynergyVariant::MutualInformation, SynergyVariant::NegEntropy] {
        let err = suite(30, |rng| {
            let dn = 2 + rng.below(3);
            let n = 2 + rng.below(4);
            let layers = 2;
            let mut stats = DomainAssignmentStats::new(layers, dn, n, 0.9).unwrap();
            for _ in 0..rng.below(20) {
                let mut gate: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
                let total: f64 = gate.iter().sum();
                gate.iter_mut().for_each(|g| *g /= total);
                stats.update(&GateRecord { layer: rng.below(layers), domain: rng.below(dn), gate }).unwrap();
            }
            let groups: Vec<(usize, usize, usize)> =
                (0..1 + rng.below(4)).map(|_| (rng.below(layers), rng.below(dn), 1 + rng.below(3))).collect();
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> =
                groups.iter().map(|&(_, _, b)| store.add("g", Tensor::randn(&[b, n], 1.0, rng), true)).collect();
            check_store(&mut store, rng, |s| {
                let current: Vec<CurrentGates> = groups
                    .iter()
                    .zip(&ids)
                    .map(|(&(layer, domain, _), &id)| {
                        let l = s.param(id);
                        CurrentGates { layer, domain, gates: s.softmax(l, None).unwrap() }
                    })
                    .collect();
                synergy_loss_term(s, &current, &stats, variant).unwrap()
            })
        });
        assert_ok("synergy_loss_term", err);
    }
}
