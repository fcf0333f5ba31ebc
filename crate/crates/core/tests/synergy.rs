use mode_core::optim::{Adam, AdamConfig};
use mode_core::synergy::{mi_graph, synergy_mi, synergy_negentropy};
use mode_core::{CounterRng, ParamStore, Session, Tensor};

fn random_joint(rng: &mut CounterRng, d: usize, n: usize) -> Tensor {
    // mix of sparse and dense tables
    let sparsity = rng.uniform();
    let mut v: Vec<f64> = (0..d * n).map(|_| if rng.uniform() < sparsity * 0.7 { 0.0 } else { rng.uniform() }).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    Tensor::matrix(d, n, v.into_iter().map(|x| x / s).collect()).unwrap()
}

#[test]
fn independent_joint_has_zero_synergy() {
    let mut rng = CounterRng::new(3);
    for _ in 0..200 {
        let (d, n) = (1 + rng.below(6), 1 + rng.below(8));
        let p: Vec<f64> = (0..d).map(|_| rng.uniform() + 0.01).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        let joint: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| a / sp * b / sq)).collect();
        let mi = synergy_mi(&Tensor::matrix(d, n, joint).unwrap()).unwrap();
        assert!(mi.abs() < 1e-10, "{mi}");
    }
}

#[test]
fn bijective_joint_has_ln_d() {
    for d in 1..9 {
        let mut joint = vec![0.0; d * d];
        for i in 0..d {
            joint[i * d + (i * 3 + 1) % d] = 1.0 / d as f64;
        }
        let t = Tensor::matrix(d, d, joint).unwrap();
        if (0..d).map(|i| (i * 3 + 1) % d).collect::<std::collections::BTreeSet<_>>().len() != d {
            continue;
        }
        assert!((synergy_mi(&t).unwrap() - (d as f64).ln()).abs() < 1e-10);
    }
}

#[test]
fn synergy_is_bounded() {
    let mut rng = CounterRng::new(4);
    for _ in 0..1000 {
        let (d, n) = (1 + rng.below(6), 1 + rng.below(8));
        let j = random_joint(&mut rng, d, n);
        let mi = synergy_mi(&j).unwrap();
        assert!(mi >= -1e-12 && mi <= (d.min(n) as f64).ln() + 1e-12, "{mi} for {d}x{n}");
        let ne = synergy_negentropy(&j).unwrap();
        assert!(ne <= 1e-12 && ne >= -((d * n) as f64).ln() - 1e-12);
    }
}

/// Ascends MI over a softmax-parameterized `d x n` table; returns the step
/// at which every row's max first reached 0.99, and the final MI.
fn ascend(d: usize, n: usize, steps: usize) -> (Option<usize>, f64) {
    let mut rng = CounterRng::new(9);
    let mut store = ParamStore::new();
    let id = store.add("logits", Tensor::randn(&[d, n], 0.01, &mut rng), true);
    let mut opt = Adam::new(AdamConfig::adam(0.05));
    let mut reached = None;
    let mut mi_value = 0.0;
    for step in 0..steps {
        let mut s = Session::new(&store);
        let l = s.param(id);
        let table = s.softmax(l, None).unwrap();
        let min_max = (0..d)
            .map(|i| s.value(table).row(i).iter().cloned().fold(0.0, f64::max))
            .fold(1.0, f64::min);
        if min_max >= 0.99 && reached.is_none() {
            reached = Some(step);
        }
        let joint = s.scale(table, 1.0 / d as f64);
        let mi = mi_graph(&mut s, joint).unwrap();
        mi_value = s.value(mi).data()[0];
        let loss = s.scale(mi, -1.0);
        s.backward(loss).unwrap();
        let grads = s.grads();
        drop(s);
        opt.step(&mut store, &grads);
    }
    (reached, mi_value)
}

#[test]
fn gradient_ascent_specializes_rows() {
    for d in [2, 4, 6, 8] {
        let (reached, _) = ascend(d, d, 2000);
        assert!(reached.is_some(), "{d}x{d} did not specialize");
    }
}

#[test]
fn wide_tables_reach_maximal_synergy() {
    // with spare experts a row may split over experts no other row uses
    // without changing MI, so only the value is pinned
    for (d, n) in [(4, 6), (2, 5)] {
        let (_, mi) = ascend(d, n, 2000);
        assert!((mi - (d as f64).ln()).abs() < 1e-3, "{d}x{n}: {mi}");
    }
}
