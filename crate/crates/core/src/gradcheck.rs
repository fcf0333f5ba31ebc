//! Central finite-difference checking of reverse-mode gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Session, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Worst relative error, over every trainable parameter in `store`, between
/// the analytic gradient and a central difference with step `h`. Outputs
/// are reduced to a scalar through fixed random weights drawn from `rng`.
/// The error of one parameter is `|a - n| / max(|a|, |n|, 1e-6)` in the
/// Euclidean norm.
pub fn max_relative_error<F>(store: &mut ParamStore, rng: &mut CounterRng, h: f64, build: F) -> f64
where
    F: Fn(&mut Session<'_>) -> Var,
{
    let mut weights = None;
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let analytic = {
        let mut s = Session::new(store);
        let out = build(&mut s);
        let loss = project(&mut s, out, &mut weights, rng);
        s.backward(loss).expect("projected loss is scalar");
        s.grads()
    };
    let mut eval = |store: &ParamStore| {
        let mut s = Session::inference(store);
        let out = build(&mut s);
        let loss = project(&mut s, out, &mut weights, rng);
        s.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for id in ids {
        let a = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut n = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            n.push((up - down) / (2.0 * h));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
        let diff = norm(&mut a.iter().zip(&n).map(|(x, y)| x - y));
        let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied())).max(1e-6);
        worst = worst.max(diff / scale);
    }
    worst
}

fn project(s: &mut Session<'_>, out: Var, weights: &mut Option<Tensor>, rng: &mut CounterRng) -> Var {
    let shape = s.value(out).shape().to_vec();
    let w = weights.get_or_insert_with(|| Tensor::randn(&shape, 1.0, rng)).clone();
    let w = s.constant(w);
    let m = s.mul(out, w).expect("weights share the output shape");
    s.sum(m)
}
