//! Per-op gradient checks against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn check<B>(store: &mut ParamStore<f64>, build: B)
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let ng = g.backward(loss);
    let grads = g.param_grads(&ng, store).unwrap();
    let eps = 1e-6;
    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.get(id).value.len() {
            let orig = store.get(id).value[j];
            store.get_mut(id).value[j] = orig + eps;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.scalar(lp);
            store.get_mut(id).value[j] = orig - eps;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.scalar(lm);
            store.get_mut(id).value[j] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = grads.get(id)[j];
            let err = (num - ana).abs() / (1e-6 + num.abs().max(ana.abs()));
            assert!(
                err < 1e-5 || (num - ana).abs() < 1e-8,
                "{}[{j}]: analytic {ana} numeric {num}",
                store.get(id).name
            );
        }
    }
}

fn rand_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.uniform(*name, shape.clone(), 1.0, &mut rng);
    }
    s
}

/// Reduce any matrix to a scalar with a fixed random projection, through a
/// cross-entropy so every op sees a non-trivial upstream gradient.
fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
    let weights: Vec<f64> = (0..r).map(|_| rng.gen_range(0.1..1.0)).collect();
    g.cross_entropy(x, &targets, &weights)
}

#[test]
fn linear_add_scale_silu() {
    let mut s = rand_store(&[("x", vec![5, 3]), ("w", vec![3, 4]), ("b", vec![1, 4]), ("y", vec![5, 4])], 1);
    check(&mut s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let y = g.param(s, s.id("y").unwrap());
        let h = g.linear(x, w, Some(b));
        let h = g.silu(h);
        let h = g.add(h, y);
        let h = g.scale(h, 0.7);
        reduce(g, h, 2)
    });
}

#[test]
fn glu_layer_norm_repeat() {
    let mut s = rand_store(&[("x", vec![6, 8]), ("c", vec![3, 4]), ("gam", vec![1, 4]), ("bet", vec![1, 4])], 3);
    check(&mut s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let c = g.param(s, s.id("c").unwrap());
        let h = g.glu(x);
        let h = g.add_repeat(h, c);
        let gam = g.param(s, s.id("gam").unwrap());
        let bet = g.param(s, s.id("bet").unwrap());
        let h = g.layer_norm(h, gam, bet);
        reduce(g, h, 4)
    });
}

#[test]
fn embedding_attention() {
    let mut s = rand_store(&[("t", vec![5, 6]), ("w", vec![6, 18])], 5);
    check(&mut s, |g, s| {
        let t = g.param(s, s.id("t").unwrap());
        let e = g.embedding(t, &[0, 3, 3, 1, 4, 2, 0, 1]);
        let w = g.param(s, s.id("w").unwrap());
        let qkv = g.linear(e, w, None);
        let a = g.attention(qkv, 2, 4, 2);
        reduce(g, a, 6)
    });
}

#[test]
fn depthwise_conv() {
    let mut s = rand_store(&[("x", vec![10, 3]), ("w", vec![3, 3]), ("b", vec![1, 3])], 7);
    check(&mut s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let h = g.depthwise_conv(x, w, b, 2, 5);
        reduce(g, h, 8)
    });
}

#[test]
fn pooling() {
    let mut s = rand_store(&[("x", vec![7, 3])], 9);
    check(&mut s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let m = g.mean_pool(x, &[(0, 3), (3, 7)]);
        let p = g.span_mean_max(x, &[(1, 4), (4, 6)]);
        let a = reduce(g, m, 10);
        let b = reduce(g, p, 11);
        g.add(a, b)
    });
}

#[test]
fn backward_seed_scales_linearly() {
    let s = rand_store(&[("x", vec![4, 3])], 12);
    let mut g = Graph::new();
    let x = g.param(&s, s.id("x").unwrap());
    let l = reduce(&mut g, x, 13);
    let g1 = g.param_grads(&g.backward(l), &s).unwrap();
    let g2 = g.param_grads(&g.backward_scaled(l, 2.0), &s).unwrap();
    for (a, b) in g1.values[0].iter().zip(&g2.values[0]) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut s = ParamStore::<f64>::new();
    s.add("bad.weight", vec![1, 2], vec![f64::NAN, 1.0]);
    let mut g = Graph::new();
    let x = g.param(&s, s.id("bad.weight").unwrap());
    let l = g.cross_entropy(x, &[0], &[1.0]);
    let err = g.param_grads(&g.backward(l), &s).unwrap_err();
    assert!(err.to_string().contains("bad.weight"));
}
