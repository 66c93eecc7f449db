use std::rc::Rc;

use super::*;
use crate::error::Error;

fn store_with(seed: u64, shapes: &[(&str, &[usize])]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new(seed);
    let ids = shapes
        .iter()
        .map(|(n, sh)| s.add(n, sh, InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap())
        .collect();
    (s, ids)
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::random_uniform(g.shape(y), -1.0, 1.0, seed);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_zeros() {
    let mut g = Graph::new();
    let x = Tensor::random_uniform(&[3, 3], -1.0, 1.0, 1);
    let i = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let z = g.constant(Tensor::zeros(&[2, 4]));
    let x = g.constant(Tensor::random_uniform(&[4, 5], -1.0, 1.0, 2));
    let y = g.matmul(z, x).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[2, 5]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let e = g.matmul(a, b).unwrap_err();
    let msg = e.to_string();
    assert!(matches!(e, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_sum_gradient() {
    let (mut s, ids) = store_with(3, &[("a", &[4, 4]), ("b", &[4, 4])]);
    let mut g = Graph::new();
    let a = g.param(&s, ids[0]);
    let b = g.param(&s, ids[1]);
    let y = g.matmul(a, b).unwrap();
    let l = g.sum(y);
    g.backward(l, &mut s).unwrap();
    // d/da[i,p] sum(a·b) = Σ_j b[p,j]
    let bv = s.value(ids[1]).clone();
    for i in 0..4 {
        for p in 0..4 {
            let want: f64 = (0..4).map(|j| bv.at(&[p, j])).sum();
            assert!((s.get(ids[0]).grad.at(&[i, p]) - want).abs() < 1e-14);
        }
    }
    let r = finite_diff_check(&mut s, 1e-5, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let y = g.matmul(a, b)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn ln(g: &mut Graph, x: Tensor) -> Tensor {
    let c = x.cols();
    let xv = g.constant(x);
    let gain = g.constant(Tensor::ones(&[c]));
    let bias = g.constant(Tensor::zeros(&[c]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let y = ln(&mut g, Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));

    let y = ln(&mut g, Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    assert!((y.data()[0] - 1.0).abs() < 1e-3 && (y.data()[1] + 1.0).abs() < 1e-3);

    let y = ln(&mut g, Tensor::random_uniform(&[1, 8], -3.0, 3.0, 4));
    let mean = y.sum() / 8.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-3);

    let x = g.constant(Tensor::zeros(&[2, 1]));
    let one = g.constant(Tensor::ones(&[1]));
    assert!(g.layer_norm(x, one, one, 1e-5).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);

    let x = g.constant(Tensor::new(&[5], vec![0.0, 30.0, -30.0, 800.0, -800.0]).unwrap());
    let y = g.sigmoid(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!(v[1] < 1.0 && v[1] > 1.0 - 1e-12);
    assert!(v[2] > 0.0 && v[2] < 1e-12);
    assert!(v[3] < 1.0 && v[4] > 0.0);

    let xs = Tensor::random_uniform(&[100], -20.0, 20.0, 5);
    let pos = g.constant(xs.clone());
    let neg = g.constant(xs.map(|v| -v));
    let sp = g.sigmoid(pos);
    let sn = g.sigmoid(neg);
    for (a, b) in g.value(sp).data().iter().zip(g.value(sn).data()) {
        assert!((a + b - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn square_gradient() {
    let mut s = ParamStore::new(0);
    let x = s.add("x", &[1], InitScheme::Constant(3.0)).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&s, x);
    let y = g.mul(xv, xv).unwrap();
    let l = g.sum(y);
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.get(x).grad.data(), &[6.0]);
}

#[test]
fn gelu_of_linear_matches_finite_differences() {
    for seed in 0..5 {
        let (mut s, ids) = store_with(seed, &[("w", &[6, 5]), ("x", &[5, 1])]);
        let r = finite_diff_check(&mut s, 1e-5, |g, s| {
            let w = g.param(s, ids[0]);
            let x = g.param(s, ids[1]);
            let h = g.matmul(w, x)?;
            let y = g.gelu(h);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

#[test]
fn disconnected_parameter_gets_zero_grad() {
    let (mut s, ids) = store_with(1, &[("used", &[3]), ("unused", &[3])]);
    let mut g = Graph::new();
    let u = g.param(&s, ids[0]);
    let _ = g.param(&s, ids[1]);
    let l = g.sum(u);
    g.backward(l, &mut s).unwrap();
    assert!(s.get(ids[1]).grad.data().iter().all(|&v| v == 0.0));
    assert!(!s.get(ids[1]).has_grad());
}

#[test]
fn backward_requires_scalar_root_and_accumulates() {
    let (mut s, ids) = store_with(2, &[("x", &[3])]);
    let mut g = Graph::new();
    let x = g.param(&s, ids[0]);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y, &mut s), Err(Error::Contract(_))));
    let l = g.sum(y);
    g.backward(l, &mut s).unwrap();
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.get(ids[0]).grad.data(), &[4.0, 4.0, 4.0]);
    s.zero_grad();
    assert_eq!(s.get(ids[0]).grad.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn finite_diff_exact_for_linear() {
    let (mut s, ids) = store_with(4, &[("x", &[6])]);
    let c = Tensor::random_uniform(&[6], -2.0, 2.0, 9);
    let r = finite_diff_check(&mut s, 1e-5, |g, s| {
        let x = g.param(s, ids[0]);
        let cv = g.constant(c.clone());
        let p = g.mul(x, cv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

/// Central differences have O(h²) truncation error; a cubic exposes it
/// (a quadratic is differentiated exactly and only shows roundoff).
#[test]
fn finite_diff_error_shrinks_quadratically() {
    let run = |h: f64| {
        let mut s = ParamStore::new(0);
        let x = s.add("x", &[1], InitScheme::Constant(0.7)).unwrap();
        finite_diff_check(&mut s, h, |g, s| {
            let xv = g.param(s, x);
            let sq = g.mul(xv, xv)?;
            let cube = g.mul(sq, xv)?;
            Ok(g.sum(cube))
        })
        .unwrap()
        .max_rel_error
    };
    let (coarse, fine) = (run(1e-3), run(1e-5));
    // exact truncation error is h² / (3 x²)
    assert!((coarse - 1e-6 / (3.0 * 0.49)).abs() < 1e-9);
    assert!(coarse / fine > 1e3, "{coarse} {fine}");
}

#[test]
fn finite_diff_reports_non_finite() {
    let mut s = ParamStore::new(0);
    let x = s.add("x", &[1], InitScheme::Constant(0.0)).unwrap();
    let e = finite_diff_check(&mut s, 1e-5, |g, s| {
        let xv = g.param(s, x);
        let one = g.constant(Tensor::ones(&[1]));
        let shifted = g.add_scalar(xv, 1e-5);
        let q = g.div(one, shifted)?;
        Ok(g.sum(q))
    })
    .unwrap_err();
    assert!(e.to_string().contains("x[0]"), "{e}");
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let d = g.exp(v[1]);
            g.div(v[0], d)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |g, v| g.mul_row(v[0], v[1])),
        ("mul_col", vec![vec![3, 4], vec![3]], |g, v| g.mul_col(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("exp", vec![vec![5]], |g, v| Ok(g.exp(v[0]))),
        ("expm1", vec![vec![5]], |g, v| Ok(g.expm1(v[0]))),
        ("gelu", vec![vec![5]], |g, v| Ok(g.gelu(v[0]))),
        ("sigmoid", vec![vec![5]], |g, v| Ok(g.sigmoid(v[0]))),
        ("leaky_relu", vec![vec![5]], |g, v| Ok(g.leaky_relu(v[0], 0.01))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("mix", vec![vec![4, 3]], |g, v| {
            let t = RowMix::from_rows(4, &[vec![(0, 0.5), (3, -1.0)], vec![], vec![(2, 2.0), (2, 1.0)]])?;
            g.mix(v[0], Rc::new(t))
        }),
        ("reverse_rows", vec![vec![4, 3]], |g, v| g.reverse_rows(v[0])),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        ("group_max", vec![vec![6, 3]], |g, v| g.group_max(v[0], 3)),
        ("smooth_l1", vec![vec![5]], |g, v| Ok(g.smooth_l1(v[0]))),
        ("row_norm", vec![vec![3, 4]], |g, v| g.row_norm(v[0])),
        ("ssm_scan", vec![vec![5, 2], vec![2, 3], vec![2, 3], vec![2, 3], vec![2]], |g, v| {
            let a = g.sigmoid(v[1]);
            g.ssm_scan(v[0], a, v[2], v[3], v[4])
        }),
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, shapes, f) in op_cases() {
        for seed in 0..5 {
            let named: Vec<(String, Vec<usize>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("in{i}"), s.clone()))
                .collect();
            let refs: Vec<(&str, &[usize])> = named.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
            let (mut s, ids) = store_with(seed * 31 + name.len() as u64, &refs);
            let r = finite_diff_check(&mut s, 1e-5, |g, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = f(g, &vars)?;
                probe(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn ops_are_deterministic_and_do_not_mutate_inputs() {
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Tensor::random_uniform(s, -1.0, 1.0, i as u64))
            .collect();
        let run = || {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let y = f(&mut g, &vars).unwrap();
            let l = probe(&mut g, y, 0).unwrap();
            g.compute_grads(l).unwrap();
            for (v, t) in vars.iter().zip(&inputs) {
                assert_eq!(g.value(*v), t, "{name} mutated an input");
            }
            let grads: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).cloned().unwrap()).collect();
            (g.value(y).clone(), grads)
        };
        assert_eq!(run(), run(), "{name} is not deterministic");
    }
}

#[test]
fn group_max_picks_earliest_tie() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let m = g.group_max(x, 2).unwrap();
    let l = g.sum(m);
    g.compute_grads(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn tensor_construction_checks() {
    assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(&[0, 3], vec![]).is_err());
    let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
    assert_eq!(t.at(&[1, 2]), 5.0);
    assert_eq!(t.rows(), 2);
    assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
}
