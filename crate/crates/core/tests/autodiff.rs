mod common;

use common::{gradcheck, probe, uniform};
use gramssl_core::tensor::{AttentionSpec, AttentionVariant};
use gramssl_core::{Error, Graph, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let err = gradcheck(inputs, build);
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

fn m(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -2.0, 2.0, seed)
}

fn pos(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, 0.5, 2.0, seed)
}

#[test]
fn matmul_hand_case() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let mm = g.constant(m(&[2, 2], 4));
    let p = g.matmul(i2, mm).unwrap();
    assert_eq!(g.value(p), g.value(mm));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_hand_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let s = g.softmax(x, 1.0).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
    let s = g.softmax(x, 1.0).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_temperature_and_nan() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap());
    assert!(matches!(g.softmax(x, 1.0), Err(Error::NonFinite(_))));
    let y = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    assert!(g.softmax(y, 0.0).is_err());
}

#[test]
fn l2_normalize_hand_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x, 1e-6).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    let u = g.constant(Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap());
    let y = g.l2_normalize(u, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    let z = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    let y = g.l2_normalize(z, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
}

#[test]
fn quadratic_gradient_is_twice_input() {
    let mut g = Graph::<f64>::new();
    let x = g.param(m(&[5], 1));
    let sq = g.sqr(x);
    let l = g.sum(sq);
    g.backward(l).unwrap();
    for (gr, xv) in g.grad(x).unwrap().iter().zip(g.value(x).data()) {
        assert_eq!(*gr, 2.0 * xv);
    }
}

#[test]
fn disconnected_leaf_gets_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.param(m(&[3], 1));
    let y = g.param(m(&[4], 2));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(y).unwrap(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(m(&[3], 1));
    let y = g.exp(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn gradients_accumulate_until_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.param(m(&[3], 1));
    let sq = g.sqr(x);
    let l = g.sum(sq);
    g.backward(l).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(l).unwrap();
    let twice = g.grad(x).unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), once.as_slice());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut g = Graph::<f64>::new();
    let a = g.param(m(&[6, 5], 1));
    let b = g.param(m(&[5, 4], 2));
    let c = g.matmul(a, b).unwrap();
    let s = g.softmax(c, 0.3).unwrap();
    let l = probe(&mut g, s, 3);
    g.backward(l).unwrap();
    let first = (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec());
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(first.0.as_slice(), g.grad(a).unwrap());
    assert_eq!(first.1.as_slice(), g.grad(b).unwrap());
}

#[test]
fn grad_elementwise_binary() {
    let ab = [m(&[3, 4], 1), m(&[3, 4], 2)];
    check("add", &ab, |g, v| { let y = g.add(v[0], v[1]).unwrap(); probe(g, y, 1) });
    check("sub", &ab, |g, v| { let y = g.sub(v[0], v[1]).unwrap(); probe(g, y, 2) });
    check("mul", &ab, |g, v| { let y = g.mul(v[0], v[1]).unwrap(); probe(g, y, 3) });
    check("div", &[m(&[3, 4], 1), pos(&[3, 4], 2)], |g, v| {
        let y = g.div(v[0], v[1]).unwrap();
        probe(g, y, 4)
    });
}

#[test]
fn grad_broadcasts() {
    let x = m(&[4, 3], 1);
    let r = m(&[3], 2);
    check("add_row", &[x.clone(), r.clone()], |g, v| { let y = g.add_row(v[0], v[1]).unwrap(); probe(g, y, 1) });
    check("mul_row", &[x.clone(), r], |g, v| { let y = g.mul_row(v[0], v[1]).unwrap(); probe(g, y, 2) });
    check("mul_col", &[x, m(&[4], 3)], |g, v| { let y = g.mul_col(v[0], v[1]).unwrap(); probe(g, y, 3) });
}

#[test]
fn grad_unary() {
    let x = m(&[2, 5], 1);
    check("scale", &[x.clone()], |g, v| { let y = g.scale(v[0], -1.7); probe(g, y, 1) });
    check("add_scalar", &[x.clone()], |g, v| { let y = g.add_scalar(v[0], 0.3); probe(g, y, 2) });
    check("exp", &[x.clone()], |g, v| { let y = g.exp(v[0]); probe(g, y, 3) });
    check("log", &[pos(&[2, 5], 4)], |g, v| { let y = g.log(v[0]); probe(g, y, 4) });
    check("sqr", &[x.clone()], |g, v| { let y = g.sqr(v[0]); probe(g, y, 5) });
    check("silu", &[x.clone()], |g, v| { let y = g.silu(v[0]); probe(g, y, 6) });
    check("gelu", &[x.clone()], |g, v| { let y = g.gelu(v[0]); probe(g, y, 7) });
    check("swiglu", &[x.clone(), m(&[2, 5], 9)], |g, v| { let y = g.swiglu(v[0], v[1]).unwrap(); probe(g, y, 8) });
}

#[test]
fn grad_matrix_ops() {
    check("matmul", &[m(&[3, 4], 1), m(&[4, 2], 2)], |g, v| { let y = g.matmul(v[0], v[1]).unwrap(); probe(g, y, 1) });
    check("matmul sum", &[m(&[3, 4], 1), m(&[4, 2], 2)], |g, v| { let y = g.matmul(v[0], v[1]).unwrap(); g.sum(y) });
    check("matmul_nt", &[m(&[3, 4], 1), m(&[5, 4], 2)], |g, v| { let y = g.matmul_nt(v[0], v[1]).unwrap(); probe(g, y, 2) });
    check("transpose", &[m(&[3, 4], 1)], |g, v| { let y = g.transpose(v[0]).unwrap(); probe(g, y, 3) });
    check("reshape", &[m(&[3, 4], 1)], |g, v| { let y = g.reshape(v[0], &[2, 6]).unwrap(); probe(g, y, 4) });
}

#[test]
fn grad_structural_ops() {
    check("concat0", &[m(&[2, 3], 1), m(&[4, 3], 2)], |g, v| { let y = g.concat(&[v[0], v[1]], 0).unwrap(); probe(g, y, 1) });
    check("concat1", &[m(&[2, 3], 1), m(&[2, 5], 2)], |g, v| { let y = g.concat(&[v[0], v[1], v[0]], 1).unwrap(); probe(g, y, 2) });
    check("slice0", &[m(&[5, 3], 1)], |g, v| { let y = g.slice(v[0], 0, 1, 3).unwrap(); probe(g, y, 3) });
    check("slice1", &[m(&[3, 6], 1)], |g, v| { let y = g.slice(v[0], 1, 2, 3).unwrap(); probe(g, y, 4) });
    check("gather_rows", &[m(&[4, 3], 1)], |g, v| { let y = g.gather_rows(v[0], &[3, 0, 3, 1, 3]).unwrap(); probe(g, y, 5) });
}

#[test]
fn grad_reductions() {
    let x = m(&[3, 4], 1);
    check("sum", &[x.clone()], |g, v| { let y = g.sqr(v[0]); g.sum(y) });
    check("mean", &[x.clone()], |g, v| { let y = g.sqr(v[0]); g.mean(y) });
    check("sum_last", &[x.clone()], |g, v| { let y = g.sum_last(v[0]); probe(g, y, 1) });
    check("mean_last", &[x.clone()], |g, v| { let y = g.mean_last(v[0]); probe(g, y, 2) });
    check("row_norm", &[x], |g, v| { let y = g.row_norm(v[0]); probe(g, y, 3) });
}

#[test]
fn grad_normalizations() {
    let x = m(&[3, 5], 1);
    check("softmax", &[x.clone()], |g, v| { let y = g.softmax(v[0], 0.7).unwrap(); probe(g, y, 1) });
    check("log_softmax", &[x.clone()], |g, v| { let y = g.log_softmax(v[0], 0.4).unwrap(); probe(g, y, 2) });
    check("layer_norm", &[x.clone(), m(&[5], 2), m(&[5], 3)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        probe(g, y, 3)
    });
    check("l2_normalize", &[x.clone()], |g, v| { let y = g.l2_normalize(v[0], 1e-6).unwrap(); probe(g, y, 4) });
    let mut targets = uniform(&[3, 5], 0.0, 1.0, 9);
    for row in targets.data_mut().chunks_mut(5) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|t| *t /= s);
    }
    check("soft_cross_entropy", &[x], move |g, v| g.soft_cross_entropy(v[0], &targets, 0.1).unwrap());
}

fn attention_case(variant: AttentionVariant) {
    let (n_seq, t, heads, d) = (2, 3, 2, 4);
    let spec = AttentionSpec { n_seq, seq_len: t, heads, variant };
    let inputs = [m(&[n_seq * t, d], 1), m(&[n_seq * t, d], 2), m(&[n_seq * t, d], 3), m(&[d], 4), m(&[d], 5)];
    check(&format!("{variant:?}"), &inputs, |g, v| {
        let y = g.attention(v[0], v[1], v[2], Some(v[3]), Some(v[4]), spec).unwrap();
        probe(g, y, 7)
    });
}

#[test]
fn grad_attention_variants() {
    attention_case(AttentionVariant::Standard);
    attention_case(AttentionVariant::ValueGating);
    attention_case(AttentionVariant::AttentionBias);
}

#[test]
fn grad_rope() {
    let (t, heads, hd) = (3, 2, 4);
    let angles: Vec<f64> = (0..t * hd / 2).map(|i| 0.37 * i as f64 - 0.5).collect();
    let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
    check("rope", &[m(&[2 * t, heads * hd], 1)], move |g, v| {
        let y = g.rope(v[0], &cos, &sin, 2, heads).unwrap();
        probe(g, y, 1)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-20.0f64..20.0, 12), temp in 0.05f64..5.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax(x, temp).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(vals in prop::collection::vec(-3.0f64..3.0, 8)) {
        let eps = 1e-6;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 4], vals.clone()).unwrap());
        let y = g.l2_normalize(x, eps).unwrap();
        for (row, inp) in g.value(y).data().chunks(4).zip(vals.chunks(4)) {
            let n_in = inp.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n_in >= 10.0 * eps {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn matmul_gradient_matches_differences(seed in 0u64..1000) {
        let a = uniform(&[3, 4], -2.0, 2.0, seed);
        let b = uniform(&[4, 2], -2.0, 2.0, seed + 5000);
        let err = gradcheck(&[a, b], |g, v| { let y = g.matmul(v[0], v[1]).unwrap(); g.sum(y) });
        prop_assert!(err < TOL);
    }
}
