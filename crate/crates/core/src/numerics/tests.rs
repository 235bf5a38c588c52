use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::gradcheck::{check, Probe};
use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let u = Uniform::new(-1.0, 1.0);
    Tensor::new(vec![r, c], (0..r * c).map(|_| u.sample(rng)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_hand_example() {
    let tape = Tape::new();
    let eye = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let x = tape.constant(&Tensor::from_rows(&[vec![3.0, -1.0, 2.0], vec![0.5, 4.0, 7.0]]).unwrap());
    assert_eq!(*eye.matmul(x).unwrap().values(), *x.values());

    let a = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(&Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(*c.values(), vec![2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 4, 2);
    let tape = Tape::new();
    let av = tape.leaf(&a.clone().with_grad());
    let bv = tape.constant(&b);
    let loss = av.matmul(bv).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let want = Tensor::full(&[3, 2], 1.0);
    let tape2 = Tape::new();
    let expected = tape2
        .constant(&want)
        .matmul(tape2.constant(&b.transpose()))
        .unwrap();
    assert_close(grads.get(av).unwrap(), &expected.values(), 1e-12);

    let report = check(&[a, b], H, Probe::All, |_, v| Ok(v[0].matmul(v[1])?.sum())).unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = |rows: Vec<Vec<f64>>| {
        tape.constant(&Tensor::from_rows(&rows).unwrap())
            .softmax_rows()
            .unwrap()
            .values()
            .to_vec()
    };
    assert_eq!(s(vec![vec![0.0, 0.0]]), vec![0.5, 0.5]);
    let big = s(vec![vec![1000.0; 3]]);
    assert_close(&big, &[1.0 / 3.0; 3], 1e-15);
    // e^1 / (e^1 + e^2) = 1 / (1 + e)
    let two = s(vec![vec![1.0, 2.0]]);
    let lo = 1.0 / (1.0 + std::f64::consts::E);
    assert_close(&two, &[lo, 1.0 - lo], 1e-15);
    assert!((two[0] - 0.268_941_421_369_995).abs() < 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
    assert!(matches!(x.softmax_rows(), Err(Error::Numeric(_))));
}

#[test]
fn backward_on_sum_gives_ones() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::full(&[3, 2], 0.7).with_grad());
    let grads = tape.backward(w.sum()).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_on_squared_norm_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = rand_t(&mut rng, 3, 4);
    let x = rand_t(&mut rng, 4, 1);
    let tape = Tape::new();
    let wv = tape.leaf(&w.clone().with_grad());
    let xv = tape.constant(&x);
    let wx = wv.matmul(xv).unwrap();
    let grads = tape.backward(wx.square().unwrap().sum()).unwrap();
    // 2 (W x) xᵀ
    let wxv = wx.values();
    let mut want = vec![0.0; 12];
    for i in 0..3 {
        for j in 0..4 {
            want[i * 4 + j] = 2.0 * wxv[i] * x.values()[j];
        }
    }
    assert_close(grads.get(wv).unwrap(), &want, 1e-14);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::zeros(&[2, 2]).with_grad());
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_into_param_grads() {
    let mut store = ParamStore::new(0);
    store.init_ones("w", &[1, 2]).unwrap();
    for _ in 0..2 {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let loss = b.get("w").unwrap().sum();
        let g = tape.backward(loss).unwrap();
        store.accumulate(&b, &g).unwrap();
    }
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
    store.zero_grad();
    assert!(store.get("w").unwrap().grad().is_none());
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rand_t(&mut rng, x.rows(), x.cols());
    x.mul(x.tape().constant(&t)).unwrap().sum()
}

fn probe20(seed: u64) -> Probe {
    Probe::Sample { n: 20, seed }
}

fn assert_grad_ok(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>) {
    let report = check(inputs, H, probe20(7), f).unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn gradient_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = rand_t(&mut rng, 5, 6);
    let b = rand_t(&mut rng, 6, 4);
    let c = rand_t(&mut rng, 5, 6);
    let bt = rand_t(&mut rng, 7, 6);
    let row = rand_t(&mut rng, 1, 6);

    assert_grad_ok(&[a.clone(), b.clone()], |_, v| Ok(weighted(v[0].matmul(v[1])?, 1)));
    assert_grad_ok(&[a.clone(), bt.clone()], |_, v| Ok(weighted(v[0].matmul_nt(v[1])?, 2)));
    assert_grad_ok(&[a.clone(), c.clone()], |_, v| Ok(weighted(v[0].add(v[1])?, 3)));
    assert_grad_ok(&[a.clone(), c.clone()], |_, v| Ok(weighted(v[0].sub(v[1])?, 4)));
    assert_grad_ok(&[a.clone(), c.clone()], |_, v| Ok(weighted(v[0].mul(v[1])?, 5)));
    assert_grad_ok(&[a.clone(), row.clone()], |_, v| Ok(weighted(v[0].add_row(v[1])?, 6)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].scale(-2.5), 7)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].softmax_rows()?, 8)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].log_softmax_rows()?, 9)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].gelu(), 10)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].square()?, 11)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].gather_rows(&[4, 0, 0, 2])?, 12)));
    assert_grad_ok(&[a.clone()], |_, v| Ok(weighted(v[0].tile_rows(3), 13)));
    assert_grad_ok(&[a.clone(), c.clone(), a.clone()], |_, v| {
        Ok(weighted(interleave(&[v[0], v[1], v[2]])?, 14))
    });
    let gamma = rand_t(&mut rng, 1, 6);
    assert_grad_ok(&[a.clone(), gamma, row.clone()], |_, v| {
        Ok(weighted(v[0].layer_norm(v[1], v[2], 1e-5)?, 15))
    });
    // two blocks of 3 and 2 rows against 2 blocks of 4 rows
    let ab = rand_t(&mut rng, 6, 5);
    let bb = rand_t(&mut rng, 8, 5);
    assert_grad_ok(&[ab, bb], |_, v| Ok(weighted(v[0].block_matmul_nt(v[1], 2)?, 16)));
}

#[test]
fn gradient_check_causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (blocks, l, d) = (2, 5, 8);
    let q = rand_t(&mut rng, blocks * l, d);
    let k = rand_t(&mut rng, blocks * l, d);
    let v = rand_t(&mut rng, blocks * l, d);
    let report = check(&[q, k, v], H, Probe::All, |_, x| {
        Ok(weighted(x[0].causal_attention(x[1], x[2], blocks, 2)?, 17))
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn gradient_check_memory_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (blocks, n, l, d) = (2, 3, 4, 5);
    let m0 = rand_t(&mut rng, blocks * n, d);
    let wl = rand_t(&mut rng, blocks * l, n);
    let bl = rand_t(&mut rng, blocks * l, n);
    let v = rand_t(&mut rng, blocks * l, d);
    let report = check(&[m0, wl, bl, v], H, Probe::All, |_, x| {
        let w = x[1].softmax_rows()?;
        let beta = x[2].softmax_rows()?;
        Ok(weighted(x[0].memory_scan(w, beta, x[3], blocks)?, 18))
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(&Tensor::full(&[2, 2], 1.0).with_grad());
    let b = tape.constant(&Tensor::full(&[2, 2], 3.0));
    let g = tape.backward(a.mul(b).unwrap().sum()).unwrap();
    assert!(g.get(b).is_none());
    assert_eq!(g.get(a).unwrap(), &[3.0; 4]);
}

#[test]
fn attention_is_causal_and_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, d) = (6, 4);
    let q = rand_t(&mut rng, l, d);
    let k = rand_t(&mut rng, l, d);
    let v = rand_t(&mut rng, l, d);
    let tape = Tape::new();
    let out = tape
        .constant(&q)
        .causal_attention(tape.constant(&k), tape.constant(&v), 1, 2)
        .unwrap();
    let probs = out.attention_probs().unwrap();
    for h in 0..2 {
        for i in 0..l {
            let row = &probs[(h * l + i) * l..(h * l + i + 1) * l];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
    // perturbing the last key/value leaves earlier outputs bit-identical
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    k2.values_mut()[(l - 1) * d] += 5.0;
    v2.values_mut()[(l - 1) * d + 1] -= 5.0;
    let out2 = tape
        .constant(&q)
        .causal_attention(tape.constant(&k2), tape.constant(&v2), 1, 2)
        .unwrap();
    assert_eq!(out.values()[..(l - 1) * d], out2.values()[..(l - 1) * d]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..12), 1..6)) {
        let cols = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
        let tape = Tape::new();
        let y = tape.constant(&Tensor::from_rows(&rows).unwrap()).softmax_rows().unwrap();
        for r in y.values().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|p| *p >= 0.0));
        }
    }
}
