use apn_core::rng::rng_from_seed;
use apn_core::{DType, Tape, Tensor, Var};
use proptest::prelude::*;

fn tensor(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, 1.0, DType::F64, &mut rng_from_seed(seed)).unwrap()
}

/// `Σ relu(x W) ⊙ c` followed by a cross-entropy on a mean-pooled row,
/// enough ops to exercise the common kernels.
fn two_losses(tape: &Tape, x: Var, w: Var) -> (Var, Var) {
    let h = tape.relu(tape.matmul(x, w).unwrap()).unwrap();
    let l1 = tape.sum(tape.mul(h, h).unwrap()).unwrap();
    let pooled = tape.mean_axis(h, 0).unwrap();
    let k = tape.dims(pooled)[0];
    let l2 = tape.cross_entropy(pooled, k - 1).unwrap();
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let t = tensor(&[rows, cols], seed).map(|v| 10.0 * v + shift);
        let tape = Tape::new(DType::F64);
        let x = tape.constant(t).unwrap();
        let s = tape.value(tape.softmax_lastdim(x).unwrap()).clone();
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_is_linear(n in 1usize..4, k in 1usize..5, m in 2usize..5, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grads = |wa: f64, wb: f64| {
            let tape = Tape::new(DType::F64);
            let x = tape.input(tensor(&[n, k], seed)).unwrap();
            let w = tape.input(tensor(&[k, m], seed ^ 1)).unwrap();
            let (l1, l2) = two_losses(&tape, x, w);
            let total = tape.add(tape.scale(l1, wa).unwrap(), tape.scale(l2, wb).unwrap()).unwrap();
            let g = tape.backward(total).unwrap();
            let pick = |v: Var, d: &[usize]| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(d, DType::F64).unwrap());
            (pick(x, &[n, k]), pick(w, &[k, m]))
        };
        let (ga, gb, gc) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for ((one, two), mix) in [(&ga.0, &gb.0), (&ga.1, &gb.1)].into_iter().zip([&gc.0, &gc.1]) {
            for i in 0..mix.len() {
                let want = a * one.data()[i] + b * two.data()[i];
                prop_assert!((mix.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic(seed in any::<u64>(), p in 0.0f64..0.9) {
        let run = || {
            let tape = Tape::new(DType::F64);
            let x = tape.input(tensor(&[3, 4], seed)).unwrap();
            let d = tape.dropout(x, p, true, &mut rng_from_seed(seed)).unwrap();
            let y = tape.softmax_lastdim(d).unwrap();
            let l = tape.sum(tape.mul(y, d).unwrap()).unwrap();
            let v = tape.scalar_value(l).unwrap();
            (v.to_bits(), tape.backward(l).unwrap().get(x).cloned())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0, b.0);
        prop_assert!(a.1.unwrap().bitwise_eq(&b.1.unwrap()));
    }

    #[test]
    fn matmul_matches_naive_product(n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let (a, b) = (tensor(&[n, k], seed), tensor(&[k, m], seed ^ 7));
        let tape = Tape::new(DType::F64);
        let out = tape.matmul(tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap()).unwrap();
        let got = tape.value(out).clone();
        prop_assert_eq!(got.dims(), &[n, m][..]);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * m + j]).sum();
                prop_assert!((got.data()[i * m + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..4, d in 2usize..9, seed in any::<u64>()) {
        let x = tensor(&[rows, d], seed).map(|v| 3.0 * v + 1.5);
        let tape = Tape::new(DType::F64);
        let g = tape.constant(Tensor::full(&[d], 1.0, DType::F64).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(&[d], DType::F64).unwrap()).unwrap();
        let y = tape.value(tape.layer_norm(tape.constant(x).unwrap(), g, b, 1e-12).unwrap()).clone();
        for r in 0..rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn slice_pieces_concat_back(t in 2usize..6, d in 1usize..4, cut in 1usize..5, seed in any::<u64>()) {
        let cut = cut.min(t - 1);
        let x = tensor(&[t, d], seed);
        let tape = Tape::new(DType::F64);
        let v = tape.constant(x.clone()).unwrap();
        let head = tape.slice(v, 0, 0, cut).unwrap();
        let tail = tape.slice(v, 0, cut, t - cut).unwrap();
        let back = tape.concat(&[head, tail], 0).unwrap();
        prop_assert!(tape.value(back).bitwise_eq(&x));
    }

    #[test]
    fn f32_values_stay_representable(seed in any::<u64>()) {
        let tape = Tape::new(DType::F32);
        let x = tape.input(tensor(&[2, 3], seed).to_dtype(DType::F32)).unwrap();
        let w = tape.input(tensor(&[3, 2], seed ^ 3).to_dtype(DType::F32)).unwrap();
        let (l1, _) = two_losses(&tape, x, w);
        let g = tape.backward(l1).unwrap();
        let exact = |t: &Tensor| t.data().iter().all(|v| (*v as f32) as f64 == *v);
        prop_assert!(exact(&tape.value(l1)));
        if let Some(gx) = g.get(x) {
            prop_assert!(exact(gx));
        }
    }
}

#[test]
fn dropout_keeps_the_expectation() {
    let tape = Tape::new(DType::F64);
    let x = tape.constant(Tensor::full(&[200, 50], 1.0, DType::F64).unwrap()).unwrap();
    let y = tape.dropout(x, 0.8, true, &mut rng_from_seed(3)).unwrap();
    let vals = tape.value(y).clone();
    assert!(vals.data().iter().all(|&v| v == 0.0 || (v - 5.0).abs() < 1e-12));
    let mean = vals.sum() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    let e = tape.dropout(x, 0.8, false, &mut rng_from_seed(3)).unwrap();
    assert!(tape.value(e).bitwise_eq(&tape.value(x)));
}

#[test]
fn unreachable_leaves_have_no_gradient() {
    let tape = Tape::new(DType::F64);
    let x = tape.input(Tensor::from_f64(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
    let p = tape.input(Tensor::from_f64(&[2], vec![1.0, 1.0]).unwrap()).unwrap();
    let z = tape.constant(Tensor::zeros(&[2], DType::F64).unwrap()).unwrap();
    let loss = tape.half_sq_dist(x, z, false).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(p).is_none());
    assert!(tape.backward(x).is_err());
}

#[test]
fn nonfinite_inputs_are_rejected() {
    let tape = Tape::new(DType::F64);
    let bad = Tensor::from_f64(&[1], vec![1.0]).unwrap().map(|_| f64::NAN);
    assert!(tape.input(bad).is_err());
}
