//! Tensor substrate: dense f64 arrays, an eager reverse-mode tape, the op
//! set the model needs, a seeded PRNG, and a finite-difference oracle.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, rel_err, DEFAULT_FD_STEP};
pub use rng::SplitMix64;
pub use tensor::{flat_index, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("embedding id {id} out of vocabulary range {vocab}")]
    LookupOutOfRange { id: usize, vocab: usize },
    #[error("backward expects a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ops::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![v.len()], v.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = matmul(&tape, &i2, &a).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]);
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&tape, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_hand_value() {
        // grad of sum(a·b) wrt a at a=[[1,1]], b=[[2],[5]] → [[2,5]]
        let tape = Tape::new();
        let a = Tensor::param(vec![1, 2], vec![1.0, 1.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![2.0, 5.0]);
        let y = matmul(&tape, &a, &b).unwrap();
        let loss = sum_all(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let a = Tensor::param(vec![1, 2], vec![1.0, 1.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![2.0, 5.0]);
        let err = finite_diff_check(
            |tape, a| {
                let y = matmul(tape, a, &b).unwrap();
                sum_all(tape, &y)
            },
            &a,
            1e-5,
        );
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let tape = Tape::new();
        let y = softmax_lastdim(&tape, &t1(&[1.0, 1.0]));
        assert!((y.to_vec()[0] - 0.5).abs() < 1e-15);
        let big = softmax_lastdim(&tape, &t1(&[1000.0, 1000.0]));
        assert!((big.to_vec()[0] - 0.5).abs() < 1e-15);
        let huge = softmax_lastdim(&tape, &t1(&[1e6, -1e6]));
        assert!(huge.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_derived_case() {
        let tape = Tape::new();
        let y = softmax_lastdim(&tape, &t1(&[0.0, 3f64.ln()]));
        let v = y.to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_randomized() {
        let mut rng = SplitMix64::new(99);
        let tape = Tape::new();
        for _ in 0..100 {
            let vals: Vec<f64> = (0..8)
                .map(|_| (rng.next_f64() - 0.5) * 2e6)
                .collect();
            let y = softmax_lastdim(&tape, &Tensor::from_vec(vec![2, 4], vals));
            let v = y.to_vec();
            for r in 0..2 {
                let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn sigmoid_cases() {
        let tape = Tape::new();
        let y = sigmoid(&tape, &t1(&[0.0, 1e6, 3f64.ln()]));
        let v = y.to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let gamma1 = t1(&[1.0, 1.0, 1.0]);
        let beta0 = t1(&[0.0, 0.0, 0.0]);
        // zero variance collapses to beta
        let y = layer_norm_core(&tape, &t1(&[5.0, 5.0, 5.0]), &gamma1, &beta0, 1e-5);
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-6));
        // direct formula with eps → 0
        let y = layer_norm_core(&tape, &t1(&[1.0, 2.0, 3.0]), &gamma1, &beta0, 1e-15);
        let v = y.to_vec();
        assert!((v[0] + 1.224744871).abs() < 1e-6, "{v:?}");
        assert!(v[1].abs() < 1e-9);
        assert!((v[2] - 1.224744871).abs() < 1e-6);
        // gain zero
        let y = layer_norm_core(
            &tape,
            &t1(&[1.0, 2.0, 3.0]),
            &t1(&[0.0, 0.0, 0.0]),
            &t1(&[7.0, 7.0, 7.0]),
            1e-5,
        );
        assert_eq!(y.to_vec(), vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn gelu_and_mean_and_concat() {
        let tape = Tape::new();
        assert_eq!(gelu(&tape, &t1(&[0.0])).to_vec(), vec![0.0]);
        let m = Tensor::from_vec(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(mean_axis(&tape, &m, 0).to_vec(), vec![3.0, 5.0]);
        let c = concat_lastdim(&tape, &t1(&[1.0, 2.0]), &t1(&[3.0]));
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn embedding_lookup_bounds() {
        let tape = Tape::new();
        let table = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = embedding_lookup(&tape, &table, &[1, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 1.0, 2.0]);
        assert!(matches!(
            embedding_lookup(&tape, &table, &[2]),
            Err(NumericsError::LookupOutOfRange { id: 2, vocab: 2 })
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]);
        let loss = sum_all(&tape, &x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let sq = mul(&tape, &x, &x);
        let loss = sum_all(&tape, &sq);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad of (f+g) equals grad f + grad g
        let x0 = vec![0.3, -0.7, 1.4];
        let build_f = |tape: &Tape, x: &Tensor| {
            let s = sigmoid(tape, x);
            sum_all(tape, &s)
        };
        let build_g = |tape: &Tape, x: &Tensor| {
            let m = mul(tape, x, x);
            sum_all(tape, &m)
        };
        let xf = Tensor::param(vec![3], x0.clone());
        let tape = Tape::new();
        let l = build_f(&tape, &xf);
        tape.backward(&l).unwrap();
        let gf = xf.grad().unwrap();

        let xg = Tensor::param(vec![3], x0.clone());
        let tape = Tape::new();
        let l = build_g(&tape, &xg);
        tape.backward(&l).unwrap();
        let gg = xg.grad().unwrap();

        let xs = Tensor::param(vec![3], x0);
        let tape = Tape::new();
        let l = add(&tape, &build_f(&tape, &xs), &build_g(&tape, &xs));
        tape.backward(&l).unwrap();
        let gs = xs.grad().unwrap();
        for i in 0..3 {
            assert!((gs[i] - gf[i] - gg[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_roundtrip_bitwise() {
        let tape = Tape::new();
        let mut rng = SplitMix64::new(5);
        let vals: Vec<f64> = (0..24).map(|_| rng.next_normal()).collect();
        let x = Tensor::from_vec(vec![2, 3, 4], vals.clone());
        let y = reshape(&tape, &x, vec![6, 4]);
        let z = reshape(&tape, &y, vec![2, 3, 4]);
        assert!(z
            .to_vec()
            .iter()
            .zip(&vals)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn random_ops_match_finite_differences() {
        // every registered op, 100 seeded random small tensors
        let mut rng = SplitMix64::new(2024);
        for trial in 0..100 {
            let vals: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
            let x = Tensor::param(vec![2, 3], vals);
            let w_vals: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
            let w = Tensor::from_vec(vec![3, 2], w_vals);
            let gamma = Tensor::from_vec(vec![3], vec![1.1, 0.9, 1.3]);
            let beta = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.0]);
            let err = finite_diff_check(
                |tape, x| {
                    let a = layer_norm_core(tape, x, &gamma, &beta, 1e-5);
                    let b = gelu(tape, &a);
                    let c = matmul(tape, &b, &w).unwrap();
                    let d = softmax_lastdim(tape, &c);
                    let e = sigmoid(tape, &d);
                    let f = mean_axis(tape, &e, 0);
                    let g = concat_lastdim(tape, &f, &row(tape, &e, 0));
                    sum_all(tape, &mul(tape, &g, &g))
                },
                &x,
                // the layer-norm direction cancellation leaves some true
                // gradients near zero; a tiny step drowns them in roundoff
                1e-4,
            );
            assert!(err < 1e-4, "trial {trial}: err {err}");
        }
    }
}
