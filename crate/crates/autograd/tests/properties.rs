use lotn_autograd::{bilstm, ops, BiLstmParams, Tape, Tensor};
use proptest::collection::vec as pvec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, vals: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, vals).unwrap()
}

proptest! {
    #[test]
    fn matmul_matches_naive_triple_loop(
        m in 1usize..6, k in 1usize..6, n in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(vec![m, k], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(vec![k, n], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let c = ops::matmul(&tape, &a, &b).unwrap().to_vec();

        let (av, bv) = (a.to_vec(), b.to_vec());
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += av[i * k + l] * bv[l * n + j];
                }
                prop_assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_unmasked_rows_sum_to_one(
        logits in pvec(-30.0f64..30.0, 1..24),
        mask_bits in pvec(any::<bool>(), 24),
        cols in 1usize..6,
    ) {
        let rows = logits.len().div_ceil(cols);
        let mut vals = logits.clone();
        vals.resize(rows * cols, 0.0);
        // force one valid entry per row so the mask is legal
        let mut mask: Vec<bool> = (0..rows * cols).map(|i| mask_bits[i % mask_bits.len()]).collect();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let tape = Tape::new();
        let y = ops::softmax_rows(&tape, &tensor(vec![rows, cols], vals), Some(&mask))
            .unwrap()
            .to_vec();
        for r in 0..rows {
            let s: f64 = (0..cols).filter(|&c| mask[r * cols + c]).map(|c| y[r * cols + c]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(y[r * cols + c], 0.0);
                }
                prop_assert!(y[r * cols + c] >= 0.0);
            }
        }
    }

    #[test]
    fn backward_is_linear_over_loss_terms(w_vals in pvec(-2.0f64..2.0, 1..8)) {
        let joint = {
            let w = Tensor::parameter(vec![w_vals.len()], w_vals.clone()).unwrap();
            let tape = Tape::new();
            let l1 = ops::sum(&tape, &ops::mul(&tape, &w, &w).unwrap());
            let l2 = ops::sum(&tape, &ops::sigmoid(&tape, &w));
            let loss = ops::add(&tape, &l1, &l2).unwrap();
            tape.backward(&loss).unwrap();
            w.grad().unwrap()
        };
        let separate = {
            let w = Tensor::parameter(vec![w_vals.len()], w_vals.clone()).unwrap();
            let tape = Tape::new();
            let l1 = ops::sum(&tape, &ops::mul(&tape, &w, &w).unwrap());
            tape.backward(&l1).unwrap();
            let tape2 = Tape::new();
            let l2 = ops::sum(&tape2, &ops::sigmoid(&tape2, &w));
            tape2.backward(&l2).unwrap();
            w.grad().unwrap()
        };
        for (a, b) in joint.iter().zip(&separate) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        rows in 1usize..5,
        w1 in 1usize..5,
        w2 in 1usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(vec![rows, w1], -3.0, 3.0, &mut rng);
        let b = Tensor::uniform(vec![rows, w2], -3.0, 3.0, &mut rng);
        let tape = Tape::new();
        let cat = ops::concat_last(&tape, &[&a, &b]).unwrap();
        prop_assert_eq!(ops::slice_cols(&tape, &cat, 0, w1).unwrap().to_vec(), a.to_vec());
        prop_assert_eq!(ops::slice_cols(&tape, &cat, w1, w2).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn lstm_outputs_stay_bounded(seed in 0u64..500, len in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = BiLstmParams::init(3, 4, &mut rng);
        let steps: Vec<Tensor> = (0..len)
            .map(|_| Tensor::uniform(vec![2, 3], -50.0, 50.0, &mut rng))
            .collect();
        let mask = vec![vec![true, true]; len];
        let tape = Tape::new();
        let out = bilstm(&tape, &p, &steps, &mask).unwrap();
        for h in out {
            prop_assert!(h.to_vec().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn dropout_preserves_or_zeroes(seed in 0u64..500, p in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(vec![4, 5], 0.5, 1.5, &mut rng);
        let tape = Tape::new();
        let y = ops::dropout(&tape, &x, p, true, &mut rng).unwrap().to_vec();
        let xv = x.to_vec();
        let scale = 1.0 / (1.0 - p);
        for (yi, xi) in y.iter().zip(&xv) {
            prop_assert!(*yi == 0.0 || (yi - xi * scale).abs() < 1e-12);
        }
    }
}
