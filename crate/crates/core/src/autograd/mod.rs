//! Reverse-mode differentiation over dense `f32` matrices.
//!
//! Only the handful of operations the lifting networks need are
//! supported: affine maps, matrix products, per-sample graph mixing,
//! SiLU, elementwise add/multiply, column concatenation, reshape,
//! inverted dropout and mean-squared error.

pub mod checkpoint;
pub(crate) mod kernel;
mod param;
mod tape;
mod tensor;

pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{silu, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(n, s, d)| store.add(*n, Tensor::new(s.clone(), d.clone()).unwrap(), true).unwrap())
            .collect();
        (store, ids)
    }

    fn affine_out(w: Vec<f32>, b: Vec<f32>, x: Vec<f32>) -> Vec<f32> {
        let m = b.len();
        let n = x.len();
        let (store, ids) = store_with(&[("w", vec![m, n], w), ("b", vec![m], b)]);
        let mut tape = Tape::new(&store);
        let xv = tape.input(Tensor::new(vec![n], x).unwrap());
        let (wv, bv) = (tape.param(ids[0]), tape.param(ids[1]));
        let y = tape.affine(xv, wv, Some(bv)).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn affine_identity_zero_and_hand_cases() {
        assert_eq!(
            affine_out(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![3.0, 4.0]),
            vec![3.0, 4.0]
        );
        assert_eq!(
            affine_out(vec![0.0; 4], vec![1.0, 1.0], vec![-7.0, 2.5]),
            vec![1.0, 1.0]
        );
        assert_eq!(
            affine_out(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0], vec![1.0, 1.0]),
            vec![3.0, 7.0]
        );
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let (store, ids) = store_with(&[("w", vec![2, 3], vec![0.0; 6])]);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(vec![2]));
        let w = tape.param(ids[0]);
        let err = tape.affine(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(30.0) - 30.0).abs() < 1e-6);
        // 1 / (1 + e^-1)
        assert!((silu(1.0) - 0.731_058_6).abs() < 1e-6);
    }

    /// f64 oracle for `mean((W x + b - target)^2)`.
    fn affine_mse_f64(w: &[f64], b: &[f64], x: &[f64], target: &[f64]) -> f64 {
        let m = b.len();
        let n = x.len();
        (0..m)
            .map(|i| {
                let y: f64 = (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>() + b[i];
                (y - target[i]).powi(2)
            })
            .sum::<f64>()
            / m as f64
    }

    fn rel_err(a: &[f32], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
        num / den
    }

    #[test]
    fn affine_mse_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (3, 4);
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
        let (w, b, x, t) = (draw(m * n), draw(m), draw(n), draw(m));
        let (mut store, ids) = store_with(&[("w", vec![m, n], w.clone()), ("b", vec![m], b.clone())]);
        let grads = {
            let mut tape = Tape::new(&store);
            let xv = tape.input(Tensor::new(vec![n], x.clone()).unwrap());
            let tv = tape.input(Tensor::new(vec![m], t.clone()).unwrap());
            let (wv, bv) = (tape.param(ids[0]), tape.param(ids[1]));
            let y = tape.affine(xv, wv, Some(bv)).unwrap();
            let loss = tape.mse(y, tv).unwrap();
            tape.backward(loss, 1.0).unwrap()
        };
        store.accumulate(&grads);

        let up = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let (w64, b64, x64, t64) = (up(&w), up(&b), up(&x), up(&t));
        let h = 1e-3;
        let fd = |which: usize, len: usize| -> Vec<f64> {
            (0..len)
                .map(|i| {
                    let (mut wp, mut bp) = (w64.clone(), b64.clone());
                    let (mut wm, mut bm) = (w64.clone(), b64.clone());
                    if which == 0 {
                        wp[i] += h;
                        wm[i] -= h;
                    } else {
                        bp[i] += h;
                        bm[i] -= h;
                    }
                    (affine_mse_f64(&wp, &bp, &x64, &t64) - affine_mse_f64(&wm, &bm, &x64, &t64)) / (2.0 * h)
                })
                .collect()
        };
        assert!(rel_err(store.get(ids[0]).grad.data(), &fd(0, m * n)) < 1e-4);
        assert!(rel_err(store.get(ids[1]).grad.data(), &fd(1, m)) < 1e-4);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_and_double_backward_doubles() {
        let (mut store, ids) = store_with(&[("w", vec![1, 2], vec![0.5, -1.0]), ("unused", vec![2], vec![1.0, 2.0])]);
        let grads = {
            let mut tape = Tape::new(&store);
            let x = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
            let t = tape.input(Tensor::new(vec![1], vec![3.0]).unwrap());
            let w = tape.param(ids[0]);
            let y = tape.affine(x, w, None).unwrap();
            let loss = tape.mse(y, t).unwrap();
            tape.backward(loss, 1.0).unwrap()
        };
        store.accumulate(&grads);
        let once = store.get(ids[0]).grad.clone();
        store.accumulate(&grads);
        let twice = store.get(ids[0]).grad.clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(store.get(ids[1]).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let bogus = {
            let mut other = Tape::new(&store);
            other.input(Tensor::scalar(1.0))
        };
        assert!(matches!(tape.backward(bogus, 1.0), Err(crate::Error::Usage(_))));
        let x = tape.input(Tensor::scalar(1.0));
        let inference = Tape::inference(&store);
        assert!(inference.backward(x, 1.0).is_err());
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new(&store);
        let input: Vec<f32> = (0..16).map(|i| i as f32 - 4.0).collect();
        let x = tape.input(Tensor::new(vec![16], input.clone()).unwrap());
        let a = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(a).data(), &input[..]);
        let b = tape.dropout(x, 0.7, false, &mut rng).unwrap();
        assert_eq!(tape.value(b).data(), &input[..]);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(crate::Error::Parameter(_))
        ));
        let c = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        for (o, i) in tape.value(c).data().iter().zip(&input) {
            assert!(*o == 0.0 || *o == 2.0 * i);
        }
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Vec<f32> = (0..100_000).map(|i| 1.0 + (i % 7) as f32 * 0.25).collect();
        let mean_in: f64 = input.iter().map(|&v| v as f64).sum::<f64>() / input.len() as f64;
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![input.len()], input).unwrap());
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean_out: f64 = tape.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((mean_out / mean_in - 1.0).abs() < 0.02, "{mean_out} vs {mean_in}");
    }

    #[test]
    fn dropout_gradient_is_the_mask() {
        let (mut store, ids) = store_with(&[("x", vec![1, 8], (0..8).map(|i| i as f32 * 0.3 - 1.0).collect())]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (grads, out) = {
            let mut tape = Tape::new(&store);
            let x = tape.param(ids[0]);
            let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
            let zero = tape.input(Tensor::zeros(vec![1, 8]));
            let loss = tape.mse(y, zero).unwrap();
            let out = tape.value(y).data().to_vec();
            (tape.backward(loss, 1.0).unwrap(), out)
        };
        store.accumulate(&grads);
        let xv = store.value(ids[0]).data().to_vec();
        for ((g, o), x) in store.get(ids[0]).grad.data().iter().zip(&out).zip(&xv) {
            // d/dx mean((m x)^2) = 2 m^2 x / n = 2 m * out / n
            let mask = if *o == 0.0 { 0.0 } else { o / x };
            assert!((g - 2.0 * mask * o / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_tape_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (store, ids) = store_with(&[("w", vec![3, 4], w), ("b", vec![3], vec![0.1, 0.2, 0.3])]);
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let run = |mut tape: Tape| {
            let xv = tape.input(x.clone());
            let (wv, bv) = (tape.param(ids[0]), tape.param(ids[1]));
            let y = tape.affine(xv, wv, Some(bv)).unwrap();
            let z = tape.silu(y);
            let c = tape.concat_cols(&[z, xv]).unwrap();
            tape.value(c).clone()
        };
        assert_eq!(run(Tape::new(&store)), run(Tape::inference(&store)));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(vec![2, 2], 1.0), false).unwrap();
        let h = store.add("h", Tensor::filled(vec![2, 3], 0.5), true).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let (av, hv) = (tape.param(a), tape.param(h));
            let y = tape.graph_mix(av, hv).unwrap();
            let zero = tape.input(Tensor::zeros(vec![2, 3]));
            let loss = tape.mse(y, zero).unwrap();
            tape.backward(loss, 1.0).unwrap()
        };
        assert!(grads.get(a).is_none());
        assert!(grads.get(h).is_some());
    }
}
