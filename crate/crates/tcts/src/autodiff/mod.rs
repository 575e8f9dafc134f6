//! Minimal reverse-mode differentiation over dense f64 tensors, plus a
//! finite-difference checker for everything built on top of it.

mod tape;
mod tensor;

pub use tape::{AdError, GradMap, Tape, ValueId, LOG_FLOOR};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Compares the analytic gradient of `f` against central finite
/// differences on a random subsample of at most `max_coords` coordinates,
/// returning the maximum relative error
/// `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`.
///
/// `f` evaluates the scalar objective at the given parameters and returns
/// its value together with the tape gradient.
pub fn grad_check<E, F>(
    params: &ParamMap,
    mut f: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, E>
where
    F: FnMut(&ParamMap) -> Result<(f64, GradMap), E>,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step out of range"
    );
    let (_, grads) = f(params)?;

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut max_err = 0.0f64;
    for (name, i) in coords {
        let g_ad = grads[&name].data()[i];
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
        let g_fd = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * eps);
        let err = (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs() + g_fd.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn glu_with_zero_gate_halves_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -4.0, 0.0, 0.0]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0]);
    }

    #[test]
    fn linear_loss_has_unit_gradients() {
        // loss = sum(x . W) with x = [1,1]: dL/dW is all ones.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let w = tape.param("w", Tensor::matrix(2, 3, vec![0.5; 6]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::scalar(0.0));
        let y = tape.sigmoid(w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].item(), 0.25);
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::scalar(2.0));
        let _unused = tape.param("unused", Tensor::vector(vec![1.0, 2.0]));
        let y = tape.mul(w, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].item(), 4.0);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.add(a, b),
            Err(AdError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        let b = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(tape.add(a, b), Err(AdError::NonFinite { .. })));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.3, -1.7, 2.9]));
            let w = tape.param("w", Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.1 - 0.4).collect()));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let p = tape.softmax(h).unwrap();
            let lp = tape.log(p).unwrap();
            let loss = tape.sum(lp).unwrap();
            (tape.value(loss).item(), tape.backward(loss).unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1["w"].data().iter().zip(g2["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grad_check_quadratic_is_exact_to_roundoff() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::scalar(3.0));
        let err = grad_check::<AdError, _>(
            &params,
            |p| {
                let mut tape = Tape::new();
                let w = tape.param("w", p["w"].clone());
                let sq = tape.mul(w, w)?;
                let loss = tape.sum(sq)?;
                Ok((tape.value(loss).item(), tape.backward(loss)?))
            },
            1e-5,
            200,
            7,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn grad_check_constant_function_is_zero() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::vector(vec![1.0, -2.0]));
        let err = grad_check::<AdError, _>(
            &params,
            |p| {
                let mut tape = Tape::new();
                let _w = tape.param("w", p["w"].clone());
                let c = tape.leaf(Tensor::scalar(5.0));
                let loss = tape.sum(c)?;
                Ok((tape.value(loss).item(), tape.backward(loss)?))
            },
            1e-5,
            200,
            7,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softmax_cross_entropy_composite() {
        let mut params = ParamMap::new();
        params.insert(
            "w".into(),
            Tensor::matrix(3, 4, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, -0.1, 0.6, -0.3, 0.05, 0.9]),
        );
        let err = grad_check::<AdError, _>(
            &params,
            |p| {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 1.5]));
                let w = tape.param("w", p["w"].clone());
                let logits = tape.matmul(x, w)?;
                let probs = tape.softmax(logits)?;
                let picked = tape.gather_row(probs, 2)?;
                let lp = tape.log(picked)?;
                let loss = tape.scale(lp, -1.0)?;
                Ok((tape.value(loss).item(), tape.backward(loss)?))
            },
            1e-5,
            200,
            11,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    /// Every op in the inventory against finite differences on random
    /// inputs in [-2, 2].
    #[test]
    fn all_ops_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };

        type Builder = fn(&mut Tape, ValueId) -> Result<ValueId, AdError>;
        let unary_cases: Vec<(&str, Vec<usize>, Builder)> = vec![
            ("sigmoid", vec![5], |t, x| t.sigmoid(x)),
            ("tanh", vec![5], |t, x| t.tanh(x)),
            ("softmax", vec![5], |t, x| t.softmax(x)),
            ("log", vec![5], |t, x| t.log(x)),
            ("glu", vec![6], |t, x| t.glu(x)),
            ("gather_vec", vec![5], |t, x| t.gather_row(x, 3)),
            ("gather_mat", vec![3, 4], |t, x| t.gather_row(x, 1)),
            ("scale", vec![5], |t, x| t.scale(x, -1.7)),
            ("sum", vec![5], |t, x| Ok(x)),
        ];
        for (name, shape, build) in unary_cases {
            let mut params = ParamMap::new();
            let len = shape.iter().product();
            params.insert("x".into(), Tensor::new(shape.clone(), draw(len)));
            let err = grad_check::<AdError, _>(
                &params,
                |p| {
                    let mut tape = Tape::new();
                    let x = tape.param("x", p["x"].clone());
                    let y = build(&mut tape, x)?;
                    // Weighted sum makes the incoming gradient non-uniform.
                    let w = tape.leaf(Tensor::new(
                        tape.value(y).shape().to_vec(),
                        (0..tape.value(y).len()).map(|i| 0.3 + 0.41 * i as f64).collect(),
                    ));
                    let prod = tape.mul(y, w)?;
                    let loss = tape.sum(prod)?;
                    Ok((tape.value(loss).item(), tape.backward(loss)?))
                },
                1e-5,
                200,
                13,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: err = {err}");
        }

        // Binary/variadic ops: matmul, add, mul, concat, stack_rows.
        let mut params = ParamMap::new();
        params.insert("a".into(), Tensor::new(vec![4], draw(4)));
        params.insert("b".into(), Tensor::new(vec![4, 3], draw(12)));
        params.insert("c".into(), Tensor::new(vec![3], draw(3)));
        let err = grad_check::<AdError, _>(
            &params,
            |p| {
                let mut tape = Tape::new();
                let a = tape.param("a", p["a"].clone());
                let b = tape.param("b", p["b"].clone());
                let c = tape.param("c", p["c"].clone());
                let mm = tape.matmul(a, b)?;
                let s = tape.add(mm, c)?;
                let m = tape.mul(s, c)?;
                let cat = tape.concat(&[m, c])?;
                let stacked = tape.stack_rows(&[cat, cat])?;
                let picked = tape.gather_row(stacked, 0)?;
                let loss = tape.sum(picked)?;
                Ok((tape.value(loss).item(), tape.backward(loss)?))
            },
            1e-5,
            200,
            17,
        )
        .unwrap();
        assert!(err < 1e-4, "composite: err = {err}");
    }

    #[test]
    fn softmax_sums_to_one_and_is_positive() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(logits));
            let y = tape.softmax(x).unwrap();
            let v = tape.value(y);
            assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(v.data().iter().all(|&p| p > 0.0));
        }
    }
}
