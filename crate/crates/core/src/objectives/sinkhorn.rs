use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Balanced soft assignment of `B` samples to `K` prototypes.
///
/// Starts from `exp(scores / temperature)` and alternates a column step
/// (every column sums to `B / K`) with a row step (every row sums to 1),
/// `n_iter` times. Computed in double precision.
pub fn sinkhorn_knopp<S: Scalar>(scores: &Tensor<S>, n_iter: usize, temperature: f64) -> Result<Tensor<S>> {
    let (q, _) = sinkhorn_trace(scores, n_iter, temperature)?;
    Ok(q)
}

/// Same as [`sinkhorn_knopp`], also returning `max_j |colsum_j - B/K|` after each row step.
pub fn sinkhorn_trace<S: Scalar>(scores: &Tensor<S>, n_iter: usize, temperature: f64) -> Result<(Tensor<S>, Vec<f64>)> {
    if n_iter == 0 {
        return Err(Error::invalid("sinkhorn_knopp", "n_iter must be at least 1"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("sinkhorn_knopp", "temperature must be positive"));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("sinkhorn_knopp".into()));
    }
    let (b, k) = scores.rows_cols();
    let max = scores.data().iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores.data().iter().map(|v| ((v.f64() - max) / temperature).exp()).collect();
    let col_target = b as f64 / k as f64;
    let mut trace = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        for j in 0..k {
            let s: f64 = (0..b).map(|i| q[i * k + j]).sum();
            let f = if s > 0.0 { col_target / s } else { 0.0 };
            (0..b).for_each(|i| q[i * k + j] *= f);
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let dev = (0..k)
            .map(|j| ((0..b).map(|i| q[i * k + j]).sum::<f64>() - col_target).abs())
            .fold(0.0, f64::max);
        trace.push(dev);
    }
    let out = Tensor::new(scores.shape().to_vec(), q.into_iter().map(S::c).collect())?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scores_give_uniform() {
        let q = sinkhorn_knopp(&Tensor::<f64>::zeros(vec![3, 5]), 3, 0.1).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_hand_iteration() {
        let s = Tensor::from_rows(&[vec![4f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let q = sinkhorn_knopp(&s, 1, 1.0).unwrap();
        // exp -> [[4,1],[1,1]]; columns -> [[.8,.5],[.2,.5]]; rows -> divide by 1.3 and 0.7
        let want = [0.8 / 1.3, 0.5 / 1.3, 0.2 / 0.7, 0.5 / 0.7];
        for (a, b) in q.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(q.data()[0] > q.data()[1]);
    }

    #[test]
    fn rejects_non_finite() {
        let s = Tensor::new(vec![1, 2], vec![f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(sinkhorn_knopp(&s, 1, 1.0), Err(Error::NonFinite(_))));
    }
}
