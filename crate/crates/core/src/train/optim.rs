use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// One update. `lrs[i]` and `decay[i]` are per-tensor; decay multiplies `lr * wd`.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Vec<S>], lrs: &[f64], wd: f64, decay: &[bool]) -> Result<()> {
        let n = params.len();
        if grads.len() != n || lrs.len() != n || decay.len() != n || self.m.len() != n {
            return Err(Error::invalid("adamw", "parameter, gradient and state counts differ"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let (one, eps) = (S::one(), S::c(self.eps));
        for i in 0..n {
            let p = params.get_mut(i).data_mut();
            if grads[i].len() != p.len() {
                return Err(Error::invalid("adamw", format!("gradient {i} has wrong length")));
            }
            let step = S::c(lrs[i] / bc1);
            let shrink = S::c(if decay[i] { 1.0 - lrs[i] * wd } else { 1.0 });
            let inv_bc2 = S::c(1.0 / bc2);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] = p[j] * shrink - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update<S: Scalar>(teacher: &mut ParamSet<S>, student: &ParamSet<S>, m: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::invalid("ema_update", "teacher and student parameter trees differ"));
    }
    let (a, b) = (S::c(m), S::c(1.0 - m));
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}
