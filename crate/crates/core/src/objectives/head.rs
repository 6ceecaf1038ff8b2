use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{linear, trunc_normal, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Shape of a projection head: `in -> hidden -> hidden -> bottleneck`, then prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub prototype_count: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden_dim: 256, bottleneck_dim: 64, prototype_count: 128 }
    }
}

/// MLP + L2 bottleneck + cosine prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<S: Scalar = f32> {
    pub config: HeadConfig,
    pub in_dim: usize,
    pub params: ParamSet<S>,
}

// parameter order inside `params`
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;
const PROTOS: usize = 6;

impl<S: Scalar> ProjectionHead<S> {
    pub fn init(in_dim: usize, config: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.prototype_count < 2 || config.hidden_dim == 0 || config.bottleneck_dim == 0 || in_dim == 0 {
            return Err(Error::Config(format!("invalid head configuration {config:?}")));
        }
        let (h, b) = (config.hidden_dim, config.bottleneck_dim);
        let mut p = ParamSet::new();
        p.push("mlp.0.weight", trunc_normal(rng, &[in_dim, h], 0.02));
        p.push("mlp.0.bias", crate::Tensor::zeros(vec![h]));
        p.push("mlp.1.weight", trunc_normal(rng, &[h, h], 0.02));
        p.push("mlp.1.bias", crate::Tensor::zeros(vec![h]));
        p.push("mlp.2.weight", trunc_normal(rng, &[h, b], 0.02));
        p.push("mlp.2.bias", crate::Tensor::zeros(vec![b]));
        p.push("prototypes", trunc_normal(rng, &[config.prototype_count, b], 1.0));
        let mut head = ProjectionHead { config, in_dim, params: p };
        head.normalize_prototypes();
        Ok(head)
    }

    pub fn prototype_index(&self) -> usize {
        PROTOS
    }

    /// Rescale each prototype row to unit length.
    pub fn normalize_prototypes(&mut self) {
        let b = self.config.bottleneck_dim;
        for row in self.params.get_mut(PROTOS).data_mut().chunks_mut(b) {
            let n = row.iter().map(|&v| v * v).fold(S::zero(), |a, v| a + v).sqrt();
            if n > S::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Prototype scores (cosine similarities) for features `x: [n, in_dim]`.
    pub fn forward(&self, g: &mut Graph<S>, vars: &[Var], x: Var) -> Result<Var> {
        if g.shape(x).get(1) != Some(&self.in_dim) {
            return Err(Error::shape("head", &[0, self.in_dim], g.shape(x)));
        }
        let h = linear(g, x, vars[W1], Some(vars[B1]))?;
        let h = g.gelu(h);
        let h = linear(g, h, vars[W2], Some(vars[B2]))?;
        let h = g.gelu(h);
        let z = linear(g, h, vars[W3], Some(vars[B3]))?;
        let z = g.l2_normalize(z, S::c(1e-6))?;
        g.matmul_nt(z, vars[PROTOS])
    }

    pub fn cast<T: Scalar>(&self) -> ProjectionHead<T> {
        ProjectionHead { config: self.config, in_dim: self.in_dim, params: self.params.cast() }
    }
}
