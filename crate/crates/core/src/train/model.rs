use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::ParamSet;
use crate::objectives::{HeadConfig, ProjectionHead};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{ViTConfig, ViTState};

use super::optim::{ema_update, AdamW};
use super::schedule::layer_lr;

/// Backbone plus the two projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub backbone: ViTState<S>,
    pub dino_head: ProjectionHead<S>,
    pub ibot_head: ProjectionHead<S>,
}

/// Graph handles of a bound [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: Vec<Var>,
    pub dino_head: Vec<Var>,
    pub ibot_head: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    pub fn init(vit: ViTConfig, dino: HeadConfig, ibot: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = ViTState::init(vit, rng)?;
        let d = backbone.config.embed_dim;
        Ok(Model { dino_head: ProjectionHead::init(d, dino, rng)?, ibot_head: ProjectionHead::init(d, ibot, rng)?, backbone })
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.params.bind(g, trainable),
            dino_head: self.dino_head.params.bind(g, trainable),
            ibot_head: self.ibot_head.params.bind(g, trainable),
        }
    }

    pub fn parts(&self) -> [&ParamSet<S>; 3] {
        [&self.backbone.params, &self.dino_head.params, &self.ibot_head.params]
    }

    pub fn parts_mut(&mut self) -> [&mut ParamSet<S>; 3] {
        [&mut self.backbone.params, &mut self.dino_head.params, &mut self.ibot_head.params]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.is_finite())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<S>)> {
        let mut out = self.backbone.params.to_named(&format!("{prefix}backbone."));
        out.extend(self.dino_head.params.to_named(&format!("{prefix}dino_head.")));
        out.extend(self.ibot_head.params.to_named(&format!("{prefix}ibot_head.")));
        out
    }

    pub fn load_named(&mut self, prefix: &str, named: &[(String, Tensor<S>)]) -> Result<()> {
        self.backbone.params.load_named(&format!("{prefix}backbone."), named)?;
        self.dino_head.params.load_named(&format!("{prefix}dino_head."), named)?;
        self.ibot_head.params.load_named(&format!("{prefix}ibot_head."), named)
    }

    /// Per-tensor learning rates with layer-wise decay; heads sit at the top.
    pub fn learning_rates(&self, lr: f64, decay: f64) -> [Vec<f64>; 3] {
        let top = self.backbone.config.depth + 1;
        let bb = (0..self.backbone.params.len())
            .map(|i| layer_lr(lr, decay, top, self.backbone.param_depth(i)))
            .collect();
        [bb, vec![lr; self.dino_head.params.len()], vec![lr; self.ibot_head.params.len()]]
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> [Vec<bool>; 3] {
        self.parts().map(|p| {
            (0..p.len()).map(|i| p.name(i).ends_with(".weight") && p.get(i).rank() == 2).collect()
        })
    }

    pub fn ema_from(&mut self, student: &Model<S>, m: f64) -> Result<()> {
        for (t, s) in self.parts_mut().into_iter().zip(student.parts()) {
            ema_update(t, s, m)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { backbone: self.backbone.cast(), dino_head: self.dino_head.cast(), ibot_head: self.ibot_head.cast() }
    }
}

/// AdamW state for the three parameter groups of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptimizer<S: Scalar = f32> {
    pub groups: [AdamW<S>; 3],
}

impl<S: Scalar> ModelOptimizer<S> {
    pub fn new(model: &Model<S>) -> Self {
        ModelOptimizer { groups: model.parts().map(AdamW::new) }
    }

    pub fn named(&self, prefix: &str, model: &Model<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (gi, (opt, p)) in self.groups.iter().zip(model.parts()).enumerate() {
            for i in 0..p.len() {
                out.push((format!("{prefix}{gi}.m.{}", p.name(i)), opt.m[i].clone()));
                out.push((format!("{prefix}{gi}.v.{}", p.name(i)), opt.v[i].clone()));
            }
        }
        out
    }

    pub fn load_named(&mut self, prefix: &str, model: &Model<S>, named: &[(String, Tensor<S>)], t: u64) -> Result<()> {
        for (gi, (opt, p)) in self.groups.iter_mut().zip(model.parts()).enumerate() {
            let mut m = ParamSet::new();
            let mut v = ParamSet::new();
            for i in 0..p.len() {
                m.push(format!("{gi}.m.{}", p.name(i)), opt.m[i].clone());
                v.push(format!("{gi}.v.{}", p.name(i)), opt.v[i].clone());
            }
            m.load_named(prefix, named)?;
            v.load_named(prefix, named)?;
            opt.m = m.tensors().to_vec();
            opt.v = v.tensors().to_vec();
            opt.t = t;
        }
        Ok(())
    }
}
