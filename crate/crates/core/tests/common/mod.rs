#![allow(dead_code)]

use gramssl_core::rng::{stream_rng, Stream};
use gramssl_core::{Graph, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-7;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream_rng(seed, Stream::Data, 77);
    Tensor::from_fn(shape.to_vec(), |_| lo + (hi - lo) * rng.gen::<f64>())
}

/// Worst relative error between analytic and central-difference gradients.
///
/// `build` records a scalar loss from leaves holding `inputs`. Elements whose
/// absolute discrepancy is below the floor count as exact.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    gradcheck_step(inputs, H, build)
}

/// `gradcheck` with an explicit finite-difference step.
pub fn gradcheck_step<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("grad").to_vec();
        for i in 0..inputs[ti].len() {
            let orig = vals[ti].data()[i];
            vals[ti].data_mut()[i] = orig + h;
            let up = eval(&vals);
            vals[ti].data_mut()[i] = orig - h;
            let down = eval(&vals);
            vals[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (analytic[i] - numeric).abs();
            if diff < ABS_FLOOR {
                continue;
            }
            worst = worst.max(diff / analytic[i].abs().max(numeric.abs()));
        }
    }
    worst
}

/// `sum(x * w)` for a fixed random weighting `w`, turning any tensor into a scalar probe.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = uniform(g.shape(x), -1.0, 1.0, 1000 + seed);
    let w = g.constant(w);
    let y = g.mul(x, w).expect("probe");
    g.sum(y)
}
