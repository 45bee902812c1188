//! Flow matching on an 8-mode 2-D Gaussian mixture: train a small MLP
//! velocity field, integrate it with Euler steps and compare the mode
//! histogram to uniform.
//!
//! `FLOW_GMM_STEPS` overrides the number of training steps.

use avdit::flow::toy::{GaussianMixture, MlpVelocity, ToyTrainConfig};
use avdit::flow::SamplerConfig;

fn main() {
    let steps = std::env::var("FLOW_GMM_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let target = GaussianMixture::ring(8, 4.0, 0.3);
    let mut model = MlpVelocity::<f32>::new(128, 3, 0).unwrap();
    let losses = model.train(&target, &ToyTrainConfig { steps, ..ToyTrainConfig::default() }).unwrap();
    let head: f64 = losses.iter().take(50).sum::<f64>() / 50f64.min(losses.len() as f64);
    let tail: f64 = losses.iter().rev().take(50).sum::<f64>() / 50f64.min(losses.len() as f64);
    println!("loss {head:.3} -> {tail:.3} over {steps} steps");

    let samples = model.sample(4000, &SamplerConfig::uniform(100, 1).unwrap()).unwrap();
    let report = target.assess(&samples);
    println!("mode counts {:?}", report.counts);
    println!("total variation vs uniform {:.3}", report.total_variation);
    println!("worst mode-mean error {:.3}", report.max_mean_error());
}
