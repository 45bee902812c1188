//! Named finite-difference checks over every differentiable operation and
//! a small full model, shared by the `gradcheck` command and the tests.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mmdit::{MMDiT, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, Graph, RotaryTables, Tensor, Var};
use crate::synthdata::SynthSample;
use crate::tasks::{overall_loss_graph, BatchItem, FlowDraw, LossWeights, TaskKind, TaskSpec};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type CheckFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CheckFn,
}

impl GradCase {
    fn new(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { name: name.to_string(), inputs, f: Box::new(f) }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(&self.f, &self.inputs, EPS, TOL)
    }
}

/// Random smooth readout so every output element reaches the loss.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One case per differentiable operation (attention twice: unmasked and
/// masked).
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let y = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let row = Tensor::<f64>::randn(&[4], &mut r);
    let a = Tensor::<f64>::randn(&[3, 4], &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], &mut r);
    let bias = Tensor::<f64>::randn(&[2], &mut r);
    let table = Tensor::<f64>::randn(&[5, 3], &mut r);
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[5, 2, 4], &mut r)).collect();
    let angles = [0.3, 1.1, -0.4, 2.0, 0.7, -1.3, 0.05, 2.6, -2.2, 0.9];
    let rot = Rc::new(RotaryTables {
        tokens: 5,
        pairs: 2,
        cos: angles.iter().map(|a: &f64| a.cos()).collect(),
        sin: angles.iter().map(|a: &f64| a.sin()).collect(),
    });
    let xy = vec![x.clone(), y.clone()];
    let xr = vec![x.clone(), row.clone()];
    let x1 = vec![x.clone()];
    vec![
        GradCase::new("add", xy.clone(), |g, v| {
            let s = g.add(v[0], v[1])?;
            readout(g, s, 1)
        }),
        GradCase::new("sub", xr.clone(), |g, v| {
            let s = g.sub(v[0], v[1])?;
            readout(g, s, 2)
        }),
        GradCase::new("mul", xr.clone(), |g, v| {
            let s = g.mul(v[0], v[1])?;
            readout(g, s, 3)
        }),
        GradCase::new("scale", x1.clone(), |g, v| {
            let s = g.scale(v[0], -0.7);
            readout(g, s, 4)
        }),
        GradCase::new("square", x1.clone(), |g, v| {
            let s = g.square(v[0]);
            readout(g, s, 5)
        }),
        GradCase::new("gelu", x1.clone(), |g, v| {
            let s = g.gelu(v[0]);
            readout(g, s, 6)
        }),
        GradCase::new("silu", x1.clone(), |g, v| {
            let s = g.silu(v[0]);
            readout(g, s, 7)
        }),
        GradCase::new("matmul", vec![a.clone(), b.clone()], |g, v| {
            let s = g.matmul(v[0], v[1])?;
            readout(g, s, 8)
        }),
        GradCase::new("linear", vec![x.clone(), b.clone(), bias], |g, v| {
            let s = g.linear(v[0], v[1], Some(v[2]))?;
            readout(g, s, 9)
        }),
        GradCase::new("softmax", x1.clone(), |g, v| {
            let s = g.softmax(v[0], 1)?;
            readout(g, s, 10)
        }),
        GradCase::new("rms_norm", xr, |g, v| {
            let s = g.rms_norm(v[0], v[1], 1e-5)?;
            readout(g, s, 11)
        }),
        GradCase::new("concat", xy, |g, v| {
            let s = g.concat(&[v[0], v[1]], 2)?;
            readout(g, s, 12)
        }),
        GradCase::new("slice", x1.clone(), |g, v| {
            let s = g.slice(v[0], 1, 1, 2)?;
            readout(g, s, 13)
        }),
        GradCase::new("split", x1.clone(), |g, v| {
            let parts = g.split(v[0], &[1, 3], 2)?;
            let p = readout(g, parts[0], 14)?;
            let q = readout(g, parts[1], 15)?;
            g.add(p, q)
        }),
        GradCase::new("reshape", x1.clone(), |g, v| {
            let s = g.reshape(v[0], &[6, 4])?;
            readout(g, s, 16)
        }),
        GradCase::new("sum", x1.clone(), |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        }),
        GradCase::new("mean", x1, |g, v| {
            let s = g.square(v[0]);
            Ok(g.mean(s))
        }),
        GradCase::new("embedding", vec![table], |g, v| {
            let s = g.embedding(v[0], &[4, 0, 4, 2])?;
            readout(g, s, 17)
        }),
        GradCase::new("rope", vec![qkv[0].clone()], move |g, v| {
            let s = g.rope(v[0], rot.clone())?;
            readout(g, s, 18)
        }),
        GradCase::new("attention", qkv.clone(), |g, v| {
            let s = g.attention(v[0], v[1], v[2], None)?;
            readout(g, s, 19)
        }),
        GradCase::new("attention_masked", qkv, |g, v| {
            let s = g.attention(v[0], v[1], v[2], Some(&[true, false, true, true, false]))?;
            readout(g, s, 20)
        }),
    ]
}

/// Loss of a `layers`-deep, width-`d_model` model over a T2AV and an I2V
/// item, differentiated with respect to every parameter.
pub fn model_case(d_model: usize, layers: usize, seed: u64) -> Result<GradCase> {
    let cfg = ModelConfig::tiny(d_model, layers);
    let mut model = MMDiT::<f64>::new(cfg, seed)?;
    // Zero-initialized maps would leave most gradients identically zero.
    model.perturb(seed + 1, 0.2);
    let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
    let sample = SynthSample {
        events: vec![0, 1],
        video_latent: Tensor::randn(&[2, 2, 2, 3], &mut r),
        audio_latent: Tensor::randn(&[4, 2], &mut r),
        video_caption: vec![1, 4, 7],
        audio_caption: vec![2, 9],
        quality: 1.0,
    };
    let frame = Tensor::new(&[2, 2, 3], sample.video_latent.data()[..12].to_vec())?;
    let draws: Vec<FlowDraw<f64>> = (0..2).map(|_| FlowDraw::for_sample(&mut r, &sample)).collect();
    let inputs = model.params().tensors().to_vec();
    Ok(GradCase::new(&format!("mmdit_{layers}layer_d{d_model}"), inputs, move |g, p| {
        let batch = [
            BatchItem { sample: &sample, task: TaskSpec::text(TaskKind::T2AV)?, draw: draws[0].clone() },
            BatchItem { sample: &sample, task: TaskSpec::new(TaskKind::I2V, Some(frame.clone()))?, draw: draws[1].clone() },
        ];
        overall_loss_graph(g, &model, p, &batch, &LossWeights::default())
    }))
}

/// A custom op whose backward rule is wrong on purpose (it returns `2x`
/// for `d/dx x³`); must fail.
pub fn faulty_case() -> GradCase {
    let x = Tensor::<f64>::from_f64(&[3], &[0.5, -1.2, 2.0]).expect("sized");
    GradCase::new("faulty_cube", vec![x], |g, v| {
        let value = g.value(v[0]).map(|a| a * a * a);
        let y = g.custom(&[v[0]], value, Box::new(|ins, up| vec![ins[0].zip_map(up, |a, u| 2.0 * a * u).expect("same shape")]));
        Ok(g.sum(y))
    })
}

/// One `(name, result)` per case, in order.
pub fn run_cases(cases: &[GradCase]) -> Vec<(String, Result<GradCheckReport>)> {
    cases.iter().map(|c| (c.name.clone(), c.run())).collect()
}
