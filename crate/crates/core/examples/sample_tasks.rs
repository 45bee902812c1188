//! Euler sampling under each task: only the streams a task generates are
//! returned, and image-conditioned tasks keep the given first frame.

use avdit::flow::{euler_sample, Conditions, SamplerConfig};
use avdit::mmdit::{MMDiT, ModelConfig};
use avdit::numerics::Tensor;
use avdit::tasks::{TaskKind, TaskSpec};

fn main() {
    let mut model = MMDiT::<f32>::new(ModelConfig::tiny(16, 2), 0).unwrap();
    model.perturb(1, 0.05);
    let cond = Conditions { video_caption: vec![1, 2], audio_caption: vec![3], video_grid: (3, 2, 2), audio_len: 6 };
    let frame = Tensor::<f32>::full(&[2, 2, 3], 0.5);
    for kind in TaskKind::ALL {
        let image = kind.image_conditioned().then(|| frame.clone());
        let task = TaskSpec::new(kind, image).unwrap();
        let out = euler_sample(&model, &cond, &task, &SamplerConfig::uniform(10, 4).unwrap()).unwrap();
        let shape = |t: &Option<Tensor<f32>>| t.as_ref().map(|t| format!("{:?}", t.shape())).unwrap_or("-".into());
        print!("{kind:>5}: video {:<14} audio {:<8}", shape(&out.video), shape(&out.audio));
        if let Some(v) = &out.video {
            print!(" first frame kept: {}", v.data()[..12] == *frame.data());
        }
        println!();
    }
}
