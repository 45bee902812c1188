//! With the T2V mask, the joint model ignores the audio streams entirely:
//! its video output equals a forward pass with no audio at all.

use avdit::mmdit::{MMDiT, ModelConfig, ModelInput};
use avdit::numerics::Tensor;
use avdit::tasks::TaskKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut model = MMDiT::<f64>::new(ModelConfig::tiny(16, 2), 1).unwrap();
    model.perturb(2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = ModelInput {
        video: Some(Tensor::randn(&[2, 2, 2, 3], &mut rng)),
        audio: Some(Tensor::randn(&[6, 2], &mut rng)),
        video_caption: vec![1, 5, 2],
        audio_caption: vec![7, 3],
    };
    let (v_full, a_full) = model.forward(&input, 0.4, TaskKind::T2V).unwrap();
    let (v_alone, _) = model.forward(&input.without_audio(), 0.4, TaskKind::T2V).unwrap();
    let diff = v_full.max_abs_diff(&v_alone);
    println!("T2V video output, full bundle vs audio-free: max |diff| = {diff:.2e}");
    println!("audio head under T2V is all zeros: {}", a_full.max_abs() == 0.0);
    assert!(diff < 1e-10);

    let (_, a_full) = model.forward(&input, 0.4, TaskKind::T2A).unwrap();
    let (_, a_alone) = model.forward(&input.without_video(), 0.4, TaskKind::T2A).unwrap();
    let diff = a_full.max_abs_diff(&a_alone);
    println!("T2A audio output, full bundle vs video-free: max |diff| = {diff:.2e}");
    assert!(diff < 1e-10);
}
