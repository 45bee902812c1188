use avdit::config::RunConfig;
use avdit::mmdit::{MMDiT, ModelConfig, ModelInput};
use avdit::numerics::Tensor;
use avdit::rope::TokenPosition;
use avdit::tasks::TaskKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(frames: usize, audio_len: usize, seed: u64) -> ModelInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelInput {
        video: Some(Tensor::randn(&[frames, 2, 2, 3], &mut rng)),
        audio: Some(Tensor::randn(&[audio_len, 2], &mut rng)),
        video_caption: vec![1, 2, 3],
        audio_caption: vec![4, 5],
    }
}

#[test]
fn toy_parameter_count_is_pinned() {
    let run = RunConfig::toy();
    assert_eq!(run.model.parameter_count(), 2_216_720);
    let m = MMDiT::<f32>::new(run.model.clone(), 0).unwrap();
    assert_eq!(m.count_parameters(), run.model.parameter_count());
    let tiny = ModelConfig::tiny(16, 2);
    assert_eq!(MMDiT::<f64>::new(tiny.clone(), 0).unwrap().count_parameters(), tiny.parameter_count());
}

#[test]
fn audio_clock_follows_the_visible_video() {
    let m = MMDiT::<f64>::new(ModelConfig::tiny(16, 1), 0).unwrap();
    let x = input(3, 5, 0);
    let first_audio = |task| {
        let p = m.positions(&x, task).unwrap();
        match p.entries[p.len() - 5] {
            TokenPosition::Audio { t } => t,
            other => panic!("{other:?}"),
        }
    };
    assert_eq!(first_audio(TaskKind::T2AV), 3);
    assert_eq!(first_audio(TaskKind::I2AV), 3);
    assert_eq!(first_audio(TaskKind::T2A), 1);
    assert_eq!(m.positions(&x.without_video(), TaskKind::T2A).unwrap().audio_ts()[0], 1);
}

#[test]
fn multi_frame_masking_equivalence() {
    let mut m = MMDiT::<f64>::new(ModelConfig::tiny(16, 2), 5).unwrap();
    m.perturb(6, 0.3);
    let x = input(4, 9, 1);
    let (_, a_full) = m.forward(&x, 0.3, TaskKind::T2A).unwrap();
    let (_, a_alone) = m.forward(&x.without_video(), 0.3, TaskKind::T2A).unwrap();
    assert!(a_full.max_abs_diff(&a_alone) < 1e-10);
    let (v_full, _) = m.forward(&x, 0.3, TaskKind::I2V).unwrap();
    let (v_alone, _) = m.forward(&x.without_audio(), 0.3, TaskKind::I2V).unwrap();
    assert!(v_full.max_abs_diff(&v_alone) < 1e-10);
}

#[test]
fn joint_output_depends_on_the_other_modality() {
    let mut m = MMDiT::<f64>::new(ModelConfig::tiny(16, 2), 5).unwrap();
    m.perturb(6, 0.3);
    let x = input(2, 6, 2);
    let mut y = x.clone();
    y.audio = Some(Tensor::randn(&[6, 2], &mut ChaCha8Rng::seed_from_u64(9)));
    let (vx, _) = m.forward(&x, 0.5, TaskKind::T2AV).unwrap();
    let (vy, _) = m.forward(&y, 0.5, TaskKind::T2AV).unwrap();
    assert!(vx.max_abs_diff(&vy) > 1e-6);
    let (vx, _) = m.forward(&x, 0.5, TaskKind::T2V).unwrap();
    let (vy, _) = m.forward(&y, 0.5, TaskKind::T2V).unwrap();
    assert_eq!(vx.max_abs_diff(&vy), 0.0);
}
