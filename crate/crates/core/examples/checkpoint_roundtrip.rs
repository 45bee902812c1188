//! Saving and reloading a model reproduces every parameter bit for bit.

use avdit::checkpoint::{load_model, save_model};
use avdit::config::RunConfig;
use avdit::mmdit::MMDiT;

fn main() {
    let mut run = RunConfig::toy();
    run.model.layers = 1;
    let mut model = MMDiT::<f32>::new(run.model.clone(), 7).unwrap();
    model.perturb(8, 0.1);
    let dir = std::env::temp_dir().join(format!("avdit-checkpoint-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.aplo");
    save_model(&path, &model, &run).unwrap();
    let (back, run_back) = load_model::<f32>(&path).unwrap();
    let bytes = std::fs::metadata(&path).unwrap().len();
    let identical = model
        .params()
        .tensors()
        .iter()
        .zip(back.params().tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("{} tensors, {} parameters, {bytes} bytes", model.params().len(), model.count_parameters());
    println!("bit-identical after reload: {identical}; config preserved: {}", run_back == run);
    std::fs::remove_dir_all(&dir).unwrap();
    assert!(identical && run_back == run);
}
