//! End to end: train the toy profile through all three curriculum stages,
//! then score T2AV generations with the alignment oracle.
//!
//! `TRAIN_TOY_STEPS` sets the total step budget (default 3500, split
//! 4:2:1 across stages); `TRAIN_TOY_EVAL` the number of evaluated samples.

use avdit::cli::{eval_run, train_run, EvalArgs};
use avdit::config::RunConfig;

fn env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let steps = env("TRAIN_TOY_STEPS", 3500);
    let mut run = RunConfig::toy();
    run.curriculum.stage_steps = [steps * 4 / 7, steps * 2 / 7, steps - steps * 4 / 7 - steps * 2 / 7];
    run.checkpoint_every = 0;
    run.output_dir = std::env::temp_dir().join(format!("avdit-train-toy-{}", std::process::id()));
    let out = train_run(&run).unwrap();
    println!("validation loss per task (t2v, t2a, t2av, i2v, i2av)");
    println!("  before {:?}", out.log.initial_validation.map(|x| (x * 1000.0).round() / 1000.0));
    println!("  after  {:?}", out.log.final_validation.map(|x| (x * 1000.0).round() / 1000.0));
    println!("final weights {:?}", out.state.task_weights.map(|x| (x * 1000.0).round() / 1000.0));

    let report = eval_run(&EvalArgs {
        checkpoint: out.final_checkpoint.clone(),
        data_config: None,
        n: env("TRAIN_TOY_EVAL", 20),
        steps: None,
        out: run.output_dir.join("eval"),
    })
    .unwrap();
    println!("mean alignment {:.3}, shuffled baseline {:.3}", report.mean_alignment, report.shuffled_alignment);
    std::fs::remove_dir_all(&run.output_dir).unwrap();
}
