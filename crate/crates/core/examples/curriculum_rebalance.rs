//! Curriculum mechanics without training: task sampling, metric-driven
//! rebalancing, stage transitions and quality filtering.

use avdit::curriculum::{filter_quality, CurriculumState, StageConfig};
use avdit::synthdata::{generate, GeneratorConfig};
use avdit::tasks::TaskKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = StageConfig { stage_steps: [10, 10, 10], ..StageConfig::default() };
    let mut state = CurriculumState::new(&cfg).unwrap();
    println!("stage {} weights {:?}", state.stage, state.task_weights);

    // T2AV lags behind: it gets the largest share after rebalancing.
    let losses = [0.80, 0.85, 1.60, 0.70, 1.10];
    state.step = 10;
    state.advance_stage(&cfg).unwrap();
    let w = state.rebalance(&losses).unwrap();
    for k in TaskKind::ALL {
        println!("{k:>5}: val loss {:.2} -> weight {:.3}", losses[k.index()], w[k.index()]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[state.next_task(&mut rng).index()] += 1;
    }
    println!("empirical task frequencies {:?}", counts.map(|c| c as f64 / 1e4));

    state.step = 20;
    state.advance_stage(&cfg).unwrap();
    let corpus = generate(&GeneratorConfig::default(), 2000).unwrap();
    let kept = filter_quality(&corpus, 0.73);
    println!("stage {}: quality >= 0.73 keeps {} of {} samples", state.stage, kept.len(), corpus.len());
    assert!(state.advance_stage(&cfg).is_err());
}
