//! Mixed-dimension rotary positions for a small video/caption/audio bundle:
//! video tokens carry (t, h, w), audio tokens continue the time axis after
//! the last video frame, caption tokens are unrotated.

use avdit::numerics::{Graph, Tensor};
use avdit::rope::{build_bundle_positions, RopeConfig, TokenPosition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = RopeConfig::new(16).unwrap();
    let grid = build_bundle_positions(Some((3, 2, 2)), 2, 2, 6, &cfg).unwrap();
    for (i, p) in grid.entries.iter().enumerate() {
        let label = match p {
            TokenPosition::Video { t, h, w } => format!("video t={t} h={h} w={w}"),
            TokenPosition::Audio { t } => format!("audio t={t}"),
            TokenPosition::Text => "caption".to_string(),
        };
        println!("{i:>2}: {label}");
    }
    let max_video = grid.max_video_t().unwrap();
    let min_audio = *grid.audio_ts().iter().min().unwrap();
    println!("max video t = {max_video}, min audio t = {min_audio}");
    assert_eq!(min_audio, max_video + 1);

    // Rotation is an isometry per token.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn(&[grid.len(), 1, 16], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.rope(xv, std::rc::Rc::new(grid.tables(&cfg))).unwrap();
    let y = g.value(y);
    let worst = (0..grid.len())
        .map(|i| {
            let n = |t: &Tensor<f64>| t.data()[i * 16..(i + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            (n(&x) - n(y)).abs()
        })
        .fold(0.0, f64::max);
    println!("largest per-token norm change: {worst:.2e}");
    assert!(worst < 1e-12);
}
