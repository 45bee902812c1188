//! The synthetic paired corpus and its alignment oracle: paired samples
//! score 1, mismatched pairs score about 1/K.

use avdit::synthdata::{generate, oracle_alignment, CaptionMode, Codebooks, GeneratorConfig};

fn main() {
    let cfg = GeneratorConfig::default();
    let books = Codebooks::new(&cfg).unwrap();
    let corpus = generate(&cfg, 500).unwrap();
    let s = &corpus[0];
    println!("events        {:?}", s.events);
    println!("video caption {:?}", s.video_caption);
    println!("audio caption {:?}", s.audio_caption);
    println!("decoded       {:?}", cfg.codec().decode(&s.video_caption, CaptionMode::Video).unwrap());
    println!("video {:?}, audio {:?}, quality {:.3}", s.video_latent.shape(), s.audio_latent.shape(), s.quality);

    let n = corpus.len() as f64;
    let paired: f64 = corpus.iter().map(|s| oracle_alignment(&s.video_latent, &s.audio_latent, &books).unwrap()).sum::<f64>() / n;
    let shuffled: f64 = corpus
        .iter()
        .zip(corpus.iter().cycle().skip(1))
        .map(|(a, b)| oracle_alignment(&a.video_latent, &b.audio_latent, &books).unwrap())
        .sum::<f64>()
        / n;
    println!("paired alignment {paired:.3}, shuffled {shuffled:.3}, 1/K = {:.3}", 1.0 / cfg.n_events as f64);
    assert_eq!(paired, 1.0);
}
