//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. `ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avdit::checkpoint::{load_model, save_model};
use avdit::checks::{model_case, op_cases, run_cases, EPS, TOL};
use avdit::cli::{eval_run, train_run, EvalArgs};
use avdit::config::RunConfig;
use avdit::curriculum::{filter_quality, CurriculumState, StageConfig, ValidationSet};
use avdit::flow::toy::{GaussianMixture, MlpVelocity, ToyTrainConfig};
use avdit::flow::{euler_integrate, fm_loss, SamplerConfig, VelocityField};
use avdit::mmdit::{MMDiT, ModelConfig, ModelInput};
use avdit::numerics::{Element, Tensor};
use avdit::rope::{apply_rope, build_bundle_positions, PositionGrid, RopeConfig, TokenPosition};
use avdit::synthdata::{generate, generate_split, GeneratorConfig, Split};
use avdit::tasks::TaskKind;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut cases = op_cases(0);
    cases.push(model_case(16, 2, 0).map_err(|e| e.to_string())?);
    let mut worst = (String::new(), 0.0f64);
    let mut failed = vec![];
    for (name, r) in run_cases(&cases) {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        if !r.passed {
            failed.push(name.clone());
        }
        if r.max_rel_error > worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    let t = start.elapsed();
    check(
        failed.is_empty() && within(t, 120),
        format!(
            "{} cases, eps {EPS:e}, worst {} at {:.2e} (< {TOL:e}), failed {failed:?}, {:.1}s (< 120s)",
            cases.len(),
            worst.0,
            worst.1,
            t.as_secs_f64()
        ),
    )
}

fn masking_draw<T: Element>(i: u64) -> Result<(f64, f64), String> {
    let e = |e: avdit::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let mut model = MMDiT::<T>::new(ModelConfig::tiny(16, 2), i).map_err(e)?;
    model.perturb(i + 7, 0.3);
    let (f, h, w) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
    let caption = |rng: &mut ChaCha8Rng| (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..10)).collect();
    let input = ModelInput {
        video: Some(Tensor::randn(&[f, h, w, 3], &mut rng)),
        audio: Some(Tensor::randn(&[rng.random_range(1..=12), 2], &mut rng)),
        video_caption: caption(&mut rng),
        audio_caption: caption(&mut rng),
    };
    let t = rng.random::<f64>();
    let (v_full, _) = model.forward(&input, t, TaskKind::T2V).map_err(e)?;
    let (v_alone, _) = model.forward(&input.without_audio(), t, TaskKind::T2V).map_err(e)?;
    let (_, a_full) = model.forward(&input, t, TaskKind::T2A).map_err(e)?;
    let (_, a_alone) = model.forward(&input.without_video(), t, TaskKind::T2A).map_err(e)?;
    Ok((
        v_full.max_abs_diff(&v_alone).to_f64().unwrap(),
        a_full.max_abs_diff(&a_alone).to_f64().unwrap(),
    ))
}

fn c2_masking() -> Outcome {
    let start = Instant::now();
    let (mut f32_worst, mut f64_worst) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let (v, a) = masking_draw::<f32>(i)?;
        f32_worst = f32_worst.max(v).max(a);
        let (v, a) = masking_draw::<f64>(i)?;
        f64_worst = f64_worst.max(v).max(a);
    }
    let t = start.elapsed();
    check(
        f32_worst < 1e-5 && f64_worst < 1e-10 && within(t, 60),
        format!(
            "100 draws, T2V and T2A: f32 max diff {f32_worst:.2e} (< 1e-5), f64 {f64_worst:.2e} (< 1e-10), {:.1}s (< 60s)",
            t.as_secs_f64()
        ),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotated_dot(q: &Tensor<f64>, k: &Tensor<f64>, pq: TokenPosition, pk: TokenPosition, cfg: &RopeConfig) -> f64 {
    let d = cfg.head_dim;
    let qk = Tensor::new(&[2, 1, d], [q.data(), k.data()].concat()).unwrap();
    let r = apply_rope(&qk, &PositionGrid { entries: vec![pq, pk] }, cfg).unwrap();
    dot(&r.data()[..d], &r.data()[d..])
}

fn c3_rope() -> Outcome {
    let start = Instant::now();
    let cfg = RopeConfig::new(32).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut norm_err, mut shift_err, mut offset_bad) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let grid = (rng.random_range(1..=16), rng.random_range(1..=8), rng.random_range(1..=8));
        let positions = build_bundle_positions(
            Some(grid),
            rng.random_range(0..6),
            rng.random_range(0..6),
            rng.random_range(1..=128),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let max_v = positions.max_video_t().unwrap();
        if positions.audio_ts().into_iter().min() != Some(max_v + 1) {
            offset_bad += 1;
        }

        let n = positions.len();
        let x = Tensor::<f64>::randn(&[n, 1, 32], &mut rng);
        let y = apply_rope(&x, &positions, &cfg).map_err(|e| e.to_string())?;
        for i in (0..n).step_by(7) {
            let r = &x.data()[i * 32..(i + 1) * 32];
            let s = &y.data()[i * 32..(i + 1) * 32];
            norm_err = norm_err.max((dot(r, r).sqrt() - dot(s, s).sqrt()).abs());
        }

        let q = Tensor::<f64>::randn(&[32], &mut rng);
        let k = Tensor::<f64>::randn(&[32], &mut rng);
        let mut v = || TokenPosition::Video { t: rng.random_range(0..16), h: rng.random_range(0..8), w: rng.random_range(0..8) };
        let (pq, pk) = (v(), v());
        let delta = rng.random_range(1..20);
        let base = rotated_dot(&q, &k, pq, pk, &cfg);
        let shift = |p: TokenPosition, axis: usize| match p {
            TokenPosition::Video { t, h, w } => match axis {
                0 => TokenPosition::Video { t: t + delta, h, w },
                1 => TokenPosition::Video { t, h: h + delta, w },
                _ => TokenPosition::Video { t, h, w: w + delta },
            },
            other => other,
        };
        for axis in 0..3 {
            let moved = rotated_dot(&q, &k, shift(pq, axis), shift(pk, axis), &cfg);
            shift_err = shift_err.max((moved - base).abs());
        }
        let (aq, ak) = (rng.random_range(0..200), rng.random_range(0..200));
        let a = rotated_dot(&q, &k, TokenPosition::Audio { t: aq }, TokenPosition::Audio { t: ak }, &cfg);
        let b = rotated_dot(&q, &k, TokenPosition::Audio { t: aq + delta }, TokenPosition::Audio { t: ak + delta }, &cfg);
        shift_err = shift_err.max((a - b).abs());
    }
    let t = start.elapsed();
    check(
        norm_err < 1e-6 && shift_err < 1e-6 && offset_bad == 0 && within(t, 30),
        format!(
            "1000 grids: norm err {norm_err:.1e}, shift err {shift_err:.1e} (< 1e-6), audio offset violations {offset_bad}, {:.1}s (< 30s)",
            t.as_secs_f64()
        ),
    )
}

struct Constant(Vec<Tensor<f64>>);

impl VelocityField<f64> for Constant {
    fn velocity(&self, _: &[Tensor<f64>], _: f64) -> avdit::Result<Vec<Tensor<f64>>> {
        Ok(self.0.clone())
    }
}

fn c4_flow() -> Outcome {
    let e = |e: avdit::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::<f64>::randn(&[6, 5], &mut rng);
    let x1 = Tensor::<f64>::randn(&[6, 5], &mut rng);
    let u = x1.zip_map(&x0, |a, b| a - b).map_err(e)?;
    let oracle = fm_loss(&[(&u, &u, None)]).map_err(e)?;
    let zero = fm_loss(&[(&Tensor::zeros(&[6, 5]), &u, None)]).map_err(e)?;
    let mean_sq = u.sum_squares() / u.numel() as f64;
    let c = Tensor::<f64>::randn(&[6, 5], &mut rng);
    let mut schedule: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    schedule.extend([0.0, 1.0]);
    schedule.sort_by(f64::total_cmp);
    let end = euler_integrate(&Constant(vec![c.clone()]), vec![x0.clone()], &schedule, &|_| Ok(())).map_err(e)?;
    let expected = x0.zip_map(&c, |a, b| a + b).map_err(e)?;
    let tele = end[0].max_abs_diff(&expected);
    check(
        oracle.abs() < 1e-10 && (zero - mean_sq).abs() < 1e-10 && tele < 1e-6,
        format!(
            "oracle loss {oracle:.1e}, zero-predictor gap {:.1e} (< 1e-10), telescoping err {tele:.1e} (< 1e-6)",
            (zero - mean_sq).abs()
        ),
    )
}

fn c5_mixture() -> Outcome {
    let start = Instant::now();
    let target = GaussianMixture::ring(8, 4.0, 0.3);
    let mut model = MlpVelocity::<f32>::new(128, 3, 0).map_err(|e| e.to_string())?;
    model.train(&target, &ToyTrainConfig::default()).map_err(|e| e.to_string())?;
    let samples = model.sample(10_000, &SamplerConfig::uniform(100, 1).unwrap()).map_err(|e| e.to_string())?;
    let r = target.assess(&samples);
    let t = start.elapsed();
    check(
        r.total_variation < 0.1 && r.max_mean_error() < 0.1 && within(t, 600),
        format!(
            "10^4 samples, 100 steps: TV {:.3} (< 0.1), worst mode-mean err {:.3} (< 0.1), {:.0}s (< 600s)",
            r.total_variation,
            r.max_mean_error(),
            t.as_secs_f64()
        ),
    )
}

/// Per-task losses of a checkpoint on 64 fixed validation samples.
fn t2v_validation(path: &std::path::Path) -> Result<f64, String> {
    let (model, run) = load_model::<f32>(path).map_err(|e| e.to_string())?;
    let samples = generate_split(&run.data, Split::Validation, 64).map_err(|e| e.to_string())?;
    let set = ValidationSet::<f32>::new(samples, &[TaskKind::T2V], 77).map_err(|e| e.to_string())?;
    Ok(set.evaluate(&model).map_err(|e| e.to_string())?[TaskKind::T2V.index()])
}

/// Criteria 6 and 7 share the multi-task training run.
fn c6_c7_toy() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut run = RunConfig::toy();
    run.checkpoint_every = 0;
    run.output_dir = dir.path().join("joint");
    let start = Instant::now();
    let joint = match train_run(&run) {
        Ok(o) => o,
        Err(e) => return (Err(format!("training failed: {e}")), Err("no joint model".into())),
    };
    let report = eval_run(&EvalArgs {
        checkpoint: joint.final_checkpoint.clone(),
        data_config: None,
        n: 200,
        steps: None,
        out: dir.path().join("eval"),
    });
    let t = start.elapsed();
    let t2av = (joint.log.initial_validation[2], joint.log.final_validation[2]);
    let c6 = match report {
        Ok(r) => check(
            r.mean_alignment >= 0.8 && r.shuffled_alignment < 0.25 && within(t, 3600),
            format!(
                "{} steps, 200 T2AV samples: alignment {:.3} (>= 0.8), shuffled {:.3} (~1/8), T2AV val loss {:.3} -> {:.3}, {:.0}s (< 3600s)",
                run.curriculum.total_steps(),
                r.mean_alignment,
                r.shuffled_alignment,
                t2av.0,
                t2av.1,
                t.as_secs_f64()
            ),
        ),
        Err(e) => Err(format!("eval failed: {e}")),
    };

    let mut solo = run.clone();
    solo.output_dir = dir.path().join("t2v_only");
    solo.curriculum.enabled_tasks = [true, false, false, false, false];
    let c7 = (|| {
        let baseline = train_run(&solo).map_err(|e| format!("baseline training failed: {e}"))?;
        let multi = t2v_validation(&joint.final_checkpoint)?;
        let single = t2v_validation(&baseline.final_checkpoint)?;
        check(
            multi <= 1.2 * single,
            format!("T2V val loss: multi-task {multi:.4}, T2V-only {single:.4}, ratio {:.3} (<= 1.2)", multi / single),
        )
    })();
    (c6, c7)
}

fn c8_curriculum() -> Outcome {
    let cfg = StageConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut sum_err, mut below_floor, mut worst_smallest) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let mut state = CurriculumState::new(&cfg).map_err(|e| e.to_string())?;
        let metrics: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.01..3.0));
        let w = state.rebalance(&metrics).map_err(|e| e.to_string())?;
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        below_floor += w.iter().filter(|&&x| x < cfg.weight_floor - 1e-12).count();
        let worst = (0..5).max_by(|&a, &b| metrics[a].total_cmp(&metrics[b])).unwrap();
        let smallest = w.iter().cloned().fold(f64::INFINITY, f64::min);
        // Ties at the floor are not a violation unless every weight sits there.
        if w[worst] == smallest && w.iter().any(|&x| x > smallest) {
            worst_smallest += 1;
        }
    }
    let data = GeneratorConfig { frames: 2, audio_len: 16, ..GeneratorConfig::default() };
    let corpus = generate(&data, 10_000).map_err(|e| e.to_string())?;
    let kept = filter_quality(&corpus, 0.73).len() as f64 / 1e4;
    check(
        sum_err < 1e-9 && below_floor == 0 && worst_smallest == 0 && (kept - 0.27).abs() <= 0.02,
        format!(
            "1000 rebalances: sum err {sum_err:.1e}, below floor {below_floor}, worst-task-smallest {worst_smallest}; retention at 0.73 = {kept:.4} (0.27 +/- 0.02)"
        ),
    )
}

fn c9_determinism() -> Outcome {
    let e = |e: avdit::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut run = RunConfig::toy();
    run.model.layers = 2;
    run.curriculum.stage_steps = [12, 6, 4];
    run.curriculum.rebalance_period = 4;
    run.curriculum.warmup_steps = 4;
    run.curriculum.log_period = 1;
    run.curriculum.train_samples = 200;
    run.checkpoint_every = 10;
    let mut files = vec![];
    for name in ["a", "b"] {
        run.output_dir = dir.path().join(name);
        let out = train_run(&run).map_err(|f| f.to_string())?;
        files.push((std::fs::read(&out.metrics).unwrap(), std::fs::read(&out.final_checkpoint).unwrap(), out.final_checkpoint));
    }
    let csv_same = files[0].0 == files[1].0;
    let (ma, _) = load_model::<f32>(&files[0].2).map_err(e)?;
    let (mb, _) = load_model::<f32>(&files[1].2).map_err(e)?;
    let ckpt_same = same_bits(&ma, &mb);

    let (model, back_run) = load_model::<f32>(&files[0].2).map_err(e)?;
    let again = dir.path().join("again.aplo");
    save_model(&again, &model, &back_run).map_err(e)?;
    let resave_same = std::fs::read(&again).unwrap() == files[0].1;
    let mut original = MMDiT::<f32>::new(run.model.clone(), 11).map_err(e)?;
    original.perturb(12, 0.1);
    let path = dir.path().join("perturbed.aplo");
    save_model(&path, &original, &run).map_err(e)?;
    let (loaded, _) = load_model::<f32>(&path).map_err(e)?;
    let bits_same = same_bits(&original, &loaded);
    check(
        csv_same && ckpt_same && resave_same && bits_same && back_run == run_with_dir(&run, &files[0].2),
        format!(
            "metrics.csv identical {csv_same} ({} bytes), final parameters identical {ckpt_same}, reload bit-exact {bits_same}, re-save identical {resave_same}",
            files[0].0.len()
        ),
    )
}

fn same_bits(a: &MMDiT<f32>, b: &MMDiT<f32>) -> bool {
    a.params().names() == b.params().names()
        && a.params().tensors().iter().zip(b.params().tensors()).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn run_with_dir(run: &RunConfig, ckpt: &std::path::Path) -> RunConfig {
    RunConfig { output_dir: ckpt.parent().unwrap().to_path_buf(), ..run.clone() }
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, &str, Outcome)> = vec![];
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if want(n) {
            let r = f();
            report(n, name, &r);
            results.push((n, name, r));
        }
    };
    run(1, "gradient correctness", &c1_gradients);
    run(2, "masking equivalence", &c2_masking);
    run(3, "MixD-RoPE properties", &c3_rope);
    run(4, "flow-matching sanity", &c4_flow);
    run(5, "toy distribution recovery", &c5_mixture);
    run(8, "curriculum properties", &c8_curriculum);
    run(9, "engineering determinism", &c9_determinism);
    if want(6) || want(7) {
        let (c6, c7) = c6_c7_toy();
        for (n, name, r) in [(6, "joint-generation alignment", c6), (7, "unimodal preservation", c7)] {
            if want(n) {
                report(n, name, &r);
                results.push((n, name, r));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (n, name, r) in &results {
        report(*n, name, r);
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, r: &Outcome) {
    match r {
        Ok(d) => println!("criterion {n} {name}: PASS  {d}"),
        Err(d) => println!("criterion {n} {name}: FAIL  {d}"),
    }
}
