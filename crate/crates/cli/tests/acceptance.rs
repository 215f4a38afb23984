//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use langsep::audio::{SampleFormat, Waveform};
use langsep::dataset::{read_manifest, Split, MANIFEST_FILE};
use langsep::diffgraph::check::{central_difference, relative_error};
use langsep::diffgraph::{logistic_dlog_dx, Feed, Graph, NodeId, Tensor};
use langsep::evalkit::{irm_separate_with, mix_consistency, si_sdr, IrmConfig};
use langsep::rng::substream;
use langsep::sampler::{
    als_step_size, cas_coefficients, geometric_schedule, separate_subband_batch, GaussianScore, MixWeights,
    RunOptions, ScheduleConfig, Variant,
};
use langsep::srcmodel::{LogisticFrameParams, ModelConfig, NoiseLevelDb, SourceModel};
use langsep::subband::{snr_db, FilterBank, SubbandFrames};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 -------------------------------------------------------------------------

fn test_signals(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Waveform)> {
    let n = 16_000;
    let noise: Vec<f64> = (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let sine: Vec<f64> = (0..n).map(|t| 0.5 * (2.0 * std::f64::consts::PI * 441.0 * t as f64 / 16_000.0).sin()).collect();
    // AR(2) resonance at 1 kHz, pole radius 0.97.
    let (r, w0) = (0.97, 2.0 * std::f64::consts::PI * 1000.0 / 16_000.0);
    let (a1, a2) = (2.0 * r * w0.cos(), -r * r);
    let mut ar = vec![0.0; n];
    for t in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        ar[t] = 0.01 * e + a1 * if t > 0 { ar[t - 1] } else { 0.0 } + a2 * if t > 1 { ar[t - 2] } else { 0.0 };
    }
    [("noise", noise), ("sine", sine), ("ar2", ar)]
        .into_iter()
        .map(|(k, x)| (k, Waveform::new(x, 16_000).unwrap()))
        .collect()
}

fn criterion_1() -> Outcome {
    let mut rng = substream(11, "filterbank");
    let signals = test_signals(&mut rng);
    let mut worst_snr = f64::INFINITY;
    let mut worst_energy: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    for channels in [64, 16] {
        let bank = FilterBank::new(channels, 10).map_err(|e| e.to_string())?;
        for (name, w) in &signals {
            let t0 = Instant::now();
            let x = bank.encode(w).map_err(|e| e.to_string())?;
            let back = bank.decode(&x).map_err(|e| e.to_string())?;
            slowest = slowest.max(t0.elapsed());
            ensure(back.len() == w.len(), || format!("{name}: length {} -> {}", w.len(), back.len()))?;
            let snr = snr_db(&w.samples, &back.samples);
            let energy = 10.0 * (x.energy() / w.energy()).log10();
            ensure(snr >= 60.0, || format!("C={channels} {name}: SNR {snr:.1} dB"))?;
            ensure(energy.abs() <= 0.1, || format!("C={channels} {name}: energy off by {energy:.3} dB"))?;
            worst_snr = worst_snr.min(snr);
            worst_energy = worst_energy.max(energy.abs());
        }
    }
    ensure(slowest < Duration::from_secs(1), || format!("round trip took {slowest:?}"))?;
    Ok(format!("min SNR {worst_snr:.1} dB, max energy error {worst_energy:.4} dB, slowest {:.0} ms", slowest.as_secs_f64() * 1e3))
}

// 2 -------------------------------------------------------------------------

const PRIMITIVES: [&str; 18] = [
    "affine", "causal_conv", "gru", "relu", "tanh", "sigmoid", "softplus", "sin", "cos", "add", "mul", "add_frames",
    "scale", "offset", "concat", "slice", "logistic", "sum",
];

struct Case {
    graph: Graph,
    inputs: HashMap<String, Tensor<f64>>,
    out: NodeId,
    wrt: Vec<String>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Random-shape graph `Σ r ⊙ op(inputs)` for one primitive.
fn random_case(kind: &str, rng: &mut ChaCha8Rng) -> Case {
    let mut g = Graph::new();
    let mut inputs = HashMap::new();
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, n, c, h) = (dim(1, 3), dim(1, 5), dim(1, 4), dim(1, 4));
    let shapes: Vec<(&str, Vec<usize>)>;
    let node_of = |g: &mut Graph, shapes: &Vec<(&str, Vec<usize>)>| -> Vec<NodeId> { shapes.iter().map(|(k, _)| g.input(k)).collect() };
    let (node, out_shape) = match kind {
        "affine" => {
            shapes = vec![("x", vec![b * n, c]), ("w", vec![c, h]), ("b", vec![h])];
            let v = node_of(&mut g, &shapes);
            (g.affine(v[0], v[1], v[2]), vec![b * n, h])
        }
        "causal_conv" => {
            let l = 1 + n % 3;
            shapes = vec![("x", vec![b, n, c]), ("p", vec![b, l, c]), ("w", vec![l * c, h]), ("b", vec![h])];
            let v = node_of(&mut g, &shapes);
            (g.causal_conv(v[0], v[1], v[2], v[3]), vec![b, n, h])
        }
        "gru" => {
            shapes = vec![
                ("x", vec![b, n, c]),
                ("h0", vec![b, h]),
                ("wi", vec![c, 3 * h]),
                ("wh", vec![h, 3 * h]),
                ("bi", vec![3 * h]),
                ("bh", vec![3 * h]),
            ];
            let v = node_of(&mut g, &shapes);
            (g.gru(v[0], v[1], v[2], v[3], v[4], v[5]), vec![b, n, h])
        }
        "add" | "mul" => {
            shapes = vec![("a", vec![b, n, c]), ("b", vec![b, n, c])];
            let v = node_of(&mut g, &shapes);
            let node = if kind == "add" { g.add_nodes(v[0], v[1]) } else { g.mul(v[0], v[1]) };
            (node, vec![b, n, c])
        }
        "add_frames" => {
            shapes = vec![("a", vec![b, n, c]), ("c", vec![b, c])];
            let v = node_of(&mut g, &shapes);
            (g.add_frames(v[0], v[1]), vec![b, n, c])
        }
        "concat" => {
            shapes = vec![("a", vec![b, n, c]), ("b", vec![b, n, h])];
            let v = node_of(&mut g, &shapes);
            (g.concat(&[v[0], v[1]]), vec![b, n, c + h])
        }
        "slice" => {
            let w = c + h;
            let start = dim(0, w - 1);
            let len = dim(1, w - start);
            shapes = vec![("x", vec![b, n, w])];
            let v = node_of(&mut g, &shapes);
            (g.slice(v[0], start, len), vec![b, n, len])
        }
        "logistic" => {
            shapes = vec![("x", vec![b, n, c]), ("mu", vec![b, n, c]), ("raw_s", vec![b, n, c])];
            let v = node_of(&mut g, &shapes);
            let sp = g.softplus(v[2]);
            let s = g.offset(sp, 0.05);
            (g.logistic_log_density(v[0], v[1], s), vec![b, n, c])
        }
        "sum" => {
            shapes = vec![("x", vec![b, n, c])];
            let v = node_of(&mut g, &shapes);
            let s = g.sum(v[0]);
            for (k, shape) in &shapes {
                inputs.insert(k.to_string(), random_tensor(rng, shape));
            }
            return Case { graph: g, inputs, out: s, wrt: vec!["x".into()] };
        }
        unary => {
            shapes = vec![("x", vec![b, n, c])];
            let x = node_of(&mut g, &shapes)[0];
            let node = match unary {
                "relu" => g.relu(x),
                "tanh" => g.tanh(x),
                "sigmoid" => g.sigmoid(x),
                "softplus" => g.softplus(x),
                "sin" => g.sin(x),
                "cos" => g.cos(x),
                "scale" => g.scale(x, -1.3),
                "offset" => g.offset(x, 0.7),
                other => panic!("unknown primitive {other}"),
            };
            (node, vec![b, n, c])
        }
    };
    for (k, shape) in &shapes {
        inputs.insert(k.to_string(), random_tensor(rng, shape));
    }
    if kind == "relu" {
        // Keep inputs away from the kink so central differences are valid.
        for v in inputs.get_mut("x").unwrap().data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
    }
    let r = g.input("r");
    inputs.insert("r".into(), random_tensor(rng, &out_shape));
    let m = g.mul(node, r);
    let out = g.sum(m);
    Case { graph: g, inputs, out, wrt: shapes.iter().map(|(k, _)| k.to_string()).collect() }
}

fn max_error(case: &Case) -> Result<f64, String> {
    let feed: Feed<'_, f64> = case.inputs.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let wrt: Vec<&str> = case.wrt.iter().map(String::as_str).collect();
    let (_, analytic) = case.graph.gradient(&feed, case.out, &wrt).map_err(|e| e.to_string())?;
    let numeric = central_difference(&case.graph, &case.inputs, case.out, &wrt, 1e-6).map_err(|e| e.to_string())?;
    Ok(wrt.iter().map(|w| relative_error(analytic[*w].data(), numeric[*w].data())).fold(0.0, f64::max))
}

fn criterion_2() -> Outcome {
    let mut rng = substream(12, "graphs");
    let mut worst = (0.0f64, "");
    for kind in PRIMITIVES {
        for _ in 0..20 {
            let err = max_error(&random_case(kind, &mut rng))?;
            ensure(err <= 1e-4, || format!("{kind}: relative error {err:.2e}"))?;
            if err > worst.0 {
                worst = (err, kind);
            }
        }
    }

    let cfg = ModelConfig {
        channels: 8,
        context_frames: 3,
        hidden_dim: 12,
        recurrent_state_dim: 10,
        rff_dim: 8,
        mlp_layers: 3,
        ..ModelConfig::default()
    };
    let model = SourceModel::<f64>::init(cfg, 4).map_err(|e| e.to_string())?;
    let sigma = NoiseLevelDb::new(-20.0).unwrap();
    let x = SubbandFrames::new(6, 8, (0..48).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
    let score = model.score(&x, sigma).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(48);
    for k in 0..48 {
        let shifted = |d: f64| {
            let mut v = x.data().to_vec();
            v[k] += d;
            model.log_prob(&x.with_data(v), sigma).unwrap()
        };
        numeric.push((shifted(h) - shifted(-h)) / (2.0 * h));
    }
    let score_err = relative_error(score.data(), &numeric);
    ensure(score_err <= 1e-4, || format!("score relative error {score_err:.2e}"))?;
    Ok(format!(
        "{} primitives x 20 random graphs, worst {:.1e} ({}); model score error {score_err:.1e}",
        PRIMITIVES.len(),
        worst.0,
        worst.1
    ))
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let s = vec![0.25, 0.01, 1.0, 3.7];
    let mu = vec![0.0, -1.2, 0.4, 5.0];
    let params = LogisticFrameParams { mu: mu.clone(), s: s.clone() };
    for c in 0..4 {
        let single = LogisticFrameParams { mu: vec![mu[c]], s: vec![s[c]] };
        let got = single.log_density(&[mu[c]]);
        let want = -(4.0 * s[c]).ln();
        ensure((got - want).abs() < 1e-12, || format!("mode density {got} vs {want} at s = {}", s[c]))?;
    }
    let unit = LogisticFrameParams { mu: vec![0.3], s: vec![0.25] }.log_density(&[0.3]);
    ensure(unit.abs() < 1e-15, || format!("log density {unit} at mode with 4s = 1"))?;

    let mut worst_ratio: f64 = 0.0;
    for c in 0..4 {
        for k in -400i32..=400 {
            let x = mu[c] + s[c] * (k as f64 * 0.25) + if k.abs() == 400 { 1e6 * k.signum() as f64 } else { 0.0 };
            let g = logistic_dlog_dx(x, mu[c], s[c]);
            ensure(g.is_finite() && g.abs() <= 1.0 / s[c], || format!("score {g} at x = {x}, s = {}", s[c]))?;
            worst_ratio = worst_ratio.max(g.abs() * s[c]);
        }
    }

    let mut rng = substream(13, "draws");
    let n = 100_000;
    let mut sums = vec![0.0; 4];
    for _ in 0..n {
        for (acc, v) in sums.iter_mut().zip(params.sample(&mut rng)) {
            *acc += v;
        }
    }
    let mut worst_z: f64 = 0.0;
    for c in 0..4 {
        let mean = sums[c] / n as f64;
        let se = s[c] * std::f64::consts::PI / 3f64.sqrt() / (n as f64).sqrt();
        let z = (mean - mu[c]).abs() / se;
        ensure(z < 3.0, || format!("channel {c}: sample mean {mean} is {z:.2} standard errors from {}", mu[c]))?;
        worst_z = worst_z.max(z);
    }
    Ok(format!("mode density exact, max |score|*s = {worst_ratio:.6}, worst mean deviation {worst_z:.2} SE"))
}

// 4 -------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (alpha, beta) = cas_coefficients(0.5, 2.0, false).map_err(|e| e.to_string())?;
    ensure((alpha - 0.75).abs() < 1e-15 && (beta - 0.75f64.sqrt()).abs() < 1e-15, || format!("({alpha}, {beta})"))?;
    let (_, beta1) = cas_coefficients(0.99, 1.0, false).map_err(|e| e.to_string())?;
    ensure(beta1 == 0.0, || format!("eta = 1 gives beta {beta1}"))?;
    let last = cas_coefficients(0.7, 90.0, true).map_err(|e| e.to_string())?;
    ensure(last == (1.0, 0.0), || format!("final step {last:?}"))?;

    let cfg = ScheduleConfig::default();
    ensure(cfg.variant == Variant::Cas && cfg.iterations == 1500 && cfg.eta == 90.0, || format!("{cfg:?}"))?;
    let sched = geometric_schedule(&cfg).map_err(|e| e.to_string())?;
    ensure(sched.len() == 1501, || format!("{} levels", sched.len()))?;
    ensure(sched[0].db() == 0.0 && sched[1500].db() == -90.0, || format!("{} .. {}", sched[0].db(), sched[1500].db()))?;
    let gamma = cfg.gamma();
    ensure((gamma - 0.993_116_048_420_933_8).abs() < 1e-15, || format!("gamma {gamma}"))?;
    let ratio = sched[1].amplitude() / sched[0].amplitude();
    ensure((ratio - gamma).abs() < 1e-12, || format!("step ratio {ratio}"))?;

    let als = ScheduleConfig { variant: Variant::Als, ..ScheduleConfig::default() };
    let eta_last = als_step_size(als.iterations, als.iterations, als.gamma(), als.eps_eta);
    ensure(eta_last == als.eps_eta, || format!("ALS eta_I {eta_last}"))?;
    let eta_first = als_step_size(1, als.iterations, als.gamma(), als.eps_eta);
    ensure(eta_first > 1e3 * eta_last, || format!("ALS eta_1 {eta_first}"))?;
    Ok(format!("alpha {alpha}, beta {beta:.6}, gamma {gamma:.16}, ALS eta_I {eta_last:e}"))
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let (c, n, chains) = (8, 1024, 32);
    // Variance ratios from 3:7 to 7:3 across channels at about -23 dBFS total.
    let total = 0.005;
    let v1: Vec<f64> = (0..c).map(|k| total * (0.3 + 0.4 * k as f64 / (c - 1) as f64)).collect();
    let v2: Vec<f64> = v1.iter().map(|v| total - v).collect();
    let mut rng = substream(15, "gaussian-mix");
    let mut y = Vec::with_capacity(n * c);
    for _ in 0..n {
        for k in 0..c {
            let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            y.push(v1[k].sqrt() * z1 + v2[k].sqrt() * z2);
        }
    }
    let y = SubbandFrames::new(n, c, y).unwrap();
    let p1 = GaussianScore { variances: v1.clone() };
    let p2 = GaussianScore { variances: v2.clone() };
    let cfg = ScheduleConfig { seed: 21, ..ScheduleConfig::default() };
    let ys = vec![y.clone(); chains];
    let out = separate_subband_batch(&ys, &[&p1, &p2], &MixWeights::ones(2), &cfg, RunOptions::default())
        .map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    let mut median_coef = Vec::new();
    for s in 0..2 {
        let mut mean = vec![0.0; n * c];
        for chain in &out {
            mean.iter_mut().zip(chain[s].data()).for_each(|(m, v)| *m += v / chains as f64);
        }
        for k in 0..c {
            let wiener = if s == 0 { v1[k] / (v1[k] + v2[k]) } else { v2[k] / (v1[k] + v2[k]) };
            let (mut num, mut den) = (0.0, 0.0);
            for f in 0..n {
                let yv = y.get(f, k);
                num += mean[f * c + k] * yv;
                den += yv * yv;
                median_coef.push(((mean[f * c + k] - wiener * yv) / (wiener * yv)).abs());
            }
            let gain = num / den;
            let err = (gain - wiener).abs() / wiener;
            ensure(err < 0.05, || format!("source {s} channel {k}: gain {gain:.4} vs Wiener {wiener:.4}"))?;
            worst = worst.max(err);
        }
    }
    median_coef.sort_by(f64::total_cmp);
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{chains} chains, worst gain error {:.2}%, median per-coefficient error {:.1}%, {:.1} s",
        worst * 100.0,
        median_coef[median_coef.len() / 2] * 100.0,
        elapsed.as_secs_f64()
    ))
}

// 6 -------------------------------------------------------------------------

/// Pilot-run regression constants for the toy end-to-end check.
mod toy {
    pub const ITEMS: usize = 200;
    pub const ITERATIONS: usize = 20_000;
    pub const MIXES: usize = 20;
    pub const MIX_SAMPLES: usize = 8_000;
    /// Toy-model scores are too stiff to follow above -20 dB.
    pub const SCHEDULE_START_DB: f64 = -20.0;
    pub const SCHEDULE_ITERATIONS: usize = 300;
    pub const SCHEDULE_ETA: f64 = 30.0;
    pub const MIN_BEAT_FRACTION: f64 = 0.9;
    pub const MIN_MIX_DB: f64 = 40.0;
    // Pilot: 20/20 items, means 12.69 / 11.36 dB (y/2: 1.07 / -1.08), mix 76.8 dB.
    pub const MIN_SOURCE_MEAN_DB: [f64; 2] = [9.5, 8.5];
    pub const MIN_MIX_PINNED_DB: f64 = 70.0;
}

fn toy_train_toml(data: &str) -> String {
    format!(
        r#"[data.source]
directory = "{data}"

[model]
channels = 16
hidden_dim = 64
recurrent_state_dim = 64
rff_dim = 32
context_frames = 10

[train]
iterations = {}
batch_size = 8
seq_seconds = 0.125
item_seconds = 1.0
segments_per_file = 8
lr_start = 1e-3
lr_end = 1e-5
val_every = 2000
val_items = 20
"#,
        toy::ITERATIONS
    )
}

fn test_items(dir: &Path) -> Result<Vec<Waveform>, String> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| Waveform::read_wav(dir.join(&e.file)).map_err(|e| e.to_string()))
        .collect()
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let t0 = Instant::now();
    let count = toy::ITEMS.to_string();
    for (class, seed) in [("harmonic-tones", "1"), ("filtered-noise", "2")] {
        ok(dir, &["--seed", seed, "--output", class, "synth-data", "--class", class, "--count", &count, "--seconds", "1"]);
    }
    let mut params = Vec::new();
    let mut nll = Vec::new();
    for (class, label) in [("harmonic-tones", "tones"), ("filtered-noise", "noise")] {
        write(&dir.join(format!("{label}.toml")), &toy_train_toml(class));
        let s = ok(dir, &["--config", &format!("{label}.toml"), "--precision", "32", "--output", &format!("run-{label}"), "train"]);
        params.push(s["params"].as_u64().unwrap_or(0));
        nll.push((s["initial_val_nll"].as_f64().unwrap_or(f64::NAN), s["best_val_nll"].as_f64().unwrap_or(f64::NAN)));
    }
    let train_time = t0.elapsed();
    ensure(train_time < Duration::from_secs(7200), || format!("training took {train_time:?}"))?;
    ensure(params.iter().all(|&p| (50_000..=150_000).contains(&p)), || format!("parameter counts {params:?}"))?;
    ensure(nll.iter().all(|(a, b)| b < a), || format!("validation NLL did not improve: {nll:?}"))?;

    let tones = test_items(&dir.join("harmonic-tones"))?;
    let noise = test_items(&dir.join("filtered-noise"))?;
    ensure(tones.len() >= toy::MIXES && noise.len() >= toy::MIXES, || format!("{} / {} test items", tones.len(), noise.len()))?;
    let mut mix_paths = Vec::new();
    for i in 0..toy::MIXES {
        let id = format!("mix{i:02}");
        let a = Waveform::new(tones[i].samples[..toy::MIX_SAMPLES].to_vec(), 16_000).unwrap();
        let b = Waveform::new(noise[i].samples[..toy::MIX_SAMPLES].to_vec(), 16_000).unwrap();
        let y = Waveform::new(a.samples.iter().zip(&b.samples).map(|(p, q)| p + q).collect(), 16_000).unwrap();
        std::fs::create_dir_all(dir.join("refs").join(&id)).unwrap();
        std::fs::create_dir_all(dir.join("mixes")).unwrap();
        a.write_wav(dir.join(format!("refs/{id}/tones.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
        b.write_wav(dir.join(format!("refs/{id}/noise.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
        y.write_wav(dir.join(format!("mixes/{id}.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
        mix_paths.push(format!("\"mixes/{id}.wav\""));
    }
    write(
        &dir.join("separate.toml"),
        &format!(
            "mixes = [{}]\nmodels = [\"run-tones/best.ckpt\", \"run-noise/best.ckpt\"]\nlabels = [\"tones\", \"noise\"]\n\n[schedule]\nsigma_start_db = {:?}\niterations = {}\neta = {:?}\nseed = 7\n",
            mix_paths.join(", "),
            toy::SCHEDULE_START_DB,
            toy::SCHEDULE_ITERATIONS,
            toy::SCHEDULE_ETA
        ),
    );
    let t1 = Instant::now();
    ok(dir, &["--config", "separate.toml", "--precision", "32", "--output", "separated", "separate"]);
    let sep_time = t1.elapsed();
    ok(dir, &["--output", "report", "evaluate", "--outputs", "separated", "--refs", "refs", "--mixes", "mixes"]);

    let report = std::fs::read_to_string(dir.join("report/report.jsonl")).map_err(|e| e.to_string())?;
    let mut scores: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let value = match &v["value"] {
            serde_json::Value::Number(x) => x.as_f64().unwrap(),
            other => other.as_str().and_then(|s| s.parse().ok()).unwrap_or(f64::NAN),
        };
        let key = |k: &str| v[k].as_str().unwrap_or_default().to_string();
        scores.insert((key("method"), key("item"), key("source")), value);
    }
    let get = |m: &str, item: &str, s: &str| scores.get(&(m.into(), item.into(), s.into())).copied().unwrap_or(f64::NAN);
    let mut beaten = 0;
    let mut means = [0.0; 2];
    let mut base_means = [0.0; 2];
    let mut mix_mean = 0.0;
    for i in 0..toy::MIXES {
        let id = format!("mix{i:02}");
        let mut all = true;
        for (k, s) in ["tones", "noise"].iter().enumerate() {
            let (v, base) = (get("dpss", &id, s), get("do-nothing", &id, s));
            all &= v > base;
            means[k] += v / toy::MIXES as f64;
            base_means[k] += base / toy::MIXES as f64;
        }
        beaten += all as usize;
        mix_mean += get("dpss", &id, "mix") / toy::MIXES as f64;
    }
    let fraction = beaten as f64 / toy::MIXES as f64;
    let summary = format!(
        "params {params:?}, train {:.0} s, separate {:.0} s; items beating y/2 on both sources {beaten}/{}; \
         SI-SDR tones {:.2} dB (y/2 {:.2}), noise {:.2} dB (y/2 {:.2}); mix consistency {mix_mean:.1} dB",
        train_time.as_secs_f64(),
        sep_time.as_secs_f64(),
        toy::MIXES,
        means[0],
        base_means[0],
        means[1],
        base_means[1],
    );
    ensure(fraction >= toy::MIN_BEAT_FRACTION, || summary.clone())?;
    ensure(mix_mean >= toy::MIN_MIX_DB.max(toy::MIN_MIX_PINNED_DB), || summary.clone())?;
    ensure(means[0] >= toy::MIN_SOURCE_MEAN_DB[0] && means[1] >= toy::MIN_SOURCE_MEAN_DB[1], || summary.clone())?;
    Ok(summary)
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let n = 16_000;
    let tone = |f: f64, amp: f64| {
        Waveform::new((0..n).map(|t| amp * (2.0 * std::f64::consts::PI * f * t as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
    };
    let refs = vec![tone(440.0, 0.3), tone(3_000.0, 0.2)];
    let y = Waveform::new(refs[0].samples.iter().zip(&refs[1].samples).map(|(a, b)| a + b).collect(), 16_000).unwrap();
    let out = irm_separate_with(&y, &refs, &IrmConfig::default()).map_err(|e| e.to_string())?;
    let mut worst = f64::INFINITY;
    for (r, e) in refs.iter().zip(&out.estimates) {
        let v = si_sdr(r, e).map_err(|e| e.to_string())?;
        worst = worst.min(v);
    }
    ensure(worst >= 40.0, || format!("per-source SI-SDR {worst:.1} dB"))?;
    let in_range = out.masks.iter().flatten().flatten().all(|&m| (0.0..=1.0).contains(&m));
    ensure(in_range, || "mask outside [0, 1]".into())?;
    let mix = mix_consistency(&out.estimates, &y, &MixWeights::ones(2)).map_err(|e| e.to_string())?;
    ensure(mix >= 60.0, || format!("mix consistency {mix:.1} dB"))?;
    Ok(format!("min per-source SI-SDR {worst:.1} dB, mix consistency {mix:.1} dB, masks in [0, 1]"))
}

// 8 -------------------------------------------------------------------------

fn pipeline(dir: &Path, threads: &str) -> Result<Vec<String>, String> {
    let mut lines = Vec::new();
    let mut run = |args: &[&str]| {
        let mut full = vec!["--precision", "64", "--threads", threads];
        full.extend_from_slice(args);
        lines.push(ok(dir, &full).to_string());
    };
    run(&["--seed", "5", "--output", "tones", "synth-data", "--class", "harmonic-tones", "--count", "20", "--seconds", "0.1"]);
    run(&["--seed", "6", "--output", "noise", "synth-data", "--class", "filtered-noise", "--count", "20", "--seconds", "0.1"]);
    write(&dir.join("tones.toml"), &tiny_train_toml(Path::new("tones"), 8));
    write(&dir.join("noise.toml"), &tiny_train_toml(Path::new("noise"), 8));
    run(&["--config", "tones.toml", "--seed", "3", "--output", "run-tones", "train"]);
    run(&["--config", "noise.toml", "--seed", "3", "--output", "run-noise", "train"]);
    run(&["--seed", "8", "--output", "gen", "generate", "--checkpoint", "run-tones/best.ckpt", "--seconds", "0.05"]);

    let tones = test_items(&dir.join("tones"))?;
    let noise = test_items(&dir.join("noise"))?;
    ensure(tones.len() >= 2 && noise.len() >= 2, || "too few test items".into())?;
    for (i, (a, b)) in tones.iter().zip(&noise).take(2).enumerate() {
        let id = format!("m{i}");
        let y = Waveform::new(a.samples.iter().zip(&b.samples).map(|(p, q)| p + q).collect(), a.sample_rate).unwrap();
        std::fs::create_dir_all(dir.join("refs").join(&id)).unwrap();
        std::fs::create_dir_all(dir.join("mixes")).unwrap();
        a.write_wav(dir.join(format!("refs/{id}/tones.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
        b.write_wav(dir.join(format!("refs/{id}/noise.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
        y.write_wav(dir.join(format!("mixes/{id}.wav")), SampleFormat::Float32).map_err(|e| e.to_string())?;
    }
    write(
        &dir.join("separate.toml"),
        "mixes = [\"mixes/m0.wav\", \"mixes/m1.wav\"]\nmodels = [\"run-tones/best.ckpt\", \"run-noise/best.ckpt\"]\n\
         labels = [\"tones\", \"noise\"]\nmetrics_every = 10\n[schedule]\niterations = 30\neta = 6.0\nseed = 2\n",
    );
    run(&["--config", "separate.toml", "--output", "sep", "separate"]);
    run(&["--output", "report", "evaluate", "--outputs", "sep", "--refs", "refs", "--mixes", "mixes"]);
    Ok(lines)
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_a = pipeline(a.path(), "1")?;
    let out_b = pipeline(b.path(), "3")?;
    ensure(out_a == out_b, || "command summaries differ between runs".into())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.len() == tb.len(), || format!("{} vs {} files", ta.len(), tb.len()))?;
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        ensure(pa == pb && da == db, || format!("{pa} differs"))?;
    }
    let bytes: usize = ta.iter().map(|(_, d)| d.len()).sum();
    Ok(format!("{} commands, {} files ({bytes} bytes) bit-identical across runs", out_a.len(), ta.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("filterbank round trip", criterion_1),
        ("autodiff against finite differences", criterion_2),
        ("logistic output stage", criterion_3),
        ("scheduler algebra", criterion_4),
        ("Gaussian separation oracle", criterion_5),
        ("toy end-to-end separation", criterion_6),
        ("IRM baseline", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n} ({name}): SKIPPED");
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
