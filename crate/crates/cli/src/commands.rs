//! Subcommand implementations.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use langsep::audio::{SampleFormat, Waveform};
use langsep::dataset::DataSource;
use langsep::evalkit::{self, EvalReport};
use langsep::sampler::{self, IterationMetrics, MixWeights, RunOptions, ScoreProvider};
use langsep::srcmodel::{Checkpoint, ModelConfig, NoiseLevelDb};
use langsep::subband::FilterBank;
use langsep::synth::{self, SynthSpec};
use langsep::trainer::{self, DirSink};
use serde::Serialize;

use crate::config::{self, ConfigError, EvaluateJob, GenerateJob, SeparateJob, TrainJob};
use crate::{Cli, Precision};

fn output_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.output.clone().unwrap_or_else(|| default.into());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Prints the job and returns true when only the configuration was requested.
fn print_config<T: Serialize>(cli: &Cli, job: &T) -> Result<bool> {
    if cli.print_config {
        print!("{}", toml::to_string(job)?);
    }
    Ok(cli.print_config)
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

pub fn synth_data(cli: &Cli, class: Option<&str>, count: Option<usize>, seconds: Option<f64>) -> Result<()> {
    let mut spec: SynthSpec = config::load(cli.config.as_deref())?;
    if let Some(c) = class {
        spec.class = c.parse().map_err(|e: String| ConfigError(vec![e]))?;
    }
    spec.count = count.unwrap_or(spec.count);
    spec.seconds = seconds.unwrap_or(spec.seconds);
    spec.seed = cli.seed.unwrap_or(spec.seed);
    spec.validate().map_err(|e| ConfigError(vec![e.to_string()]))?;
    if print_config(cli, &spec)? {
        return Ok(());
    }
    let dir = output_dir(cli, "data")?;
    let entries = synth::write_dataset(&spec, &dir)?;
    let count_split = |s| entries.iter().filter(|e| e.split == s).count();
    use langsep::dataset::Split;
    summary(serde_json::json!({
        "command": "synth-data",
        "dir": dir,
        "items": entries.len(),
        "train": count_split(Split::Train),
        "val": count_split(Split::Val),
        "test": count_split(Split::Test),
    }));
    Ok(())
}

pub fn train(cli: &Cli) -> Result<()> {
    let mut job: TrainJob = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        job.train.seed = seed;
    }
    if let DataSource::Directory(d) = &job.data.source {
        job.data.source = DataSource::Directory(config::resolve(cli.config.as_deref(), d));
    }
    job.validate()?;
    if print_config(cli, &job)? {
        return Ok(());
    }
    let dir = output_dir(cli, "run")?;
    std::fs::write(dir.join("job.toml"), toml::to_string(&job)?)?;
    let data = job.data.load().context("loading dataset")?;
    for item in data.train.iter().chain(&data.val) {
        if item.wave.sample_rate != job.model.sample_rate {
            bail!("item {} has sample rate {}, model expects {}", item.id, item.wave.sample_rate, job.model.sample_rate);
        }
    }
    let mut sink = DirSink::create(&dir)?;
    let out = match cli.precision {
        Precision::F32 => trainer::train::<f32>(&data, &job.model, &job.train, &mut sink)?,
        Precision::F64 => trainer::train::<f64>(&data, &job.model, &job.train, &mut sink)?,
    };
    out.final_checkpoint.save(dir.join("last.ckpt"))?;
    summary(serde_json::json!({
        "command": "train",
        "checkpoint": dir.join(DirSink::BEST_FILE),
        "initial_val_nll": out.initial_val_nll,
        "best_val_nll": out.best_val_nll,
        "params": out.best.param_count(),
    }));
    Ok(())
}

/// A loaded model at the requested precision.
fn load_model(path: &Path, precision: Precision) -> Result<(ModelConfig, Box<dyn ScoreProvider>, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model: Box<dyn ScoreProvider> = match precision {
        Precision::F32 => Box::new(ck.to_model::<f32>()?),
        Precision::F64 => Box::new(ck.to_model::<f64>()?),
    };
    Ok((ck.config.clone(), model, ck))
}

pub fn generate(cli: &Cli, checkpoint: Option<PathBuf>, seconds: Option<f64>, sigma_db: Option<f64>) -> Result<()> {
    let mut job: GenerateJob = config::load(cli.config.as_deref())?;
    if let Some(c) = checkpoint {
        job.checkpoint = Some(c);
    } else if let Some(c) = &job.checkpoint {
        job.checkpoint = Some(config::resolve(cli.config.as_deref(), c));
    }
    job.seconds = seconds.unwrap_or(job.seconds);
    job.sigma_db = sigma_db.unwrap_or(job.sigma_db);
    job.seed = cli.seed.unwrap_or(job.seed);
    let mut problems = Vec::new();
    if job.checkpoint.is_none() {
        problems.push("`checkpoint` is required".to_string());
    }
    if !(job.seconds > 0.0 && job.seconds.is_finite()) {
        problems.push("`seconds` must be positive".to_string());
    }
    if let Err(e) = NoiseLevelDb::new(job.sigma_db) {
        problems.push(format!("`sigma_db`: {e}"));
    }
    if !problems.is_empty() {
        return Err(ConfigError(problems).into());
    }
    if print_config(cli, &job)? {
        return Ok(());
    }
    let path = job.checkpoint.as_ref().expect("checked");
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = &ck.config;
    let bank = FilterBank::new(cfg.channels, cfg.filterbank_overlap)?;
    let len = ((job.seconds * f64::from(cfg.sample_rate)).round() as usize).max(1);
    let sigma = NoiseLevelDb::new(job.sigma_db)?;
    let n_frames = bank.encoded_frames(len);
    let mut frames = match cli.precision {
        Precision::F32 => ck.to_model::<f32>()?.generate(n_frames, sigma, job.seed)?,
        Precision::F64 => ck.to_model::<f64>()?.generate(n_frames, sigma, job.seed)?,
    };
    frames.source_len = len;
    frames.sample_rate = cfg.sample_rate;
    let wave = bank.decode(&frames)?;
    let dir = output_dir(cli, ".")?;
    let out = dir.join("generated.wav");
    wave.write_wav(&out, SampleFormat::Float32)?;
    summary(serde_json::json!({ "command": "generate", "wav": out, "samples": wave.len(), "power_dbfs": wave.power_dbfs() }));
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "item".into())
}

fn weights(w: &Option<Vec<f64>>, sources: usize) -> Result<MixWeights> {
    let a = match w {
        Some(w) => MixWeights::new(w.clone()).map_err(|e| ConfigError(vec![format!("`weights`: {e}")]))?,
        None => MixWeights::ones(sources),
    };
    if a.len() != sources {
        return Err(ConfigError(vec![format!("{} weights for {sources} sources", a.len())]).into());
    }
    Ok(a)
}

pub fn separate(cli: &Cli, mix: Option<PathBuf>, models: &[PathBuf]) -> Result<()> {
    let mut job: SeparateJob = config::load(cli.config.as_deref())?;
    let base = cli.config.as_deref();
    job.mix = job.mix.map(|m| config::resolve(base, &m));
    job.mixes = job.mixes.iter().map(|m| config::resolve(base, m)).collect();
    job.models = job.models.iter().map(|m| config::resolve(base, m)).collect();
    if mix.is_some() {
        job.mix = mix;
        job.mixes.clear();
    }
    if !models.is_empty() {
        job.models = models.to_vec();
    }
    job.schedule.seed = cli.seed.unwrap_or(job.schedule.seed);
    let mut problems = Vec::new();
    if job.mix.is_none() && job.mixes.is_empty() {
        problems.push("`mix` or `mixes` is required".to_string());
    }
    if job.models.len() < 2 {
        problems.push(format!("`models` needs at least two checkpoints, got {}", job.models.len()));
    }
    if !job.labels.is_empty() && job.labels.len() != job.models.len() {
        problems.push(format!("{} labels for {} models", job.labels.len(), job.models.len()));
    }
    if let Err(e) = job.schedule.validate() {
        problems.push(format!("[schedule] {e}"));
    }
    if !problems.is_empty() {
        return Err(ConfigError(problems).into());
    }
    let a = weights(&job.weights, job.models.len())?;
    if job.labels.is_empty() {
        job.labels = job.models.iter().map(|m| stem(m)).collect();
        if job.labels.iter().collect::<HashSet<_>>().len() != job.labels.len() {
            job.labels = (0..job.models.len()).map(|i| format!("source-{i}")).collect();
        }
    }
    if print_config(cli, &job)? {
        return Ok(());
    }

    let loaded = job.models.iter().map(|m| load_model(m, cli.precision)).collect::<Result<Vec<_>>>()?;
    let cfg0 = &loaded[0].0;
    for (path, (cfg, ..)) in job.models.iter().zip(&loaded) {
        if (cfg.channels, cfg.filterbank_overlap, cfg.sample_rate) != (cfg0.channels, cfg0.filterbank_overlap, cfg0.sample_rate) {
            bail!("{} uses a different filterbank or sample rate than {}", path.display(), job.models[0].display());
        }
    }
    let bank = FilterBank::new(cfg0.channels, cfg0.filterbank_overlap)?;
    let providers: Vec<&dyn ScoreProvider> = loaded.iter().map(|(_, m, _)| m.as_ref()).collect();

    let paths: Vec<PathBuf> = job.mix.iter().chain(&job.mixes).cloned().collect();
    let mut mixes = Vec::with_capacity(paths.len());
    for p in &paths {
        let w = Waveform::read_wav(p).with_context(|| format!("reading mix {}", p.display()))?;
        if w.sample_rate != cfg0.sample_rate {
            bail!("{} has sample rate {}, models expect {}", p.display(), w.sample_rate, cfg0.sample_rate);
        }
        mixes.push((stem(p), w));
    }
    if mixes.iter().map(|m| &m.0).collect::<HashSet<_>>().len() != mixes.len() {
        bail!("mix file names must be unique");
    }

    let dir = output_dir(cli, "separated")?;
    let mut metrics_file = if job.metrics_every > 0 {
        Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
    } else {
        None
    };
    // Equally long mixes share one batched run.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, w)) in mixes.iter().enumerate() {
        groups.entry(w.len()).or_default().push(i);
    }
    let mut written = Vec::new();
    for idx in groups.values() {
        let ys: Vec<Waveform> = idx.iter().map(|&i| mixes[i].1.clone()).collect();
        let mut lines: Vec<String> = Vec::new();
        let mut cb = |m: &IterationMetrics| {
            let mut v = serde_json::to_value(m).expect("serialisable");
            v["mix"] = serde_json::Value::String(mixes[idx[m.chain]].0.clone());
            lines.push(v.to_string());
        };
        let opts = RunOptions { metrics_every: job.metrics_every, on_metrics: Some(&mut cb) };
        let est = sampler::separate_batch(&ys, &providers, &a, &job.schedule, &bank, opts)?;
        if let Some(f) = metrics_file.as_mut() {
            use std::io::Write;
            for l in &lines {
                writeln!(f, "{l}")?;
            }
        }
        for (&i, sources) in idx.iter().zip(est) {
            let sub = dir.join(&mixes[i].0);
            std::fs::create_dir_all(&sub)?;
            for (label, wave) in job.labels.iter().zip(sources) {
                let p = sub.join(format!("{label}.wav"));
                wave.write_wav(&p, SampleFormat::Float32)?;
                written.push(p);
            }
        }
    }
    if let Some(mut f) = metrics_file {
        use std::io::Write;
        f.flush()?;
    }
    summary(serde_json::json!({ "command": "separate", "dir": dir, "mixes": mixes.len(), "wavs": written }));
    Ok(())
}

fn read_sources(dir: &Path, id: &str, sources: &[String]) -> Result<Vec<Waveform>> {
    sources
        .iter()
        .map(|s| {
            let p = dir.join(id).join(format!("{s}.wav"));
            Waveform::read_wav(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

pub fn evaluate(cli: &Cli, outputs: Option<PathBuf>, refs: Option<PathBuf>, mixes: Option<PathBuf>) -> Result<()> {
    let mut job: EvaluateJob = config::load(cli.config.as_deref())?;
    let base = cli.config.as_deref();
    job.outputs = outputs.or(job.outputs.map(|p| config::resolve(base, &p)));
    job.refs = refs.or(job.refs.map(|p| config::resolve(base, &p)));
    job.mixes = mixes.or(job.mixes.map(|p| config::resolve(base, &p)));
    let mut problems = Vec::new();
    for (name, v) in [("outputs", &job.outputs), ("refs", &job.refs), ("mixes", &job.mixes)] {
        if v.is_none() {
            problems.push(format!("`{name}` is required"));
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError(problems).into());
    }
    let mix_dir = job.mixes.clone().expect("checked");
    let ref_dir = job.refs.clone().expect("checked");
    let out_dir = job.outputs.clone().expect("checked");
    if job.sources.is_empty() {
        // Source names from the first reference item.
        let first = std::fs::read_dir(&ref_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .min()
            .with_context(|| format!("no items in {}", ref_dir.display()))?;
        let mut names: Vec<String> = std::fs::read_dir(&first)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .map(|p| stem(&p))
            .collect();
        names.sort();
        job.sources = names;
    }
    let a = weights(&job.weights, job.sources.len())?;
    if print_config(cli, &job)? {
        return Ok(());
    }

    let mut ids: Vec<String> = std::fs::read_dir(&mix_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .map(|p| stem(&p))
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no mixes in {}", mix_dir.display());
    }
    let mut mix_map = BTreeMap::new();
    let mut ref_map = BTreeMap::new();
    let mut out_map = BTreeMap::new();
    for id in &ids {
        mix_map.insert(id.clone(), Waveform::read_wav(mix_dir.join(format!("{id}.wav")))?);
        ref_map.insert(id.clone(), read_sources(&ref_dir, id, &job.sources)?);
        out_map.insert(id.clone(), read_sources(&out_dir, id, &job.sources)?);
    }
    let mut reports: Vec<EvalReport> = vec![evalkit::evaluate(&job.method, &job.sources, &out_map, &ref_map, &mix_map, &a)?];
    if job.irm {
        let mut irm = BTreeMap::new();
        for id in &ids {
            irm.insert(id.clone(), evalkit::irm_separate_with(&mix_map[id], &ref_map[id], &job.irm_config)?.estimates);
        }
        reports.push(evalkit::evaluate("irm", &job.sources, &irm, &ref_map, &mix_map, &a)?);
    }
    if job.do_nothing {
        let base: BTreeMap<_, _> = ids.iter().map(|id| (id.clone(), evalkit::do_nothing(&mix_map[id], &a))).collect();
        reports.push(evalkit::evaluate("do-nothing", &job.sources, &base, &ref_map, &mix_map, &a)?);
    }
    let dir = output_dir(cli, "report")?;
    let jsonl: String = reports.iter().map(EvalReport::to_jsonl).collect();
    std::fs::write(dir.join("report.jsonl"), jsonl)?;
    let table = evalkit::format_table(&reports);
    std::fs::write(dir.join("report.txt"), &table)?;
    let means: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|r| {
            let mut m = serde_json::Map::new();
            for (s, v) in r.sources.iter().zip(&r.source_means) {
                m.insert(s.clone(), serde_json::json!(v));
            }
            m.insert("mix".into(), serde_json::json!(r.mix_mean));
            (r.method.clone(), serde_json::Value::Object(m))
        })
        .collect();
    summary(serde_json::json!({ "command": "evaluate", "dir": dir, "items": ids.len(), "means": means }));
    Ok(())
}
