use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::info;
use physdiff_core::config::{RunConfig, SamplerConfig};
use physdiff_core::dataset::{
    list_pngs, load_image, make_splits, procedural_scene, resize, save_image, synth_degrade, write_synthetic,
    PairedDataset,
};
use physdiff_core::image::Image;
use physdiff_core::metrics::{evaluate as score, mean_report, psnr, MetricReport};
use physdiff_core::networks::checkpoint::Checkpoint;
use physdiff_core::networks::{count_complexity, Complexity, ModelBundle};
use physdiff_core::sampler::{enhance as sample, plan_subsequence, SamplerMode, SamplerOptions};
use physdiff_core::training::{RunOptions, Trainer};
use serde_json::json;

use crate::args::{BenchArgs, Command, ComplexityArgs, ConfigArgs, DegradeArgs, EnhanceArgs, EvaluateArgs, TrainArgs};
use crate::report::{metric_row, METRIC_HEADER};
use crate::Failure;

type Outcome = Result<(), Failure>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const VALIDATION_FILE: &str = "validation.csv";
const VALIDATION_IMAGES: usize = 4;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Degrade(a) => degrade(a),
        Command::Complexity(a) => complexity(a),
        Command::Bench(a) => bench(a),
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    Ok(match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(args.preset.map(Into::into).unwrap_or_default()),
    })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(d) = a.data {
        cfg.data.root = Some(d);
    }
    if let Some(n) = a.max_iterations {
        cfg.train.max_iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    let root = cfg.data.root.clone().ok_or_else(|| usage("no dataset: pass --data or set data.root"))?;
    info!("seed {}", cfg.train.seed);

    let ds = PairedDataset::open(&root)?;
    let (train_set, test_set) = make_splits(&ds.pairs, cfg.data.train_fraction, cfg.data.split_seed)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let stems = |v: &[physdiff_core::dataset::PairPaths]| v.iter().map(|p| p.stem.clone()).collect::<Vec<_>>();
    let split = json!({ "train": stems(&train_set), "test": stems(&test_set) });
    write_file(&a.output.join(SPLIT_FILE), &serde_json::to_string_pretty(&split).map_err(anyhow::Error::from)?)?;
    write_file(&a.output.join("config.toml"), &cfg.to_toml()?)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.model.config() != &cfg.model {
                log::warn!("model configuration taken from {}, not from the run configuration", p.display());
            }
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let res = trainer.bundle().resolution();
    let pairs = ds.load(&train_set, res)?;
    let held_out = ds.load(&test_set[..test_set.len().min(VALIDATION_IMAGES)], res)?;
    info!(
        "{} training pairs, {} held out, {}x{} model, from step {} to {}",
        pairs.len(),
        test_set.len(),
        res,
        res,
        trainer.step(),
        cfg.train.max_iterations
    );

    let mut validation = String::from("step,psnr_degraded,psnr_enhanced\n");
    let sampler = cfg.sampler.clone();
    let report_every = (cfg.train.max_iterations / 20).max(1);
    let start = Instant::now();
    let options =
        RunOptions { log_path: Some(a.output.join(LOG_FILE)), checkpoint_path: Some(a.output.join(CHECKPOINT_FILE)) };
    trainer.run(&pairs, &options, |t, l| {
        if l.step % report_every == 0 {
            info!(
                "step {} loss_theta {:.4e} loss_at {:.4e} loss_phi {:.4e} ({:.0}s)",
                l.step,
                l.theta,
                l.at,
                l.phi,
                start.elapsed().as_secs_f64()
            );
        }
        if a.validate_every > 0 && l.step % a.validate_every == 0 {
            let (before, after) = held_out_psnr(t.bundle(), &held_out, &sampler)?;
            info!("step {} held-out psnr {before:.2} -> {after:.2} dB", l.step);
            let _ = writeln!(validation, "{},{before:.4},{after:.4}", l.step);
        }
        Ok(())
    })?;
    if a.validate_every > 0 {
        write_file(&a.output.join(VALIDATION_FILE), &validation)?;
    }
    info!("checkpoint written to {}", a.output.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn held_out_psnr(
    bundle: &ModelBundle<f32>,
    pairs: &[(Image, Image)],
    sampler: &SamplerConfig,
) -> physdiff_core::Result<(f64, f64)> {
    let plan = plan_subsequence(bundle.schedule().steps(), sampler.steps)?;
    let opts = SamplerOptions { phi_level: sampler.phi_level, ..SamplerOptions::default() };
    let (mut before, mut after) = (0.0, 0.0);
    for (raw, clean) in pairs {
        let out = sample(raw, bundle, &plan, sampler.seed, opts)?;
        before += psnr(raw, clean)?;
        after += psnr(&out.enhanced, clean)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((before / n, after / n))
}

/// PNG inputs keyed by stem: a single file or every PNG in a directory.
fn collect_inputs(input: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    if input.is_dir() {
        return Ok(list_pngs(input)?);
    }
    if !input.is_file() {
        return Err(Failure::Runtime(anyhow!("{} does not exist", input.display())));
    }
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(BTreeMap::from([(stem, input.to_path_buf())]))
}

fn read_test_stems(path: &Path) -> Result<BTreeSet<String>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let stems = v["test"].as_array().ok_or_else(|| anyhow!("{} has no \"test\" list", path.display()))?;
    Ok(stems.iter().filter_map(|s| s.as_str().map(String::from)).collect())
}

fn enhance(a: EnhanceArgs) -> Outcome {
    let mut sampler = match &a.config {
        Some(p) => RunConfig::load(p)?.sampler,
        None => SamplerConfig::default(),
    };
    if let Some(s) = a.steps {
        sampler.steps = s;
    }
    if let Some(s) = a.seed {
        sampler.seed = s;
    }
    if let Some(p) = a.phi_level {
        sampler.phi_level = p.into();
    }
    let bundle = Checkpoint::load(&a.ckpt)?.model;
    let total = bundle.schedule().steps();
    if sampler.steps == 0 || sampler.steps > total {
        return Err(usage(format!("--steps must be in 1..={total} for this checkpoint")));
    }
    let plan = plan_subsequence(total, sampler.steps)?;
    let mut inputs = collect_inputs(&a.input)?;
    if let Some(split) = &a.split {
        let keep = read_test_stems(split)?;
        inputs.retain(|stem, _| keep.contains(stem));
    }
    if inputs.is_empty() {
        return Err(Failure::Runtime(anyhow!("no PNG inputs found in {}", a.input.display())));
    }
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    info!("seed {}, {} of {} steps, {} image(s)", sampler.seed, sampler.steps, total, inputs.len());
    let res = bundle.resolution();
    let opts = SamplerOptions { phi_level: sampler.phi_level, ..SamplerOptions::default() };
    for (stem, path) in &inputs {
        let img = load_image(path)?;
        let img = if img.dims() == (res, res) { img } else { resize(&img, res, res)? };
        let start = Instant::now();
        let out = sample(&img, &bundle, &plan, sampler.seed, opts)?;
        save_image(&out.enhanced, &a.output.join(format!("{stem}.png")))?;
        info!("{stem}: {:.2}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let reference = (!a.reference.eq_ignore_ascii_case("none")).then(|| PathBuf::from(&a.reference));
    if a.enhanced.is_none() && a.raw.is_none() {
        return Err(usage("nothing to score: pass --enhanced and/or --raw"));
    }
    let refs = reference.as_deref().map(list_pngs).transpose()?;
    let enhanced = a.enhanced.as_deref().map(list_pngs).transpose()?;
    let mut raw = a.raw.as_deref().map(list_pngs).transpose()?;
    if let (Some(raw), Some(enh)) = (raw.as_mut(), enhanced.as_ref()) {
        raw.retain(|stem, _| enh.contains_key(stem));
    }

    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    let mut means = Vec::new();
    for (set, files) in [("enhanced", enhanced), ("raw", raw)] {
        let Some(files) = files else { continue };
        let mut reports: Vec<MetricReport> = Vec::new();
        for (stem, path) in &files {
            let img = load_image(path)?;
            let gt = match &refs {
                None => None,
                Some(r) => {
                    let p = r.get(stem).ok_or_else(|| anyhow!("no reference image for {stem}"))?;
                    let gt = load_image(p)?;
                    Some(if gt.dims() == img.dims() { gt } else { resize(&gt, img.height(), img.width())? })
                }
            };
            let r = score(&img, gt.as_ref())?;
            out.push_str(&metric_row(set, stem, &r));
            out.push('\n');
            reports.push(r);
        }
        if let Some(m) = mean_report(&reports) {
            means.push(metric_row(set, "mean", &m));
        }
    }
    for m in means {
        out.push_str(&m);
        out.push('\n');
    }
    match &a.output {
        Some(p) => write_file(p, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn degrade(a: DegradeArgs) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.synthesis.seed = s;
    }
    cfg.synthesis.validate()?;
    if a.size == Some(0) {
        return Err(usage("--size must be positive"));
    }
    let clean: Vec<(String, Image)> = match (&a.clean, a.procedural) {
        (_, Some(n)) => {
            let size = a.size.unwrap_or(64);
            (0..n as u64)
                .map(|i| {
                    let seed = cfg.synthesis.seed.wrapping_mul(1_000_003).wrapping_add(i);
                    Ok((format!("scene_{i:04}"), procedural_scene(size, seed)?))
                })
                .collect::<physdiff_core::Result<_>>()?
        }
        (Some(dir), None) => list_pngs(dir)?
            .into_iter()
            .map(|(stem, p)| {
                let img = load_image(&p)?;
                let img = match a.size {
                    Some(s) => resize(&img, s, s)?,
                    None => img,
                };
                Ok((stem, img))
            })
            .collect::<physdiff_core::Result<_>>()?,
        (None, None) => return Err(usage("pass --clean DIR or --procedural N")),
    };
    if clean.is_empty() {
        return Err(Failure::Runtime(anyhow!("no clean images to degrade")));
    }
    info!("seed {}, {} image(s)", cfg.synthesis.seed, clean.len());
    let pairs = synth_degrade(&clean, &cfg.synthesis)?;
    let ds = write_synthetic(&a.output, &pairs)?;
    info!("wrote {} pairs to {}", ds.len(), a.output.display());
    Ok(())
}

fn complexity_row(name: &str, c: Complexity) -> String {
    format!("{name},{},{:.4},{},{:.4}", c.params, c.params as f64 / 1e6, c.macs, c.flops() as f64 / 1e9)
}

fn complexity(a: ComplexityArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let mut unet = cfg.model.unet.clone();
    if let Some(r) = a.resolution {
        unet.resolution = r;
    }
    unet.validate()?;
    let rep = count_complexity(&unet, &cfg.model.physnet);
    let add = |x: Complexity, y: Complexity| Complexity { macs: x.macs + y.macs, params: x.params + y.params };
    let phys = add(rep.anet, rep.tnet);
    println!("network,params,params_m,macs,gflops");
    println!("{}", complexity_row("unet", rep.unet));
    println!("{}", complexity_row("anet", rep.anet));
    println!("{}", complexity_row("tnet", rep.tnet));
    println!("{}", complexity_row("anet+tnet", phys));
    println!("{}", complexity_row("total", add(rep.unet, phys)));
    info!(
        "A-Net and T-Net counts follow the listed layer shapes ({} parameters together); the published 46.14k total is not reproducible from them",
        phys.params
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Outcome {
    let bundle = match &a.ckpt {
        Some(p) => Checkpoint::load(p)?.model,
        None => {
            let mut cfg = load_config(&a.config)?;
            if let Some(t) = a.total_steps {
                cfg.model.schedule.steps = t;
            }
            cfg.model.validate()?;
            info!("no checkpoint given: timing freshly initialised weights");
            ModelBundle::new(cfg.model, cfg.train.seed)?
        }
    };
    let total = bundle.schedule().steps();
    if a.repeat == 0 {
        return Err(usage("--repeat must be positive"));
    }
    if let Some(&bad) = a.steps_list.iter().find(|&&s| s == 0 || s > total) {
        return Err(usage(format!("step count {bad} outside 1..={total}")));
    }
    let res = bundle.resolution();
    let input = match &a.input {
        Some(p) => {
            let img = load_image(p)?;
            if img.dims() == (res, res) {
                img
            } else {
                resize(&img, res, res)?
            }
        }
        None => procedural_scene(res, a.seed)?,
    };
    info!("seed {}, T = {total}, {}x{res}, {} repeat(s)", a.seed, res, a.repeat);

    let mut rows = Vec::new();
    for &steps in &a.steps_list {
        let mode = if steps == total { SamplerMode::Reference } else { SamplerMode::Implicit };
        let plan = plan_subsequence(total, steps)?;
        let opts = SamplerOptions { mode, ..SamplerOptions::default() };
        let mut times = Vec::with_capacity(a.repeat);
        for _ in 0..a.repeat {
            let start = Instant::now();
            sample(&input, &bundle, &plan, a.seed, opts)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        info!("S = {steps}: {mean:.3}s mean");
        rows.push((steps, mode, mean, min));
    }
    let slowest = rows.iter().max_by_key(|r| r.0).map_or(1.0, |r| r.2);
    println!("steps,mode,repeat,mean_s,min_s,ratio");
    for (steps, mode, mean, min) in &rows {
        let mode = match mode {
            SamplerMode::Implicit => "implicit",
            SamplerMode::Reference => "reference",
        };
        println!("{steps},{mode},{},{mean:.6},{min:.6},{:.3}", a.repeat, slowest / mean);
    }
    Ok(())
}
