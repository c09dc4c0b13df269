//! Pipeline CLI: generate models and datasets, measure workload profiles,
//! solve pruning schedules, run pruned inference, and report latency steps.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 measurement
//! error. Outputs are written atomically (temp file + rename) so failures
//! leave no partial files, and every primary output gets a provenance
//! manifest: a hash embedded in JSON artifacts plus a sidecar
//! `<stem>.manifest.json` next to the file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use vitprune::dataset::{self, Dataset, SyntheticSpec};
use vitprune::error::{Error, Result};
use vitprune::manifest::{self, RunManifest, SCHEMA_VERSION};
use vitprune::model::{generate_random_model, load_model, TokenReducer, ViTConfig, ViTModel};
use vitprune::profiler::{self, GridSpec, MeasureMode};
use vitprune::pruning::SchedulePruner;
use vitprune::scheduler;
use vitprune::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "vitprune",
    version,
    about = "Hardware-aware token pruning for transformer encoders: profile, plan, run"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DatasetFormat {
    Binary,
    Spec,
}

fn parse_dataset_format(s: &str) -> std::result::Result<DatasetFormat, String> {
    match s {
        "binary" => Ok(DatasetFormat::Binary),
        "spec" => Ok(DatasetFormat::Spec),
        other => Err(format!(
            "unknown format '{other}' (expected binary or spec)"
        )),
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded random model: weights plus a resolved config file.
    GenModel {
        /// Model config JSON (depth, embed_dim, num_heads, mlp_ratio,
        /// num_tokens, num_special_tokens, num_classes).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight file to write; the resolved config lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a labeled synthetic dataset matching a model config.
    GenDataset {
        /// Model config JSON providing token count, embed dim, special count.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight of the class pattern in each informative token.
        #[arg(long, default_value_t = 0.5)]
        signal: f32,
        /// Weight of the per-token uniform noise.
        #[arg(long, default_value_t = 1.0)]
        noise: f32,
        /// binary = pre-embedded container; spec = JSON recipe that
        /// regenerates the data on load.
        #[arg(long, default_value = "binary", value_parser = parse_dataset_format)]
        format: DatasetFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure latency (and optionally proxy accuracy) over a kept-token grid.
    Profile {
        /// Weight file; its config is expected next to it as
        /// <stem>.config.json.
        #[arg(long)]
        model: PathBuf,
        /// Dataset for the accuracy proxy; omit for a latency-only profile.
        #[arg(long, conflicts_with = "accuracy_from")]
        dataset: Option<PathBuf>,
        /// Existing profile whose accuracy column is merged into this
        /// latency re-measurement (accuracy is device-independent).
        #[arg(long)]
        accuracy_from: Option<PathBuf>,
        /// Smallest kept-token count (default: num_special_tokens + 1).
        #[arg(long)]
        n_min: Option<usize>,
        /// Largest kept-token count (default: the model's num_tokens).
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value = "deployed-prune", value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<MeasureMode>()))]
        mode: MeasureMode,
        #[arg(long, default_value_t = profiler::DEFAULT_REPS)]
        reps: usize,
        #[arg(long, default_value_t = profiler::DEFAULT_WARMUP)]
        warmup: usize,
        /// Random-removal draws per sample for the accuracy proxy.
        #[arg(long, default_value_t = profiler::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "unlabeled")]
        device_label: String,
        /// Profile JSON; a plot-ready CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the schedule: utility argmax over a measured profile.
    Plan {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Model config JSON (or weight file with its config next to it)
        /// supplying the encoder depth.
        #[arg(long)]
        depth_from_model: PathBuf,
        /// Override the quarter-depth placement rule.
        #[arg(long)]
        prune_layer: Option<usize>,
        /// Schedule JSON; the utility-trace CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pruned inference on a dataset and time it.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Input dataset (binary container or synthetic spec JSON).
        #[arg(long)]
        input: PathBuf,
        /// Also time the unpruned model and report the latency change.
        #[arg(long)]
        compare_baseline: bool,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Logits report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report disproportionate latency steps along a profile's grid.
    Detect {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        /// Step-report JSON; omit to print to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenModel { config, seed, out } => cmd_gen_model(&config, seed, &out),
        Cmd::GenDataset {
            config,
            samples,
            classes,
            seed,
            signal,
            noise,
            format,
            out,
        } => cmd_gen_dataset(&config, samples, classes, seed, signal, noise, format, &out),
        Cmd::Profile {
            model,
            dataset,
            accuracy_from,
            n_min,
            n_max,
            stride,
            mode,
            reps,
            warmup,
            trials,
            seed,
            device_label,
            out,
        } => cmd_profile(
            &model,
            dataset.as_deref(),
            accuracy_from.as_deref(),
            n_min,
            n_max,
            stride,
            mode,
            reps,
            warmup,
            trials,
            seed,
            device_label,
            &out,
        ),
        Cmd::Plan {
            profile,
            alpha,
            depth_from_model,
            prune_layer,
            out,
        } => cmd_plan(&profile, alpha, &depth_from_model, prune_layer, &out),
        Cmd::Run {
            model,
            schedule,
            input,
            compare_baseline,
            reps,
            warmup,
            out,
        } => cmd_run(
            &model,
            &schedule,
            &input,
            compare_baseline,
            reps,
            warmup,
            &out,
        ),
        Cmd::Detect {
            profile,
            threshold,
            out,
        } => cmd_detect(&profile, threshold, out.as_deref()),
    }
}

/// Convention: weights at `x.vitw` keep their config at `x.config.json`.
fn config_path_for(model: &Path) -> PathBuf {
    model.with_extension("config.json")
}

/// Accept either a config JSON or a weight file whose config sits next to it.
fn resolve_config_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "vitw") {
        config_path_for(path)
    } else {
        path.to_path_buf()
    }
}

fn load_model_by_convention(model_path: &Path) -> Result<ViTModel> {
    load_model(&config_path_for(model_path), model_path)
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    bytes.push(b'\n');
    manifest::write_atomic(path, &bytes)
}

fn cmd_gen_model(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let mut config = ViTConfig::from_json_file(config_path)?;
    let model = generate_random_model(&config, seed)?;
    let resolved_config_path = config_path_for(out);
    let run = RunManifest::new(
        "gen-model",
        vec![path_string(config_path)],
        vec![seed],
        vec![path_string(out), path_string(&resolved_config_path)],
    );
    config.schema_version = Some(SCHEMA_VERSION);
    config.manifest_hash = Some(run.manifest_hash.clone());
    model.save_to_file(out)?;
    write_json_atomic(&config, &resolved_config_path)?;
    run.write_sidecar(out)?;
    println!(
        "wrote {} (hash {}) and {}",
        out.display(),
        model.weights_hash(),
        resolved_config_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_dataset(
    config_path: &Path,
    samples: usize,
    classes: usize,
    seed: u64,
    signal: f32,
    noise: f32,
    format: DatasetFormat,
    out: &Path,
) -> Result<()> {
    let config = ViTConfig::from_json_file(config_path)?;
    let spec = SyntheticSpec {
        schema_version: SCHEMA_VERSION,
        num_samples: samples,
        num_classes: classes,
        num_tokens: config.num_tokens,
        embed_dim: config.embed_dim,
        num_special_tokens: config.num_special_tokens,
        signal,
        noise,
        seed,
    };
    spec.validate()?;
    let run = RunManifest::new(
        "gen-dataset",
        vec![path_string(config_path)],
        vec![seed],
        vec![path_string(out)],
    );
    match format {
        DatasetFormat::Binary => {
            let ds = dataset::generate(&spec)?;
            dataset::save_binary(&ds, out)?;
        }
        DatasetFormat::Spec => dataset::save_spec(&spec, out)?,
    }
    run.write_sidecar(out)?;
    println!(
        "wrote {} ({samples} samples, {classes} classes)",
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    model_path: &Path,
    dataset_path: Option<&Path>,
    accuracy_from: Option<&Path>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    stride: usize,
    mode: MeasureMode,
    reps: usize,
    warmup: usize,
    trials: usize,
    seed: u64,
    device_label: String,
    out: &Path,
) -> Result<()> {
    let model = load_model_by_convention(model_path)?;
    let cfg = model.config();
    let spec = GridSpec {
        n_min: n_min.unwrap_or(cfg.num_special_tokens + 1),
        n_max: n_max.unwrap_or(cfg.num_tokens),
        stride,
        mode,
        reps,
        warmup,
        trials,
        seed,
        device_label,
    };
    let loaded_dataset = dataset_path.map(dataset::load_dataset).transpose()?;
    // Timing wants a quiet process: the grid runs on this thread with
    // nothing else scheduled.
    let mut profile = profiler::profile_grid(&model, loaded_dataset.as_ref(), &spec)?;
    if let Some(acc_path) = accuracy_from {
        let stored = profiler::load_profile(acc_path)?;
        profile = profiler::merge_profiles(&profile, &stored)?;
    }

    let csv_path = out.with_extension("csv");
    let mut inputs = vec![
        path_string(model_path),
        path_string(&config_path_for(model_path)),
    ];
    inputs.extend(dataset_path.map(path_string));
    inputs.extend(accuracy_from.map(path_string));
    let run = RunManifest::new(
        "profile",
        inputs,
        vec![seed],
        vec![path_string(out), path_string(&csv_path)],
    );
    profile.manifest_hash = Some(run.manifest_hash.clone());
    write_json_atomic(&profile, out)?;
    manifest::write_atomic(&csv_path, profiler::profile_csv(&profile).as_bytes())?;
    run.write_sidecar(out)?;
    println!(
        "profiled {} grid points into {} and {}",
        profile.grid.len(),
        out.display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_plan(
    profile_path: &Path,
    alpha: f64,
    depth_from_model: &Path,
    prune_layer: Option<usize>,
    out: &Path,
) -> Result<()> {
    let profile = profiler::load_profile(profile_path)?;
    let config_path = resolve_config_path(depth_from_model);
    let config = ViTConfig::from_json_file(&config_path)?;
    let mut schedule = scheduler::select_schedule(&profile, alpha, config.depth, prune_layer)?;

    let csv_path = out.with_extension("csv");
    let run = RunManifest::new(
        "plan",
        vec![path_string(profile_path), path_string(&config_path)],
        vec![],
        vec![path_string(out), path_string(&csv_path)],
    );
    schedule.manifest_hash = Some(run.manifest_hash.clone());
    let report = scheduler::schedule_report(&schedule, &profile)?;
    write_json_atomic(&schedule, out)?;
    manifest::write_atomic(&csv_path, report.as_bytes())?;
    run.write_sidecar(out)?;
    println!(
        "schedule: keep {} of {} tokens (R={}) pruning at layer {}; wrote {} and {}",
        schedule.n_keep,
        schedule.num_tokens,
        schedule.r,
        schedule.prune_layer,
        out.display(),
        csv_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport {
    schema_version: u32,
    model_hash: String,
    alpha: f64,
    n_keep: usize,
    r: usize,
    prune_layer: usize,
    reps: usize,
    warmup: usize,
    median_us: f64,
    iqr_us: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_median_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_iqr_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_change_percent: Option<f64>,
    /// One row of classifier outputs per input sample.
    logits: Vec<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_logits: Option<Vec<Vec<f32>>>,
    manifest_hash: String,
}

fn batch_tokens(ds: &Dataset) -> Result<Tensor> {
    let (n, d) = (ds.num_tokens(), ds.embed_dim());
    let mut data = Vec::with_capacity(ds.len() * n * d);
    for t in ds.tokens() {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![ds.len(), n, d], data)
}

fn logits_rows(logits: &Tensor) -> Vec<Vec<f32>> {
    (0..logits.shape()[0])
        .map(|i| logits.row(i).to_vec())
        .collect()
}

fn time_forward(
    model: &ViTModel,
    input: &Tensor,
    hook: Option<&dyn TokenReducer>,
    reps: usize,
    warmup: usize,
) -> Result<(f64, f64)> {
    if reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    let run = || -> Result<f64> {
        let started = Instant::now();
        let out = model
            .forward(input, hook)
            .map_err(|e| Error::Measurement(format!("forward failed during timing: {e}")))?;
        let elapsed = started.elapsed().as_secs_f64() * 1e6;
        std::hint::black_box(out);
        Ok(elapsed)
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(run()?);
    }
    profiler::latency_stats(&samples)
}

fn cmd_run(
    model_path: &Path,
    schedule_path: &Path,
    input_path: &Path,
    compare_baseline: bool,
    reps: usize,
    warmup: usize,
    out: &Path,
) -> Result<()> {
    let model = load_model_by_convention(model_path)?;
    let schedule = scheduler::load_schedule(schedule_path)?;
    let ds = dataset::load_dataset(input_path)?;
    let cfg = model.config();

    if schedule.num_tokens != cfg.num_tokens {
        return Err(Error::Validation(format!(
            "schedule was planned for {} tokens but the model has {}",
            schedule.num_tokens, cfg.num_tokens
        )));
    }
    if schedule.prune_layer >= cfg.depth {
        return Err(Error::Validation(format!(
            "schedule prunes at layer {} but the model has depth {}",
            schedule.prune_layer, cfg.depth
        )));
    }
    if ds.num_tokens() != cfg.num_tokens || ds.embed_dim() != cfg.embed_dim {
        return Err(Error::Validation(format!(
            "input samples are [{}, {}] but the model expects [{}, {}]",
            ds.num_tokens(),
            ds.embed_dim(),
            cfg.num_tokens,
            cfg.embed_dim
        )));
    }
    let max_r = cfg.num_tokens - cfg.num_special_tokens - 1;
    if schedule.r > max_r {
        return Err(Error::Validation(format!(
            "schedule prunes R={} tokens but at most {max_r} are prunable",
            schedule.r
        )));
    }

    let input = batch_tokens(&ds)?;
    let pruner;
    let hook: Option<&dyn TokenReducer> = if schedule.r >= 1 {
        pruner = SchedulePruner {
            layer_index: schedule.prune_layer,
            r: schedule.r,
            special_count: cfg.num_special_tokens,
        };
        Some(&pruner)
    } else {
        None
    };

    let logits = model.forward(&input, hook)?;
    let (median_us, iqr_us) = time_forward(&model, &input, hook, reps, warmup)?;
    println!(
        "pruned:   median {median_us:.1} us (iqr {iqr_us:.1} us, {reps} reps; n_keep {}, R {}, layer {})",
        schedule.n_keep, schedule.r, schedule.prune_layer
    );

    let mut baseline_median_us = None;
    let mut baseline_iqr_us = None;
    let mut latency_change_percent = None;
    let mut baseline_logits = None;
    if compare_baseline {
        let base = model.forward(&input, None)?;
        let (b_med, b_iqr) = time_forward(&model, &input, None, reps, warmup)?;
        let change = (median_us - b_med) / b_med * 100.0;
        println!("baseline: median {b_med:.1} us (iqr {b_iqr:.1} us, {reps} reps)");
        println!("change:   {change:+.1}%");
        baseline_median_us = Some(b_med);
        baseline_iqr_us = Some(b_iqr);
        latency_change_percent = Some(change);
        baseline_logits = Some(logits_rows(&base));
    }

    let run = RunManifest::new(
        "run",
        vec![
            path_string(model_path),
            path_string(&config_path_for(model_path)),
            path_string(schedule_path),
            path_string(input_path),
        ],
        vec![],
        vec![path_string(out)],
    );
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        model_hash: model.weights_hash(),
        alpha: schedule.alpha,
        n_keep: schedule.n_keep,
        r: schedule.r,
        prune_layer: schedule.prune_layer,
        reps,
        warmup,
        median_us,
        iqr_us,
        baseline_median_us,
        baseline_iqr_us,
        latency_change_percent,
        logits: logits_rows(&logits),
        baseline_logits,
        manifest_hash: run.manifest_hash.clone(),
    };
    write_json_atomic(&report, out)?;
    run.write_sidecar(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct StepReport {
    schema_version: u32,
    threshold: f64,
    profile_hash: String,
    steps: Vec<profiler::LatencyStep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
}

fn cmd_detect(profile_path: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    let profile = profiler::load_profile(profile_path)?;
    let steps = profiler::detect_nonlinearities(&profile, threshold)?;
    let mut report = StepReport {
        schema_version: SCHEMA_VERSION,
        threshold,
        profile_hash: scheduler::profile_fingerprint(&profile)?,
        steps,
        manifest_hash: None,
    };
    match out {
        Some(path) => {
            let run = RunManifest::new(
                "detect",
                vec![path_string(profile_path)],
                vec![],
                vec![path_string(path)],
            );
            report.manifest_hash = Some(run.manifest_hash.clone());
            write_json_atomic(&report, path)?;
            run.write_sidecar(path)?;
            println!("wrote {} ({} steps)", path.display(), report.steps.len());
        }
        None => {
            let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
                path: PathBuf::from("<stdout>"),
                detail: e.to_string(),
            })?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}
