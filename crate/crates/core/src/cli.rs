//! Command-line front end: `gen-data`, `train`, `sample`, `eval`.
//!
//! Each command optionally reads a JSON config (unknown keys rejected); flags override the
//! matching config entries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::decoders::{Decoder, DecoderSpec};
use crate::dpp::{build_kernel, greedy_map, GroundSet, KernelConfig};
use crate::error::{Error, Result};
use crate::flows::{normal_vec, rng_stream};
use crate::io::{self, BaselineSummary, EvalSummary, ModelFile, SamplesRecord};
use crate::synth::{generate_crossroad, route_histogram, CrossroadConfig, Route};
use crate::training::{decode_set, train_dlow, train_dsf, TrainConfig, TrainMode, TrainReport};
use crate::trajectory::{evaluate_dataset, Dataset, SampleSet};

#[derive(Debug, Parser)]
#[command(name = "divsample", version, about = "Diversity-aware trajectory sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crossroad dataset (JSON lines).
    GenData(GenDataArgs),
    /// Train a DSF or DLow sampler through a fixed decoder.
    Train(TrainArgs),
    /// Decode K samples per example, optionally with greedy DPP selection.
    Sample(SampleArgs),
    /// Compute the metric suite for a samples file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of examples.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Print the loss every N iterations (default: iters / 10).
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the shared DLow noise (stream = example position).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Must equal the trained K.
    #[arg(long)]
    pub k: Option<usize>,
    /// Base quality used for DPP selection.
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub dpp_map: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output prefix: writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Context radius for multimodal ground truth.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Model or decoder JSON used for the i.i.d. prior baseline.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long)]
    pub baseline_seed: Option<u64>,
    /// Baseline sample count (default: the samples file's K).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default)]
    pub data: Option<CrossroadConfig>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRunConfig {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(rename = "K", default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub dpp_map: Option<bool>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub decoder: Option<PathBuf>,
    #[serde(default)]
    pub baseline_seed: Option<u64>,
    #[serde(rename = "K", default)]
    pub k: Option<usize>,
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), io::read_json)
}

fn required(value: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Invalid(format!("missing --{name} (flag or config)")))
}

/// Runs a parsed command; returns the lines to print on stdout.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<Vec<String>> {
    let cfg: GenDataConfig = load_config(&args.config)?;
    let mut data = cfg
        .data
        .unwrap_or_else(|| CrossroadConfig::new([1.0 / 3.0; 3], 300, 0));
    if let Some(seed) = args.seed {
        data.seed = seed;
    }
    if let Some(n) = args.n {
        data.n_examples = n;
    }
    let out = required(args.out.or(cfg.out), "out")?;
    let ds = generate_crossroad(&data)?;
    io::write_dataset(&out, &ds)?;
    let hist = route_histogram(&ds);
    Ok(vec![format!(
        "wrote {} examples to {} (past {}x{}, future {}x{}); routes {}={} {}={} {}={}",
        ds.len(),
        out.display(),
        ds.meta.past_steps,
        ds.meta.dim,
        ds.meta.future_steps,
        ds.meta.dim,
        Route::Forward.name(),
        hist[0],
        Route::Left.name(),
        hist[1],
        Route::Right.name(),
        hist[2],
    )])
}

pub fn cmd_train(args: TrainArgs) -> Result<Vec<String>> {
    let cfg_path = required(args.config, "config")?;
    let cfg: TrainRunConfig = io::read_json(&cfg_path)?;
    let mut train = cfg.train;
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    if let Some(k) = args.k {
        train.k = k;
    }
    if let Some(iters) = args.iters {
        train.iters = iters;
    }
    let dataset_path = required(args.dataset.or(cfg.dataset), "dataset")?;
    let out = required(args.out.or(cfg.out), "out")?;
    let report_path = args
        .report
        .or(cfg.report)
        .unwrap_or_else(|| out.with_extension("report.json"));
    let dataset = io::read_dataset(&dataset_path)?;
    let decoder = cfg.decoder;

    let (sampler, report) = match train.mode {
        TrainMode::Dsf => {
            let (codes, report) = train_dsf(&dataset, &decoder, &train)?;
            (crate::training::Sampler::Dsf(codes), report)
        }
        TrainMode::Dlow => train_dlow(&dataset, &decoder, &train)?,
    };
    let mut lines = trace_lines(&report, args.log_every);
    io::write_json(&out, &ModelFile::new(sampler, decoder, train.clone()))?;
    io::write_json(&report_path, &report)?;
    lines.push(format!(
        "initial loss {:.6}, final loss {:.6}; model {}, report {}",
        report.initial_loss,
        report.final_loss,
        out.display(),
        report_path.display()
    ));
    Ok(lines)
}

fn trace_lines(report: &TrainReport, every: Option<usize>) -> Vec<String> {
    let every = every.unwrap_or((report.iters / 10).max(1)).max(1);
    report
        .trace
        .iter()
        .filter(|r| r.iter % every == 0 || r.iter + 1 == report.iters)
        .map(|r| {
            let terms: Vec<String> = r.terms.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            format!("iter {:>5}  loss {:.6}  {}", r.iter, r.loss, terms.join(" "))
        })
        .collect()
}

pub fn cmd_sample(args: SampleArgs) -> Result<Vec<String>> {
    let cfg: SampleRunConfig = load_config(&args.config)?;
    let model = ModelFile::read(&required(args.model.or(cfg.model), "model")?)?;
    let dataset = io::read_dataset(&required(args.dataset.or(cfg.dataset), "dataset")?)?;
    let out = required(args.out.or(cfg.out), "out")?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let omega = args.omega.or(cfg.omega).unwrap_or(1.0);
    let dpp_map = args.dpp_map || cfg.dpp_map.unwrap_or(false);
    if let Some(k) = args.k.or(cfg.k) {
        if k != model.k {
            return Err(Error::Shape(format!("--k {k} but the model was trained with K = {}", model.k)));
        }
    }
    check_compatible(&model.decoder, &dataset)?;
    let kernel = KernelConfig {
        base_quality: omega,
        latent_dim: model.n_z,
        ..model.train_config.kernel
    };
    kernel.validate()?;

    let mut records = Vec::with_capacity(dataset.len());
    let mut selected_total = 0usize;
    for (pos, ex) in dataset.examples.iter().enumerate() {
        let eps = sample_noise_at(seed, pos as u64, model.n_z);
        let zs = model.params.latents(&ex.context, &eps)?;
        let set = decode_set(&model.decoder, &zs, &ex.context, ex.id)?;
        let selected = if dpp_map {
            let ground = GroundSet::new(
                set.samples.iter().map(|s| s.flat().to_vec()).collect(),
                zs.clone(),
            )?;
            let sel = greedy_map(&build_kernel(&ground, &kernel)?);
            selected_total += sel.len();
            Some(sel)
        } else {
            None
        };
        records.push(SamplesRecord {
            format_version: io::FORMAT_VERSION,
            id: ex.id,
            samples: set.samples,
            selected,
        });
    }
    io::write_samples(&out, &records)?;
    let mut msg = format!(
        "wrote {} sample sets of K = {} to {}",
        records.len(),
        model.k,
        out.display()
    );
    if dpp_map {
        msg.push_str(&format!(
            "; mean selected size {:.3} (omega = {omega})",
            selected_total as f64 / records.len() as f64
        ));
    }
    Ok(vec![msg])
}

/// Shared noise for the example at position `pos`.
fn sample_noise_at(seed: u64, pos: u64, n_z: usize) -> Vec<f64> {
    normal_vec(&mut rng_stream(seed, pos), n_z)
}

fn check_compatible<D: Decoder + ?Sized>(decoder: &D, dataset: &Dataset) -> Result<()> {
    let want = (dataset.meta.future_steps, dataset.meta.dim);
    if decoder.output_shape() != want {
        return Err(Error::Shape(format!(
            "decoder emits {:?} trajectories, dataset futures are {:?}",
            decoder.output_shape(),
            want
        )));
    }
    Ok(())
}

/// Decodes `k` i.i.d. standard-normal latents per example (stream = example position).
pub fn iid_baseline<D: Decoder + ?Sized>(
    decoder: &D,
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<BTreeMap<i64, SampleSet>> {
    check_compatible(decoder, dataset)?;
    dataset
        .examples
        .iter()
        .enumerate()
        .map(|(pos, ex)| {
            let mut rng = rng_stream(seed, pos as u64);
            let zs: Vec<Vec<f64>> = (0..k).map(|_| normal_vec(&mut rng, decoder.latent_dim())).collect();
            Ok((ex.id, decode_set(decoder, &zs, &ex.context, ex.id)?))
        })
        .collect()
}

fn load_decoder(path: &Path) -> Result<DecoderSpec> {
    let value: serde_json::Value = io::read_json(path)?;
    if value.get("decoder").is_some() && value.get("params").is_some() {
        return Ok(ModelFile::read(path)?.decoder);
    }
    serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn cmd_eval(args: EvalArgs) -> Result<Vec<String>> {
    let cfg: EvalRunConfig = load_config(&args.config)?;
    let records = io::read_samples(&required(args.samples.or(cfg.samples), "samples")?)?;
    let dataset = io::read_dataset(&required(args.dataset.or(cfg.dataset), "dataset")?)?;
    let out = required(args.out.or(cfg.out), "out")?;
    let eps = args.eps.or(cfg.eps).unwrap_or(0.0);
    if !(eps >= 0.0) {
        return Err(Error::Invalid(format!("eps must be >= 0, got {eps}")));
    }
    let sets = io::sample_sets(&records)?;
    let report = evaluate_dataset(&dataset, &sets, eps)?;

    let baseline = match args.decoder.or(cfg.decoder) {
        Some(path) => {
            let decoder = load_decoder(&path)?;
            let seed = args.baseline_seed.or(cfg.baseline_seed).unwrap_or(0);
            let k = args
                .k
                .or(cfg.k)
                .unwrap_or_else(|| records.first().map_or(0, |r| r.samples.len()));
            let base = iid_baseline(&decoder, &dataset, k, seed)?;
            let base_report = evaluate_dataset(&dataset, &base, eps)?;
            Some(BaselineSummary {
                seed,
                k,
                mean: base_report.mean,
            })
        }
        None => None,
    };

    let csv_path = out.with_extension("csv");
    let json_path = out.with_extension("json");
    io::write_text(&csv_path, &io::metrics_csv(&report))?;
    let summary = EvalSummary::new(&report, eps, baseline);
    io::write_json(&json_path, &summary)?;

    let fmt = |name: &str, m: &crate::trajectory::MetricValues| {
        format!(
            "{name:<9} apd {:.4} asd {:.4} fsd {:.4} ade {:.4} fde {:.4} mmade {:.4} mmfde {:.4}",
            m.apd, m.asd, m.fsd, m.ade, m.fde, m.mmade, m.mmfde
        )
    };
    let mut lines = vec![fmt("samples", &summary.mean)];
    if let Some(b) = &summary.baseline {
        lines.push(fmt("iid", &b.mean));
    }
    lines.push(format!("wrote {} and {}", csv_path.display(), json_path.display()));
    Ok(lines)
}

