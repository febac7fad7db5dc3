//! Versioned on-disk formats: JSON-lines datasets and samples, JSON models and reports, CSV
//! metric tables. Every record carries `"format_version": 1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoders::DecoderSpec;
use crate::error::{Error, Result};
use crate::training::{Sampler, TrainConfig, TrainMode};
use crate::trajectory::{Context, Dataset, Example, MetricValues, MetricsReport, SampleSet, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "{what}: unsupported format_version {found} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(
            &serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?,
        );
        text.push('\n');
    }
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub format_version: u32,
    pub id: i64,
    pub past: Trajectory,
    pub future: Trajectory,
    #[serde(default)]
    pub features: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl From<&Example> for DatasetRecord {
    fn from(ex: &Example) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            id: ex.id,
            past: ex.context.past.clone(),
            future: ex.future.clone(),
            features: ex.context.features.clone(),
            meta: ex.meta.clone(),
        }
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let records: Vec<DatasetRecord> = dataset.examples.iter().map(DatasetRecord::from).collect();
    write_lines(path, &records)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let records: Vec<DatasetRecord> = read_lines(path)?;
    let examples = records
        .into_iter()
        .map(|r| {
            check_version(r.format_version, "dataset record")?;
            Ok(Example {
                id: r.id,
                context: Context::new(r.past, r.features)?,
                future: r.future,
                meta: r.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub mode: TrainMode,
    pub n_z: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub params: Sampler,
    pub decoder: DecoderSpec,
    pub train_config: TrainConfig,
    pub seed: u64,
}

impl ModelFile {
    pub fn new(params: Sampler, decoder: DecoderSpec, train_config: TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            mode: params.mode(),
            n_z: params.n_z(),
            k: params.k(),
            seed: train_config.seed,
            params,
            decoder,
            train_config,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        check_version(m.format_version, "model")?;
        if m.mode != m.params.mode() || m.n_z != m.params.n_z() || m.k != m.params.k() {
            return Err(Error::Invalid(format!(
                "{}: header disagrees with params",
                path.display()
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesRecord {
    pub format_version: u32,
    pub id: i64,
    pub samples: Vec<Trajectory>,
    /// Greedy DPP MAP selection (indices into `samples`), when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<usize>>,
}

pub fn write_samples(path: &Path, records: &[SamplesRecord]) -> Result<()> {
    write_lines(path, records)
}

pub fn read_samples(path: &Path) -> Result<Vec<SamplesRecord>> {
    let records: Vec<SamplesRecord> = read_lines(path)?;
    for r in &records {
        check_version(r.format_version, "samples record")?;
    }
    Ok(records)
}

/// Sample sets keyed by id; duplicate ids are rejected.
pub fn sample_sets(records: &[SamplesRecord]) -> Result<BTreeMap<i64, SampleSet>> {
    let mut out = BTreeMap::new();
    for r in records {
        if out
            .insert(r.id, SampleSet::new(r.samples.clone(), r.id)?)
            .is_some()
        {
            return Err(Error::Invalid(format!("duplicate sample id {}", r.id)));
        }
    }
    Ok(out)
}

/// `id,apd,asd,fsd,ade,fde,mmade,mmfde` with one row per example.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("id");
    for c in MetricValues::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for row in &report.per_example {
        let _ = write!(out, "{}", row.id);
        for v in row.values.as_array() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub conventions: BTreeMap<String, String>,
    pub eps: f64,
    pub n_examples: usize,
    pub mean: MetricValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSummary>,
}

impl EvalSummary {
    pub fn new(report: &MetricsReport, eps: f64, baseline: Option<BaselineSummary>) -> Self {
        let conventions = [
            ("distance", "Euclidean norm of the flattened (T*D) difference"),
            ("ade", "min over samples of the per-timestep mean Euclidean pose distance"),
            ("fde", "min over samples of the final-pose Euclidean distance"),
            ("apd", "flattened distance averaged over ordered pairs i != j"),
            ("asd", "mean over samples of the per-timestep ADE to the nearest other sample"),
            ("fsd", "mean over samples of the final-pose distance to the nearest other sample"),
            ("mmade", "ADE averaged over the multimodal ground-truth set"),
            ("mmfde", "FDE averaged over the multimodal ground-truth set"),
            ("multimodal_gt", "futures of examples whose flattened context is within eps of the anchor"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            format_version: FORMAT_VERSION,
            columns: std::iter::once("id")
                .chain(MetricValues::COLUMNS)
                .map(String::from)
                .collect(),
            conventions,
            eps,
            n_examples: report.per_example.len(),
            mean: report.mean,
            baseline,
        }
    }
}
