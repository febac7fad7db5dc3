//! Trajectory value types and the forecasting metric suite.
//!
//! Metric conventions:
//!
//! * ADE, ASD: per-timestep Euclidean pose distance averaged over the `T` steps.
//! * FDE, FSD: Euclidean distance between final poses.
//! * APD: Euclidean distance between whole flattened `T*D` trajectories, averaged over
//!   ordered pairs.
//! * MMADE/MMFDE: ADE/FDE averaged over a multi-modal ground-truth set built by grouping
//!   examples whose contexts lie within `eps` of the anchor example's context.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::sq_dist;

/// A `T x D` array of states, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(Error::Invalid(format!("trajectory shape {steps}x{dim}")));
        }
        if data.len() != steps * dim {
            return Err(Error::Shape(format!(
                "{} values for a {steps}x{dim} trajectory",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory entry {v}")));
        }
        Ok(Self { steps, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let steps = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged trajectory rows".into()));
        }
        Self::new(steps, dim, rows.concat())
    }

    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self {
            steps,
            dim,
            data: vec![0.0; steps * dim],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.steps, self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.step(self.steps - 1)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Adds `offset` to every step.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + offset[i % self.dim])
            .collect();
        Self { data, ..*self }
    }

    /// Flattened values restricted to the coordinate indices in `dims`.
    pub fn slice_dims(&self, dims: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps * dims.len());
        for t in 0..self.steps {
            let row = self.step(t);
            out.extend(dims.iter().map(|&d| row[d]));
        }
        out
    }
}

impl Serialize for Trajectory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Trajectory::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

fn check_same_shape(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "trajectory {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub past: Trajectory,
    pub features: Vec<f64>,
}

impl Context {
    pub fn new(past: Trajectory, features: Vec<f64>) -> Result<Self> {
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("context feature {v}")));
        }
        Ok(Self { past, features })
    }

    /// Past trajectory flattened and concatenated with the feature vector.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.past.flat().to_vec();
        v.extend_from_slice(&self.features);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: i64,
    pub context: Context,
    pub future: Trajectory,
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub future_steps: usize,
    pub past_steps: usize,
    pub dim: usize,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Validates shape homogeneity and id uniqueness; `meta` shapes are taken from the
    /// first example.
    pub fn new(examples: Vec<Example>, description: impl Into<String>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Empty("dataset has no examples".into()))?;
        let fshape = first.future.shape();
        let pshape = first.context.past.shape();
        let nfeat = first.context.features.len();
        if pshape.1 != fshape.1 {
            return Err(Error::Shape("past and future dimensions differ".into()));
        }
        let mut ids = HashSet::new();
        for ex in &examples {
            if ex.future.shape() != fshape
                || ex.context.past.shape() != pshape
                || ex.context.features.len() != nfeat
            {
                return Err(Error::Shape(format!("example {} is not shape-homogeneous", ex.id)));
            }
            if !ids.insert(ex.id) {
                return Err(Error::Invalid(format!("duplicate example id {}", ex.id)));
            }
        }
        let meta = DatasetMeta {
            future_steps: fshape.0,
            past_steps: pshape.0,
            dim: fshape.1,
            description: description.into(),
        };
        Ok(Self { examples, meta })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// `K >= 1` shape-homogeneous trajectories produced for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Trajectory>,
    pub context_id: i64,
}

impl SampleSet {
    pub fn new(samples: Vec<Trajectory>, context_id: i64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("sample set has no samples".into()))?;
        if samples.iter().any(|s| s.shape() != first.shape()) {
            return Err(Error::Shape("sample set is not shape-homogeneous".into()));
        }
        Ok(Self {
            samples,
            context_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_pairs(&self, what: &str) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Invalid(format!("{what} needs K >= 2 samples")));
        }
        Ok(())
    }
}

/// Euclidean norm of the flattened difference.
pub fn traj_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(sq_dist(a.flat(), b.flat()).sqrt())
}

fn mean_step_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let total: f64 = (0..a.steps())
        .map(|t| sq_dist(a.step(t), b.step(t)).sqrt())
        .sum();
    total / a.steps() as f64
}

fn final_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    sq_dist(a.last(), b.last()).sqrt()
}

fn min_over_samples(
    samples: &SampleSet,
    gt: &Trajectory,
    f: fn(&Trajectory, &Trajectory) -> f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut best = f64::INFINITY;
    for s in &samples.samples {
        check_same_shape(s, gt)?;
        best = best.min(f(s, gt));
    }
    Ok(best)
}

/// Minimum over samples of the per-timestep mean pose distance to `gt`.
pub fn ade(samples: &SampleSet, gt: &Trajectory) -> Result<f64> {
    min_over_samples(samples, gt, mean_step_distance)
}

/// Minimum over samples of the final-pose distance to `gt`.
pub fn fde(samples: &SampleSet, gt: &Trajectory) -> Result<f64> {
    min_over_samples(samples, gt, final_distance)
}

/// Average flattened distance over ordered pairs of distinct samples.
pub fn apd(samples: &SampleSet) -> Result<f64> {
    samples.require_pairs("APD")?;
    let k = samples.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            total += 2.0 * traj_distance(&samples.samples[i], &samples.samples[j])?;
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// Average (ASD) and final (FSD) nearest-neighbour self distances.
pub fn asd_fsd(samples: &SampleSet) -> Result<(f64, f64)> {
    samples.require_pairs("ASD/FSD")?;
    let k = samples.len();
    let (mut asd, mut fsd) = (0.0, 0.0);
    for i in 0..k {
        let (mut best_avg, mut best_fin) = (f64::INFINITY, f64::INFINITY);
        for j in (0..k).filter(|&j| j != i) {
            let (a, b) = (&samples.samples[i], &samples.samples[j]);
            best_avg = best_avg.min(mean_step_distance(a, b));
            best_fin = best_fin.min(final_distance(a, b));
        }
        asd += best_avg;
        fsd += best_fin;
    }
    Ok((asd / k as f64, fsd / k as f64))
}

/// MMADE and MMFDE: mean of ADE/FDE over every trajectory in `gt_set`.
pub fn mm_metrics(samples: &SampleSet, gt_set: &[Trajectory]) -> Result<(f64, f64)> {
    if gt_set.is_empty() {
        return Err(Error::Empty("multi-modal ground-truth set".into()));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for gt in gt_set {
        a += ade(samples, gt)?;
        f += fde(samples, gt)?;
    }
    let n = gt_set.len() as f64;
    Ok((a / n, f / n))
}

/// For every example, the futures of all examples whose flattened context lies within `eps`
/// of that example's context. Membership is pairwise to the anchor (not transitive), and an
/// example's own future is always included.
pub fn build_multimodal_gt(
    dataset: &Dataset,
    eps: f64,
) -> Result<BTreeMap<i64, Vec<Trajectory>>> {
    if !(eps >= 0.0) {
        return Err(Error::Invalid(format!("eps must be >= 0, got {eps}")));
    }
    let contexts: Vec<Vec<f64>> = dataset.examples.iter().map(|e| e.context.flat()).collect();
    let eps2 = eps * eps;
    let mut out = BTreeMap::new();
    for (i, anchor) in dataset.examples.iter().enumerate() {
        let mut set = Vec::new();
        for (j, other) in dataset.examples.iter().enumerate() {
            if contexts[j].len() != contexts[i].len() {
                return Err(Error::Shape("context lengths differ".into()));
            }
            if i == j || sq_dist(&contexts[i], &contexts[j]) <= eps2 {
                set.push(other.future.clone());
            }
        }
        out.insert(anchor.id, set);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub apd: f64,
    pub asd: f64,
    pub fsd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
}

impl MetricValues {
    pub const COLUMNS: [&'static str; 7] = ["apd", "asd", "fsd", "ade", "fde", "mmade", "mmfde"];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.apd, self.asd, self.fsd, self.ade, self.fde, self.mmade, self.mmfde,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: i64,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_example: Vec<ExampleMetrics>,
    pub mean: MetricValues,
}

/// All seven metrics for one sample set.
pub fn evaluate_sample_set(
    samples: &SampleSet,
    gt: &Trajectory,
    gt_set: &[Trajectory],
) -> Result<MetricValues> {
    let (asd, fsd) = asd_fsd(samples)?;
    let (mmade, mmfde) = mm_metrics(samples, gt_set)?;
    Ok(MetricValues {
        apd: apd(samples)?,
        asd,
        fsd,
        ade: ade(samples, gt)?,
        fde: fde(samples, gt)?,
        mmade,
        mmfde,
    })
}

/// Evaluates one sample set per dataset example (matched by id). Means are accumulated in
/// dataset order.
pub fn evaluate_dataset(
    dataset: &Dataset,
    samples: &BTreeMap<i64, SampleSet>,
    eps: f64,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let missing: Vec<i64> = dataset
        .examples
        .iter()
        .map(|e| e.id)
        .filter(|id| !samples.contains_key(id))
        .collect();
    let ids: HashSet<i64> = dataset.examples.iter().map(|e| e.id).collect();
    let extra: Vec<i64> = samples.keys().copied().filter(|id| !ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Misaligned([missing, extra].concat()));
    }
    let gt_sets = build_multimodal_gt(dataset, eps)?;
    let mut per_example = Vec::with_capacity(dataset.len());
    let mut sums = [0.0; 7];
    for ex in &dataset.examples {
        let values = evaluate_sample_set(&samples[&ex.id], &ex.future, &gt_sets[&ex.id])?;
        for (s, v) in sums.iter_mut().zip(values.as_array()) {
            *s += v;
        }
        per_example.push(ExampleMetrics { id: ex.id, values });
    }
    let n = dataset.len() as f64;
    let mean = MetricValues {
        apd: sums[0] / n,
        asd: sums[1] / n,
        fsd: sums[2] / n,
        ade: sums[3] / n,
        fde: sums[4] / n,
        mmade: sums[5] / n,
        mmfde: sums[6] / n,
    };
    Ok(MetricsReport { per_example, mean })
}
