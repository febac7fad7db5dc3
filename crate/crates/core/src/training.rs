//! Optimizing latent samplers through a fixed decoder.
//!
//! DSF mode trains `K` latent codes directly against the negative DPP expected cardinality of
//! the decoded set. DLow mode trains `K` affine flows against
//! `beta * sum_k KL_k + lambda_d E_d + lambda_r E_r (+ lambda_s E_s)`, averaged over a fixed
//! set of shared-noise draws (common random numbers, drawn once per run) and a minibatch of
//! examples that walks a seeded permutation of the dataset.
//!
//! RNG streams of `seed`: 0 initializes parameters, 1 draws the noise set, 2 orders examples.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decoders::Decoder;
use crate::dpp::{GroundSet, KernelConfig};
use crate::energy::{self, DlowTerms, EnergyConfig};
use crate::error::{Error, Result};
use crate::flows::{normal_vec, rng_stream, AffineFlowSet, DsfCodes};
use crate::optim::{adam_step, numeric_gradient, AdamConfig, AdamState};
use crate::trajectory::{Context, Dataset, SampleSet, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Dsf,
    Dlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// DSF codes `N(0, 0.1^2)`; DLow `A = I + N(0, 0.01^2)`, `b ~ N(0, 0.1^2)`.
    Random,
    /// DSF codes at the origin; DLow identity flows.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "defaults::iters")]
    pub iters: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::fd_step")]
    pub fd_step: f64,
    #[serde(default = "defaults::draws")]
    pub noise_draws_per_iter: usize,
    #[serde(default = "defaults::draws")]
    pub examples_per_iter: usize,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default = "defaults::init")]
    pub init: Init,
    #[serde(default = "defaults::gradient")]
    pub gradient: GradientMode,
    /// Keep flow 0 at the identity (for reference-sample prediction).
    #[serde(default)]
    pub fix_first_identity: bool,
    /// Per-context linear featurization of the flow parameters.
    #[serde(default)]
    pub context_features: bool,
    /// Return the iterate with the lowest recorded loss instead of the last one.
    #[serde(default = "defaults::keep_best")]
    pub keep_best: bool,
}

mod defaults {
    pub fn iters() -> usize {
        300
    }
    pub fn lr() -> f64 {
        5e-3
    }
    pub fn fd_step() -> f64 {
        1e-4
    }
    pub fn draws() -> usize {
        8
    }
    pub fn init() -> super::Init {
        super::Init::Random
    }
    pub fn keep_best() -> bool {
        true
    }
    pub fn gradient() -> super::GradientMode {
        super::GradientMode::Analytic
    }
}

impl TrainConfig {
    pub fn new(mode: TrainMode, k: usize) -> Self {
        Self {
            mode,
            k,
            iters: defaults::iters(),
            lr: defaults::lr(),
            adam: AdamConfig::default(),
            seed: 0,
            fd_step: defaults::fd_step(),
            noise_draws_per_iter: defaults::draws(),
            examples_per_iter: defaults::draws(),
            kernel: KernelConfig::default(),
            energy: EnergyConfig::default(),
            init: Init::Random,
            gradient: GradientMode::Analytic,
            fix_first_identity: false,
            context_features: false,
            keep_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("K must be >= 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::Invalid("iters must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Invalid("fd_step must be > 0".into()));
        }
        if self.noise_draws_per_iter == 0 || self.examples_per_iter == 0 {
            return Err(Error::Invalid("draw and example counts must be >= 1".into()));
        }
        match self.mode {
            TrainMode::Dsf => self.kernel.validate(),
            TrainMode::Dlow => self.energy.validate(),
        }
    }
}

/// Per-context linear map added to the base flow parameters: for flow `k`,
/// `theta_k(ctx) = base_k + W_k f(ctx)` with `f` the flattened context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowFeaturization {
    pub feature_dim: usize,
    /// One row-major `(n_z^2 + n_z) x feature_dim` block per flow.
    pub weights: Vec<Vec<f64>>,
}

/// Trained sampler parameters; serialized untagged (`{"codes": ...}` or `{"flows": ...}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sampler {
    Dsf(DsfCodes),
    Dlow {
        flows: AffineFlowSet,
        #[serde(default)]
        featurization: Option<FlowFeaturization>,
    },
}

impl Sampler {
    pub fn k(&self) -> usize {
        match self {
            Sampler::Dsf(codes) => codes.len(),
            Sampler::Dlow { flows, .. } => flows.len(),
        }
    }

    pub fn n_z(&self) -> usize {
        match self {
            Sampler::Dsf(codes) => codes.n_z(),
            Sampler::Dlow { flows, .. } => flows.n_z,
        }
    }

    pub fn mode(&self) -> TrainMode {
        match self {
            Sampler::Dsf(_) => TrainMode::Dsf,
            Sampler::Dlow { .. } => TrainMode::Dlow,
        }
    }

    /// Flows specialised to `ctx` (the base flows when not featurized).
    pub fn flows_for(&self, ctx: &Context) -> Result<Option<AffineFlowSet>> {
        match self {
            Sampler::Dsf(_) => Ok(None),
            Sampler::Dlow {
                flows,
                featurization: None,
            } => Ok(Some(flows.clone())),
            Sampler::Dlow {
                flows,
                featurization: Some(feat),
            } => {
                let f = ctx.flat();
                if f.len() != feat.feature_dim {
                    return Err(Error::Shape(format!(
                        "context has {} values, featurization expects {}",
                        f.len(),
                        feat.feature_dim
                    )));
                }
                let base = flows.to_params();
                let per = flows.n_z * flows.n_z + flows.n_z;
                let mut p = base.clone();
                for (k, w) in feat.weights.iter().enumerate() {
                    for r in 0..per {
                        p[k * per + r] += crate::linalg::dot(&w[r * f.len()..(r + 1) * f.len()], &f);
                    }
                }
                Ok(Some(AffineFlowSet::from_params(flows.len(), flows.n_z, &p)?))
            }
        }
    }

    /// The `K` latent codes for `ctx`; `eps` is the shared noise (ignored in DSF mode).
    pub fn latents(&self, ctx: &Context, eps: &[f64]) -> Result<Vec<Vec<f64>>> {
        match self {
            Sampler::Dsf(codes) => Ok(codes.codes.clone()),
            Sampler::Dlow { .. } => self.flows_for(ctx)?.expect("dlow").apply(eps),
        }
    }

    pub fn sample_set<D: Decoder + ?Sized>(
        &self,
        decoder: &D,
        ctx: &Context,
        eps: &[f64],
        context_id: i64,
    ) -> Result<SampleSet> {
        let zs = self.latents(ctx, eps)?;
        decode_set(decoder, &zs, ctx, context_id)
    }
}

pub fn decode_set<D: Decoder + ?Sized>(
    decoder: &D,
    zs: &[Vec<f64>],
    ctx: &Context,
    context_id: i64,
) -> Result<SampleSet> {
    let samples = zs
        .iter()
        .map(|z| decoder.decode(z, ctx))
        .collect::<Result<Vec<_>>>()?;
    SampleSet::new(samples, context_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub best_so_far: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub iters: usize,
    pub trace: Vec<IterRecord>,
    /// Loss at iteration 0.
    pub initial_loss: f64,
    /// Loss of the returned parameters on the iteration-0 minibatch.
    pub final_loss: f64,
    pub best_loss: f64,
    pub final_params: Sampler,
    /// Not serialized so report files stay byte-stable across runs.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Objective evaluated on flat parameter vectors.
trait Objective {
    fn value_grad(&self, params: &[f64]) -> Result<(f64, BTreeMap<String, f64>, Vec<f64>)>;
    fn value(&self, params: &[f64]) -> Result<f64>;
    /// Zeroes gradient entries of parameters held fixed.
    fn mask(&self, _grad: &mut [f64]) {}
}

struct DsfObjective<'a, D: ?Sized> {
    decoder: &'a D,
    contexts: Vec<&'a Context>,
    kernel: KernelConfig,
    n_z: usize,
}

impl<D: Decoder + ?Sized> DsfObjective<'_, D> {
    fn eval(&self, params: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let zs: Vec<Vec<f64>> = params.chunks(self.n_z).map(<[f64]>::to_vec).collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; params.len()];
        for ctx in &self.contexts {
            let items = zs
                .iter()
                .map(|z| Ok(self.decoder.decode(z, ctx)?.flat().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let ground = GroundSet::new(items, zs.clone())?;
            if !want_grad {
                let kernel = crate::dpp::build_kernel(&ground, &self.kernel)?;
                total += energy::dsf_loss(&kernel);
                continue;
            }
            let (loss, g_items, g_latents) = energy::dsf_loss_grad(&ground, &self.kernel)?;
            total += loss;
            for (k, z) in zs.iter().enumerate() {
                let gz = self.decoder.pullback(z, ctx, &g_items[k])?;
                for d in 0..self.n_z {
                    grad[k * self.n_z + d] += gz[d] + g_latents[k][d];
                }
            }
        }
        let n = self.contexts.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grad))
    }
}

impl<D: Decoder + ?Sized> Objective for DsfObjective<'_, D> {
    fn value_grad(&self, params: &[f64]) -> Result<(f64, BTreeMap<String, f64>, Vec<f64>)> {
        let (loss, grad) = self.eval(params, true)?;
        let terms = BTreeMap::from([("expected_cardinality".to_string(), -loss)]);
        Ok((loss, terms, grad))
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }
}

struct DlowObjective<'a, D: ?Sized> {
    decoder: &'a D,
    batch: Vec<(&'a Context, &'a Trajectory)>,
    noise: &'a [Vec<f64>],
    energy: EnergyConfig,
    k: usize,
    n_z: usize,
    /// Flattened-context length when featurized.
    feature_dim: Option<usize>,
    fix_first_identity: bool,
}

impl<D: Decoder + ?Sized> DlowObjective<'_, D> {
    fn per_flow(&self) -> usize {
        self.n_z * self.n_z + self.n_z
    }

    fn base_len(&self) -> usize {
        self.k * self.per_flow()
    }

    fn flows_for(&self, params: &[f64], ctx: &Context) -> (Vec<f64>, Vec<f64>) {
        let mut p = params[..self.base_len()].to_vec();
        let f = match self.feature_dim {
            Some(fd) => {
                let f = ctx.flat();
                let weights = &params[self.base_len()..];
                for (row, pv) in p.iter_mut().enumerate() {
                    *pv += crate::linalg::dot(&weights[row * fd..(row + 1) * fd], &f);
                }
                f
            }
            None => Vec::new(),
        };
        if self.fix_first_identity {
            let id = AffineFlowSet::identity(1, self.n_z).to_params();
            p[..self.per_flow()].copy_from_slice(&id);
        }
        (p, f)
    }

    fn eval(&self, params: &[f64], want_grad: bool) -> Result<(f64, DlowTerms, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let mut acc = DlowTerms::default();
        let per = self.per_flow();
        let n_pairs = (self.batch.len() * self.noise.len()) as f64;
        for (ctx, gt) in &self.batch {
            let (p, f) = self.flows_for(params, ctx);
            let flows = AffineFlowSet::from_params(self.k, self.n_z, &p)?;
            let kl_terms = flows.kl_terms()?;
            let kl: f64 = kl_terms.iter().sum();
            // dLoss/d(theta(ctx)) accumulated over the noise draws of this context
            let mut g_theta = vec![0.0; self.base_len()];
            for eps in self.noise {
                let zs = flows.apply(eps)?;
                let xs = zs
                    .iter()
                    .map(|z| self.decoder.decode(z, ctx))
                    .collect::<Result<Vec<_>>>()?;
                let (mut terms, g_x) = energy::dlow_energy_grad(&xs, gt, &self.energy)?;
                terms.kl = kl;
                acc.kl += terms.kl;
                acc.diversity += terms.diversity;
                acc.reconstruction += terms.reconstruction;
                acc.similarity += terms.similarity;
                if !want_grad {
                    continue;
                }
                for k in 0..self.k {
                    let gz = self.decoder.pullback(&zs[k], ctx, &g_x[k])?;
                    let off = k * per;
                    for i in 0..self.n_z {
                        for j in 0..self.n_z {
                            g_theta[off + i * self.n_z + j] += gz[i] * eps[j];
                        }
                        g_theta[off + self.n_z * self.n_z + i] += gz[i];
                    }
                }
            }
            if !want_grad {
                continue;
            }
            let draws = self.noise.len() as f64;
            for (k, flow) in flows.flows.iter().enumerate() {
                let (ga, gb) = flow.kl_gradient()?;
                let off = k * per;
                for i in 0..self.n_z {
                    for j in 0..self.n_z {
                        g_theta[off + i * self.n_z + j] += draws * self.energy.beta * ga[(i, j)];
                    }
                    g_theta[off + self.n_z * self.n_z + i] += draws * self.energy.beta * gb[i];
                }
            }
            if self.fix_first_identity {
                g_theta[..per].iter_mut().for_each(|g| *g = 0.0);
            }
            for (row, g) in g_theta.iter().enumerate() {
                grad[row] += g;
                if let Some(fd) = self.feature_dim {
                    let base = self.base_len() + row * fd;
                    for (c, fv) in f.iter().enumerate() {
                        grad[base + c] += g * fv;
                    }
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= n_pairs);
        let mean = DlowTerms {
            kl: acc.kl / n_pairs,
            diversity: acc.diversity / n_pairs,
            reconstruction: acc.reconstruction / n_pairs,
            similarity: acc.similarity / n_pairs,
        };
        Ok((mean.total(&self.energy), mean, grad))
    }
}

impl<D: Decoder + ?Sized> Objective for DlowObjective<'_, D> {
    fn value_grad(&self, params: &[f64]) -> Result<(f64, BTreeMap<String, f64>, Vec<f64>)> {
        let (loss, terms, grad) = self.eval(params, true)?;
        let mut map: BTreeMap<String, f64> = terms
            .weighted(&self.energy)
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        map.insert("kl_raw".into(), terms.kl);
        map.insert("diversity_raw".into(), terms.diversity);
        map.insert("reconstruction_raw".into(), terms.reconstruction);
        map.insert("similarity_raw".into(), terms.similarity);
        Ok((loss, map, grad))
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn mask(&self, grad: &mut [f64]) {
        if self.fix_first_identity {
            let per = self.per_flow();
            grad[..per].iter_mut().for_each(|g| *g = 0.0);
            if let Some(fd) = self.feature_dim {
                let start = self.base_len();
                grad[start..start + per * fd].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
}

fn gradient_of(obj: &dyn Objective, params: &[f64], cfg: &TrainConfig) -> Result<(f64, BTreeMap<String, f64>, Vec<f64>)> {
    let (loss, terms, mut grad) = obj.value_grad(params)?;
    if cfg.gradient == GradientMode::FiniteDifference {
        grad = numeric_gradient(|p| obj.value(p), params, cfg.fd_step)?;
    }
    obj.mask(&mut grad);
    Ok((loss, terms, grad))
}

/// Seeded permutation of example indices, walked in windows of `examples_per_iter`.
struct BatchWalker {
    order: Vec<usize>,
    size: usize,
}

impl BatchWalker {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_stream(seed, 2));
        Self {
            order,
            size: size.min(n),
        }
    }

    fn batch(&self, iter: usize) -> Vec<usize> {
        let n = self.order.len();
        (0..self.size)
            .map(|i| self.order[(iter * self.size + i) % n])
            .collect()
    }
}

fn check_decoder<D: Decoder + ?Sized>(decoder: &D, dataset: &Dataset) -> Result<()> {
    let shape = (dataset.meta.future_steps, dataset.meta.dim);
    if decoder.output_shape() != shape {
        return Err(Error::Shape(format!(
            "decoder emits {:?}, dataset futures are {:?}",
            decoder.output_shape(),
            shape
        )));
    }
    Ok(())
}

fn finish(
    mode: TrainMode,
    cfg: &TrainConfig,
    trace: Vec<IterRecord>,
    final_loss: f64,
    final_params: Sampler,
    start: Instant,
) -> TrainReport {
    let best = trace.iter().map(|r| r.loss).fold(final_loss, f64::min);
    TrainReport {
        mode,
        seed: cfg.seed,
        iters: cfg.iters,
        initial_loss: trace.first().map_or(final_loss, |r| r.loss),
        final_loss,
        best_loss: best,
        trace,
        final_params,
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
}

/// Trains DSF codes starting from the configured initialization.
pub fn train_dsf<D: Decoder + ?Sized>(
    dataset: &Dataset,
    decoder: &D,
    cfg: &TrainConfig,
) -> Result<(DsfCodes, TrainReport)> {
    let n_z = decoder.latent_dim();
    let mut rng = rng_stream(cfg.seed, 0);
    let init = match cfg.init {
        Init::Random => normal_vec(&mut rng, cfg.k * n_z)
            .into_iter()
            .map(|v| 0.1 * v)
            .collect(),
        Init::Identity => vec![0.0; cfg.k * n_z],
    };
    train_dsf_from(dataset, decoder, cfg, DsfCodes::from_params(n_z, &init)?)
}

/// Trains DSF codes from the given starting codes.
pub fn train_dsf_from<D: Decoder + ?Sized>(
    dataset: &Dataset,
    decoder: &D,
    cfg: &TrainConfig,
    init: DsfCodes,
) -> Result<(DsfCodes, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_decoder(decoder, dataset)?;
    let n_z = decoder.latent_dim();
    if init.n_z() != n_z || init.len() != cfg.k {
        return Err(Error::Shape("initial codes do not match K / n_z".into()));
    }
    if cfg.kernel.latent_dim != n_z {
        return Err(Error::Shape(format!(
            "kernel latent_dim {} but decoder n_z {n_z}",
            cfg.kernel.latent_dim
        )));
    }
    let walker = BatchWalker::new(dataset.len(), cfg.examples_per_iter, cfg.seed);
    let objective_at = |iter: usize| DsfObjective {
        decoder,
        contexts: walker
            .batch(iter)
            .into_iter()
            .map(|i| &dataset.examples[i].context)
            .collect(),
        kernel: cfg.kernel,
        n_z,
    };
    let (params, trace) = optimize(&objective_at, init.to_params(), cfg)?;
    let final_loss = objective_at(0).value(&params)?;
    let codes = DsfCodes::from_params(n_z, &params)?;
    let report = finish(
        TrainMode::Dsf,
        cfg,
        trace,
        final_loss,
        Sampler::Dsf(codes.clone()),
        start,
    );
    Ok((codes, report))
}

fn optimize<O: Objective>(
    objective_at: &dyn Fn(usize) -> O,
    mut params: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<IterRecord>)> {
    let mut state = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut best = f64::INFINITY;
    let mut best_params = params.clone();
    for iter in 0..cfg.iters {
        let obj = objective_at(iter);
        let wrap = |e: Error| Error::Training {
            iter,
            source: Box::new(e),
        };
        let (loss, terms, grad) = gradient_of(&obj, &params, cfg).map_err(wrap)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(wrap(Error::NonFinite("loss or gradient".into())));
        }
        if loss < best {
            best = loss;
            best_params.copy_from_slice(&params);
        }
        trace.push(IterRecord {
            iter,
            loss,
            best_so_far: best,
            terms,
        });
        adam_step(&mut params, &grad, &mut state, cfg.lr, &cfg.adam);
    }
    Ok((if cfg.keep_best { best_params } else { params }, trace))
}

/// Trains DLow flows (plus the optional featurization block).
pub fn train_dlow<D: Decoder + ?Sized>(
    dataset: &Dataset,
    decoder: &D,
    cfg: &TrainConfig,
) -> Result<(Sampler, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_decoder(decoder, dataset)?;
    if let Some(split) = &cfg.energy.joint_split {
        split.validate(dataset.meta.dim)?;
    }
    let n_z = decoder.latent_dim();
    let k = cfg.k;
    let mut rng = rng_stream(cfg.seed, 0);
    let mut flows = match cfg.init {
        Init::Random => {
            let mut p = Vec::with_capacity(k * (n_z * n_z + n_z));
            for _ in 0..k {
                let da = normal_vec(&mut rng, n_z * n_z);
                let a = DMatrix::<f64>::identity(n_z, n_z)
                    + DMatrix::from_row_slice(n_z, n_z, &da) * 0.01;
                for i in 0..n_z {
                    p.extend(a.row(i).iter());
                }
                p.extend(normal_vec(&mut rng, n_z).into_iter().map(|v| 0.1 * v));
            }
            AffineFlowSet::from_params(k, n_z, &p)?
        }
        Init::Identity => AffineFlowSet::identity(k, n_z),
    };
    if cfg.fix_first_identity {
        flows.flows[0] = crate::flows::AffineFlow::identity(n_z);
    }
    let (noise, walker, feature_dim) = dlow_parts(dataset, decoder, cfg);
    let mut params = flows.to_params();
    if let Some(fd) = feature_dim {
        params.extend(std::iter::repeat_n(0.0, flows.param_count() * fd));
    }
    let objective_at = |iter: usize| dlow_objective(dataset, decoder, cfg, &noise, &walker, feature_dim, iter);
    let (params, trace) = optimize(&objective_at, params, cfg)?;
    let final_loss = objective_at(0).value(&params).map_err(|e| Error::Training {
        iter: cfg.iters,
        source: Box::new(e),
    })?;
    let base_len = flows.param_count();
    let mut base = AffineFlowSet::from_params(k, n_z, &params[..base_len])?;
    if cfg.fix_first_identity {
        base.flows[0] = crate::flows::AffineFlow::identity(n_z);
    }
    let base = AffineFlowSet::new(base.flows).map_err(|e| Error::Training {
        iter: cfg.iters,
        source: Box::new(e),
    })?;
    let featurization = feature_dim.map(|fd| FlowFeaturization {
        feature_dim: fd,
        weights: params[base_len..]
            .chunks((n_z * n_z + n_z) * fd)
            .map(<[f64]>::to_vec)
            .collect(),
    });
    let sampler = Sampler::Dlow {
        flows: base,
        featurization,
    };
    let report = finish(TrainMode::Dlow, cfg, trace, final_loss, sampler.clone(), start);
    Ok((sampler, report))
}

type DlowParts = (Vec<Vec<f64>>, BatchWalker, Option<usize>);

fn dlow_parts<D: Decoder + ?Sized>(dataset: &Dataset, decoder: &D, cfg: &TrainConfig) -> DlowParts {
    let mut noise_rng = rng_stream(cfg.seed, 1);
    let noise = (0..cfg.noise_draws_per_iter)
        .map(|_| normal_vec(&mut noise_rng, decoder.latent_dim()))
        .collect();
    let walker = BatchWalker::new(dataset.len(), cfg.examples_per_iter, cfg.seed);
    let feature_dim = cfg
        .context_features
        .then(|| dataset.examples[0].context.flat().len());
    (noise, walker, feature_dim)
}

fn dlow_objective<'a, D: Decoder + ?Sized>(
    dataset: &'a Dataset,
    decoder: &'a D,
    cfg: &TrainConfig,
    noise: &'a [Vec<f64>],
    walker: &BatchWalker,
    feature_dim: Option<usize>,
    iter: usize,
) -> DlowObjective<'a, D> {
    DlowObjective {
        decoder,
        batch: walker
            .batch(iter)
            .into_iter()
            .map(|i| (&dataset.examples[i].context, &dataset.examples[i].future))
            .collect(),
        noise,
        energy: cfg.energy.clone(),
        k: cfg.k,
        n_z: decoder.latent_dim(),
        feature_dim,
        fix_first_identity: cfg.fix_first_identity,
    }
}

/// Loss, analytic gradient and central-difference gradient of the DLow training objective
/// at iteration `iter` (same minibatch and noise draws as `train_dlow`), for the flat
/// parameter vector `params` (base flows, then the featurization block when enabled).
pub fn dlow_training_gradients<D: Decoder + ?Sized>(
    dataset: &Dataset,
    decoder: &D,
    cfg: &TrainConfig,
    params: &[f64],
    iter: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (noise, walker, feature_dim) = dlow_parts(dataset, decoder, cfg);
    let obj = dlow_objective(dataset, decoder, cfg, &noise, &walker, feature_dim, iter);
    let expected = obj.base_len() * (1 + feature_dim.unwrap_or(0));
    if params.len() != expected {
        return Err(Error::Shape(format!("{} parameters, expected {expected}", params.len())));
    }
    let (loss, _, mut analytic) = obj.value_grad(params)?;
    obj.mask(&mut analytic);
    let mut numeric = numeric_gradient(|x| obj.value(x), params, cfg.fd_step)?;
    obj.mask(&mut numeric);
    Ok((loss, analytic, numeric))
}

/// Analytic and central-difference gradients of the DSF objective at `codes`, averaged over
/// `contexts`.
pub fn dsf_gradient_check<D: Decoder + ?Sized>(
    decoder: &D,
    contexts: &[&Context],
    kernel: &KernelConfig,
    codes: &DsfCodes,
    fd_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let obj = DsfObjective {
        decoder,
        contexts: contexts.to_vec(),
        kernel: *kernel,
        n_z: codes.n_z(),
    };
    let p = codes.to_params();
    let analytic = obj.value_grad(&p)?.2;
    let numeric = numeric_gradient(|x| obj.value(x), &p, fd_step)?;
    Ok((analytic, numeric))
}

/// Analytic and central-difference gradients of the DLow objective with respect to the flat
/// flow parameters, for the given examples and noise draws.
pub fn dlow_gradient_check<D: Decoder + ?Sized>(
    decoder: &D,
    batch: &[(&Context, &Trajectory)],
    noise: &[Vec<f64>],
    energy: &EnergyConfig,
    flows: &AffineFlowSet,
    fd_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let obj = DlowObjective {
        decoder,
        batch: batch.to_vec(),
        noise,
        energy: energy.clone(),
        k: flows.len(),
        n_z: flows.n_z,
        feature_dim: None,
        fix_first_identity: false,
    };
    let p = flows.to_params();
    let analytic = obj.value_grad(&p)?.2;
    let numeric = numeric_gradient(|x| obj.value(x), &p, fd_step)?;
    Ok((analytic, numeric))
}

/// `max_i |a_i - n_i| / max(max_i |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
