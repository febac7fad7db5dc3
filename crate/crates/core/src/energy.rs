//! Diversity and accuracy objectives over decoded sample sets, with analytic gradients with
//! respect to the (flattened) samples and latent codes.
//!
//! All distances are flattened Euclidean. Pairwise averages run over ordered pairs and divide
//! by `K (K - 1)`; inside the composite losses a set with `K = 1` contributes zero diversity
//! and similarity energy.

use serde::{Deserialize, Serialize};

use crate::dpp::{self, DppKernel, GroundSet, KernelConfig};
use crate::error::{Error, Result};
use crate::flows::AffineFlowSet;
use crate::linalg::sq_dist;
use crate::trajectory::{SampleSet, Trajectory};

/// Partition of trajectory coordinate indices into a "keep similar" block and a
/// "make diverse" block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSplit {
    pub similar: Vec<usize>,
    pub diverse: Vec<usize>,
}

impl JointSplit {
    /// Both blocks must be disjoint and together cover `0..dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = vec![false; dim];
        for &d in self.similar.iter().chain(&self.diverse) {
            if d >= dim {
                return Err(Error::Invalid(format!("split index {d} out of range for D = {dim}")));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Invalid(format!("split index {d} appears twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("split does not cover every dimension".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub sigma_d: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    #[serde(default)]
    pub lambda_s: f64,
    pub beta: f64,
    #[serde(default)]
    pub joint_split: Option<JointSplit>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            sigma_d: 1.0,
            lambda_d: 25.0,
            lambda_r: 2.0,
            lambda_s: 0.0,
            beta: 1.0,
            joint_split: None,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::Invalid(format!("sigma_d must be > 0, got {}", self.sigma_d)));
        }
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_r", self.lambda_r),
            ("lambda_s", self.lambda_s),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn pair_norm(k: usize) -> f64 {
    1.0 / (k * (k - 1)) as f64
}

fn require_pairs(k: usize, what: &str) -> Result<()> {
    if k < 2 {
        return Err(Error::Invalid(format!("{what} needs K >= 2 samples")));
    }
    Ok(())
}

/// `E_d` over flat vectors, with its gradient. Zero for `K < 2`.
pub fn diversity_energy_grad(xs: &[Vec<f64>], sigma_d: f64) -> (f64, Vec<Vec<f64>>) {
    let k = xs.len();
    let mut grad = vec![vec![0.0; xs.first().map_or(0, Vec::len)]; k];
    if k < 2 {
        return (0.0, grad);
    }
    let c = pair_norm(k);
    let mut e = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let w = (-sq_dist(&xs[i], &xs[j]) / sigma_d).exp();
            e += 2.0 * w;
            // d/dx_i of the two ordered terms: 2 * w * (-2 / sigma) * (x_i - x_j)
            let f = -4.0 * c * w / sigma_d;
            for d in 0..xs[i].len() {
                let diff = xs[i][d] - xs[j][d];
                grad[i][d] += f * diff;
                grad[j][d] -= f * diff;
            }
        }
    }
    (c * e, grad)
}

/// `E_s`: mean squared pairwise distance, with its gradient. Zero for `K < 2`.
pub fn similarity_energy_grad(xs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let k = xs.len();
    let mut grad = vec![vec![0.0; xs.first().map_or(0, Vec::len)]; k];
    if k < 2 {
        return (0.0, grad);
    }
    let c = pair_norm(k);
    let mut e = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            e += 2.0 * sq_dist(&xs[i], &xs[j]);
            for d in 0..xs[i].len() {
                let diff = xs[i][d] - xs[j][d];
                grad[i][d] += 4.0 * c * diff;
                grad[j][d] -= 4.0 * c * diff;
            }
        }
    }
    (c * e, grad)
}

/// `E_r = min_k |x_k - gt|^2`, with its gradient (through the lowest-index minimizer).
pub fn reconstruction_energy_grad(xs: &[Vec<f64>], gt: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut grad = vec![vec![0.0; gt.len()]; xs.len()];
    let mut best = (usize::MAX, f64::INFINITY);
    for (k, x) in xs.iter().enumerate() {
        let d = sq_dist(x, gt);
        if d < best.1 {
            best = (k, d);
        }
    }
    if best.0 != usize::MAX {
        for (g, (x, y)) in grad[best.0].iter_mut().zip(xs[best.0].iter().zip(gt)) {
            *g = 2.0 * (x - y);
        }
    }
    (best.1, grad)
}

fn flats(samples: &SampleSet) -> Vec<Vec<f64>> {
    samples.samples.iter().map(|s| s.flat().to_vec()).collect()
}

/// `E_d = 1/(K(K-1)) sum_{i != j} exp(-D^2(x_i, x_j) / sigma_d)`.
pub fn diversity_energy(samples: &SampleSet, sigma_d: f64) -> Result<f64> {
    require_pairs(samples.len(), "diversity energy")?;
    if !(sigma_d > 0.0) {
        return Err(Error::Invalid(format!("sigma_d must be > 0, got {sigma_d}")));
    }
    Ok(diversity_energy_grad(&flats(samples), sigma_d).0)
}

/// `E_r = min_k D^2(x_k, gt)`.
pub fn reconstruction_energy(samples: &SampleSet, gt: &Trajectory) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    if samples.samples[0].shape() != gt.shape() {
        return Err(Error::Shape("samples and ground truth differ in shape".into()));
    }
    Ok(reconstruction_energy_grad(&flats(samples), gt.flat()).0)
}

/// `E_s` over the `split.similar` coordinates only.
pub fn similarity_energy(samples: &SampleSet, split: &JointSplit) -> Result<f64> {
    require_pairs(samples.len(), "similarity energy")?;
    split.validate(samples.samples[0].dim())?;
    let xs: Vec<Vec<f64>> = samples
        .samples
        .iter()
        .map(|s| s.slice_dims(&split.similar))
        .collect();
    Ok(similarity_energy_grad(&xs).0)
}

/// Negative expected cardinality of the kernel's DPP.
pub fn dsf_loss(kernel: &DppKernel) -> f64 {
    -dpp::expected_cardinality(kernel)
}

/// DSF loss with gradients with respect to the ground-set items and their latent codes.
///
/// With `M = (L + I)^{-1}`, `d tr(I - M) = tr(M^2 dL)`, so `dLoss/dL = -M^2`; this is pushed
/// through `L_ij = r_i S_ij r_j`, the RBF similarity, and the latent quality.
pub fn dsf_loss_grad(
    ground: &GroundSet,
    config: &KernelConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let kernel = dpp::build_kernel(ground, config)?;
    let loss = dsf_loss(&kernel);
    let n = kernel.len();
    let v = kernel.eigenvectors();
    let inv_sq: Vec<f64> = kernel
        .eigenvalues()
        .iter()
        .map(|l| 1.0 / ((1.0 + l) * (1.0 + l)))
        .collect();
    // G = dLoss/dL = -V diag(1/(1+lambda)^2) V^T
    let mut g = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|m| v[(i, m)] * inv_sq[m] * v[(j, m)]).sum();
            g[(i, j)] = -s;
            g[(j, i)] = -s;
        }
    }
    let r = kernel.quality();
    let s = kernel.similarity();
    let k = config.sim_scale;
    let dim = ground.items[0].len();
    let mut grad_items = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            // two symmetric entries, each dL_ij/dS_ij = r_i r_j, dS/dx_i = -2k S (x_i - x_j)
            let f = 2.0 * g[(i, j)] * r[i] * r[j] * s[(i, j)] * (-2.0 * k);
            for d in 0..dim {
                let diff = ground.items[i][d] - ground.items[j][d];
                grad_items[i][d] += f * diff;
                grad_items[j][d] -= f * diff;
            }
        }
    }
    let radius = config.radius()?;
    let mut grad_latents = vec![vec![0.0; config.latent_dim]; n];
    for i in 0..n {
        let z = &ground.latents[i];
        let zz: f64 = z.iter().map(|v| v * v).sum();
        if zz <= radius * radius {
            continue;
        }
        let dloss_dr: f64 = 2.0 * (0..n).map(|j| g[(i, j)] * s[(i, j)] * r[j]).sum::<f64>();
        for (gz, zi) in grad_latents[i].iter_mut().zip(z) {
            *gz = dloss_dr * (-2.0 * zi * r[i]);
        }
    }
    Ok((loss, grad_items, grad_latents))
}

/// Unweighted components of the DLow objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DlowTerms {
    /// Sum over flows of KL to the standard normal.
    pub kl: f64,
    pub diversity: f64,
    pub reconstruction: f64,
    pub similarity: f64,
}

impl DlowTerms {
    /// `beta * KL + lambda_d E_d + lambda_r E_r + lambda_s E_s`.
    pub fn total(&self, cfg: &EnergyConfig) -> f64 {
        self.weighted(cfg).iter().map(|(_, v)| v).sum()
    }

    pub fn weighted(&self, cfg: &EnergyConfig) -> [(&'static str, f64); 4] {
        [
            ("kl", cfg.beta * self.kl),
            ("diversity", cfg.lambda_d * self.diversity),
            ("reconstruction", cfg.lambda_r * self.reconstruction),
            ("similarity", cfg.lambda_s * self.similarity),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlowLoss {
    pub total: f64,
    pub terms: DlowTerms,
}

/// Energy part of the DLow objective for one decoded set, with per-sample gradients of the
/// weighted energy sum (KL excluded).
pub fn dlow_energy_grad(
    xs: &[Trajectory],
    gt: &Trajectory,
    cfg: &EnergyConfig,
) -> Result<(DlowTerms, Vec<Vec<f64>>)> {
    let first = xs.first().ok_or_else(|| Error::Empty("sample set".into()))?;
    let (t, dim) = first.shape();
    if xs.iter().any(|x| x.shape() != (t, dim)) || gt.shape() != (t, dim) {
        return Err(Error::Shape("samples and ground truth differ in shape".into()));
    }
    let mut grad = vec![vec![0.0; t * dim]; xs.len()];
    let mut terms = DlowTerms::default();

    let scatter = |grad: &mut Vec<Vec<f64>>, part: &[Vec<f64>], dims: &[usize], w: f64| {
        for (g, p) in grad.iter_mut().zip(part) {
            for step in 0..t {
                for (c, &d) in dims.iter().enumerate() {
                    g[step * dim + d] += w * p[step * dims.len() + c];
                }
            }
        }
    };

    match &cfg.joint_split {
        Some(split) => {
            split.validate(dim)?;
            let div: Vec<Vec<f64>> = xs.iter().map(|x| x.slice_dims(&split.diverse)).collect();
            let (ed, gd) = diversity_energy_grad(&div, cfg.sigma_d);
            terms.diversity = ed;
            scatter(&mut grad, &gd, &split.diverse, cfg.lambda_d);
            let sim: Vec<Vec<f64>> = xs.iter().map(|x| x.slice_dims(&split.similar)).collect();
            let (es, gs) = similarity_energy_grad(&sim);
            terms.similarity = es;
            scatter(&mut grad, &gs, &split.similar, cfg.lambda_s);
        }
        None => {
            let flat: Vec<Vec<f64>> = xs.iter().map(|x| x.flat().to_vec()).collect();
            let (ed, gd) = diversity_energy_grad(&flat, cfg.sigma_d);
            terms.diversity = ed;
            for (g, d) in grad.iter_mut().zip(gd) {
                for (a, b) in g.iter_mut().zip(d) {
                    *a += cfg.lambda_d * b;
                }
            }
        }
    }

    let flat: Vec<Vec<f64>> = xs.iter().map(|x| x.flat().to_vec()).collect();
    let (er, gr) = reconstruction_energy_grad(&flat, gt.flat());
    terms.reconstruction = er;
    for (g, d) in grad.iter_mut().zip(gr) {
        for (a, b) in g.iter_mut().zip(d) {
            *a += cfg.lambda_r * b;
        }
    }
    Ok((terms, grad))
}

/// `beta * sum_k KL_k + lambda_d E_d + lambda_r E_r (+ lambda_s E_s in controllable mode)`,
/// where `samples` were decoded from `flows`. In controllable mode `E_d` sees only the
/// `diverse` coordinates.
pub fn dlow_loss(
    flows: &AffineFlowSet,
    samples: &SampleSet,
    gt: &Trajectory,
    cfg: &EnergyConfig,
) -> Result<DlowLoss> {
    cfg.validate()?;
    if flows.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} flows but {} samples",
            flows.len(),
            samples.len()
        )));
    }
    let (mut terms, _) = dlow_energy_grad(&samples.samples, gt, cfg)?;
    terms.kl = flows.kl_terms()?.iter().sum();
    Ok(DlowLoss {
        total: terms.total(cfg),
        terms,
    })
}

/// Joint multi-agent sampler loss: best-of-K squared reconstruction error, plus the summed KL
/// terms, plus the RBF pairwise proximity penalty between joint samples (zero for `K = 1`).
/// Each joint sample is a list of per-agent trajectories, compared after concatenation.
pub fn joint_sampler_loss(
    joint_samples: &[Vec<Trajectory>],
    gt: &[Trajectory],
    flow_kls: &[f64],
    sigma_d: f64,
) -> Result<f64> {
    if joint_samples.is_empty() {
        return Err(Error::Empty("joint sample list".into()));
    }
    if !(sigma_d > 0.0) {
        return Err(Error::Invalid(format!("sigma_d must be > 0, got {sigma_d}")));
    }
    let concat = |agents: &[Trajectory]| -> Result<Vec<f64>> {
        if agents.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} agents vs {} in ground truth",
                agents.len(),
                gt.len()
            )));
        }
        let mut v = Vec::new();
        for (a, g) in agents.iter().zip(gt) {
            if a.shape() != g.shape() {
                return Err(Error::Shape("agent trajectory shape mismatch".into()));
            }
            v.extend_from_slice(a.flat());
        }
        Ok(v)
    };
    let ys: Vec<Vec<f64>> = joint_samples.iter().map(|s| concat(s)).collect::<Result<_>>()?;
    let target: Vec<f64> = gt.iter().flat_map(|g| g.flat().iter().copied()).collect();
    let recon = ys
        .iter()
        .map(|y| sq_dist(y, &target))
        .fold(f64::INFINITY, f64::min);
    let kl: f64 = flow_kls.iter().sum();
    let (div, _) = diversity_energy_grad(&ys, sigma_d);
    Ok(recon + kl + div)
}
