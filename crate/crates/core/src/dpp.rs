//! L-ensemble DPP kernels over trajectory ground sets.
//!
//! The kernel is `L = Diag(r) S Diag(r)` with an RBF similarity `S_ij = exp(-k d^2(x_i, x_j))`
//! over flattened trajectories and a latent-space quality `r` that is flat (`= omega`) inside
//! the chi-squared sphere holding `rho` of the prior mass and decays as
//! `omega * exp(-|z|^2 + R^2)` outside it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, principal_submatrix, sq_dist, sym_eigen};

/// Eigenvalues in `[-PSD_RTOL * max(1, lambda_max), 0)` are clamped to zero.
pub const PSD_RTOL: f64 = 1e-8;

/// Subset enumeration limit for [`brute_force_oracle`].
pub const BRUTE_FORCE_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// RBF scale `k` of the trajectory similarity.
    pub sim_scale: f64,
    /// Base quality `omega` inside the latent sphere.
    pub base_quality: f64,
    /// Prior mass `rho` inside the quality sphere.
    pub rho: f64,
    pub latent_dim: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sim_scale: 1.0,
            base_quality: 1.0,
            rho: 0.9,
            latent_dim: 2,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_scale > 0.0 && self.sim_scale.is_finite()) {
            return Err(Error::Invalid(format!("sim_scale must be > 0, got {}", self.sim_scale)));
        }
        if !(self.base_quality > 0.0 && self.base_quality.is_finite()) {
            return Err(Error::Invalid(format!(
                "base_quality must be > 0, got {}",
                self.base_quality
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Invalid("latent_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> Result<f64> {
        quality_radius(self.latent_dim, self.rho)
    }
}

/// Candidate items (flattened trajectories) aligned with the latent codes that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundSet {
    pub items: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
}

impl GroundSet {
    pub fn new(items: Vec<Vec<f64>>, latents: Vec<Vec<f64>>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("ground set".into()));
        }
        if items.len() != latents.len() {
            return Err(Error::Shape(format!(
                "{} items but {} latent codes",
                items.len(),
                latents.len()
            )));
        }
        Ok(Self { items, latents })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DppKernel {
    l: DMatrix<f64>,
    similarity: DMatrix<f64>,
    quality: Vec<f64>,
    eigvals: Vec<f64>,
    eigvecs: DMatrix<f64>,
}

impl DppKernel {
    /// Kernel from an explicit quality/similarity decomposition.
    pub fn from_parts(similarity: DMatrix<f64>, quality: Vec<f64>) -> Result<Self> {
        let n = quality.len();
        if similarity.nrows() != n || similarity.ncols() != n {
            return Err(Error::Shape(format!(
                "similarity {}x{} for {n} qualities",
                similarity.nrows(),
                similarity.ncols()
            )));
        }
        let l = DMatrix::from_fn(n, n, |i, j| quality[i] * similarity[(i, j)] * quality[j]);
        Self::with_eigen(l, similarity, quality)
    }

    /// General L-ensemble from a symmetric PSD matrix. Quality is taken as `sqrt(L_ii)` and
    /// similarity as the correspondingly normalized matrix (zero rows get `S_ii = 1`).
    pub fn from_matrix(l: DMatrix<f64>) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n {
            return Err(Error::Shape("kernel matrix is not square".into()));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix".into()));
        }
        let asym = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (l[(i, j)] - l[(j, i)]).abs())
            .fold(0.0, f64::max);
        let scale = l.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::Invalid(format!("kernel matrix not symmetric ({asym:.2e})")));
        }
        let quality: Vec<f64> = (0..n).map(|i| l[(i, i)].max(0.0).sqrt()).collect();
        let similarity = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if quality[i] > 0.0 && quality[j] > 0.0 {
                l[(i, j)] / (quality[i] * quality[j])
            } else {
                0.0
            }
        });
        Self::with_eigen(l, similarity, quality)
    }

    fn with_eigen(l: DMatrix<f64>, similarity: DMatrix<f64>, quality: Vec<f64>) -> Result<Self> {
        let (mut eigvals, eigvecs) = sym_eigen(&l);
        let max_eig = eigvals.last().copied().unwrap_or(0.0);
        let tol = PSD_RTOL * max_eig.max(1.0);
        if let Some(&min_eig) = eigvals.first() {
            if min_eig < -tol || !min_eig.is_finite() {
                return Err(Error::NotPsd { min_eig, tol });
            }
        }
        for v in &mut eigvals {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            l,
            similarity,
            quality,
            eigvals,
            eigvecs,
        })
    }

    pub fn len(&self) -> usize {
        self.quality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quality.is_empty()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn similarity(&self) -> &DMatrix<f64> {
        &self.similarity
    }

    pub fn quality(&self) -> &[f64] {
        &self.quality
    }

    /// Ascending, clamped to be nonnegative.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    /// `log det(L + I)` from the cached spectrum.
    pub fn log_normalizer(&self) -> f64 {
        self.eigvals.iter().map(|l| l.ln_1p()).sum()
    }
}

/// RBF similarity `S_ij = exp(-k * |x_i - x_j|^2)`.
pub fn build_similarity(items: &[Vec<f64>], k: f64) -> Result<DMatrix<f64>> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Invalid(format!("similarity scale must be > 0, got {k}")));
    }
    let n = items.len();
    if let Some(first) = items.first() {
        if items.iter().any(|x| x.len() != first.len()) {
            return Err(Error::Shape("ground-set items differ in length".into()));
        }
    }
    if items.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ground-set item".into()));
    }
    let mut s = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (-k * sq_dist(&items[i], &items[j])).exp();
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Radius `R` of the ball holding `rho` of the mass of a standard normal in `n_z` dimensions:
/// `R^2` is the chi-squared quantile, found by bracketing and bisecting the regularized lower
/// incomplete gamma function `P(n_z/2, R^2/2) = rho`.
pub fn quality_radius(n_z: usize, rho: f64) -> Result<f64> {
    if n_z == 0 {
        return Err(Error::Invalid("latent dimension must be >= 1".into()));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    let a = n_z as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let mut hi = n_z as f64 + 1.0;
    while cdf(hi) < rho {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).sqrt())
}

fn quality_with_radius(z: &[f64], omega: f64, r2: f64) -> f64 {
    let zz: f64 = z.iter().map(|v| v * v).sum();
    if zz <= r2 {
        omega
    } else {
        omega * (r2 - zz).exp()
    }
}

/// Latent-space quality: `omega` inside the sphere, `omega * exp(-z'z + R^2)` outside.
pub fn build_quality(latents: &[Vec<f64>], config: &KernelConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let r = config.radius()?;
    latents
        .iter()
        .map(|z| {
            if z.len() != config.latent_dim {
                return Err(Error::Shape(format!(
                    "latent of length {} for n_z = {}",
                    z.len(),
                    config.latent_dim
                )));
            }
            Ok(quality_with_radius(z, config.base_quality, r * r))
        })
        .collect()
}

pub fn build_kernel(ground: &GroundSet, config: &KernelConfig) -> Result<DppKernel> {
    let similarity = build_similarity(&ground.items, config.sim_scale)?;
    let quality = build_quality(&ground.latents, config)?;
    DppKernel::from_parts(similarity, quality)
}

/// `E|Y| = sum_n lambda_n / (lambda_n + 1)` over the cached spectrum.
pub fn expected_cardinality(kernel: &DppKernel) -> f64 {
    kernel.eigvals.iter().map(|l| l / (l + 1.0)).sum()
}

/// `tr(I - (L + I)^{-1})` by direct solve, independent of the eigendecomposition.
pub fn expected_cardinality_trace(kernel: &DppKernel) -> Result<f64> {
    let n = kernel.len();
    let shifted = &kernel.l + DMatrix::<f64>::identity(n, n);
    let inv = shifted
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("L + I is singular".into()))?;
    Ok(n as f64 - inv.trace())
}

/// `log P(Y) = log det(L_Y) - log det(L + I)`, `-inf` when `L_Y` is singular.
pub fn dpp_log_prob(kernel: &DppKernel, subset: &[usize]) -> Result<f64> {
    let n = kernel.len();
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::Invalid(format!("index {i} out of range for N = {n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!("duplicate index {i} in subset")));
        }
    }
    let sub = principal_submatrix(&kernel.l, subset);
    let log_det = crate::linalg::log_det_psd(&sub);
    Ok(log_det - kernel.log_normalizer())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResult {
    /// `sum_Y det(L_Y)`, which must equal `det(L + I)`.
    pub normalization: f64,
    /// `sum_Y |Y| det(L_Y) / det(L + I)`.
    pub expected_card: f64,
}

/// Enumerates all `2^N` subsets with LU determinants.
pub fn brute_force_oracle(kernel: &DppKernel) -> Result<OracleResult> {
    let n = kernel.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooLarge {
            n,
            limit: BRUTE_FORCE_MAX_N,
        });
    }
    let mut normalization = 0.0;
    let mut weighted = 0.0;
    let mut idx = Vec::with_capacity(n);
    for mask in 0u32..(1u32 << n) {
        idx.clear();
        idx.extend((0..n).filter(|i| mask & (1 << i) != 0));
        let det = if idx.is_empty() {
            1.0
        } else {
            principal_submatrix(&kernel.l, &idx).determinant()
        };
        normalization += det;
        weighted += idx.len() as f64 * det;
    }
    let full = (&kernel.l + DMatrix::<f64>::identity(n, n)).determinant();
    Ok(OracleResult {
        normalization,
        expected_card: weighted / full,
    })
}

/// Greedy MAP inference. Starting from the empty set, repeatedly adds the item with the
/// largest `log det(L_{Y + x})`, stopping once the best marginal gain is strictly negative.
/// Ties go to the lowest index. Marginal gains come from an incremental Cholesky update:
/// `d_x^2 = L_xx - |c_x|^2` is the squared new pivot, and the gain is `ln d_x^2`.
pub fn greedy_map(kernel: &DppKernel) -> Vec<usize> {
    let n = kernel.len();
    let l = &kernel.l;
    let mut d2: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    let mut chol: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut remaining = vec![true; n];
    let mut selected = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| remaining[i]) {
            let gain = if d2[i] > 0.0 { d2[i].ln() } else { f64::NEG_INFINITY };
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((j, gain)) = best else { break };
        if gain < 0.0 {
            break;
        }
        remaining[j] = false;
        selected.push(j);
        let dj = d2[j].sqrt();
        let cj = chol[j].clone();
        for i in (0..n).filter(|&i| remaining[i]) {
            let e = (l[(j, i)] - crate::linalg::dot(&cj, &chol[i])) / dj;
            chol[i].push(e);
            d2[i] -= e * e;
        }
    }
    selected
}

/// Checks `L = Diag(r) S Diag(r)` to a relative tolerance.
pub fn reconstruction_error(kernel: &DppKernel) -> f64 {
    let n = kernel.len();
    let r = &kernel.quality;
    let mut err = 0.0_f64;
    let mut scale = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let v = r[i] * kernel.similarity[(i, j)] * r[j];
            err = err.max((v - kernel.l[(i, j)]).abs());
            scale = scale.max(kernel.l[(i, j)].abs());
        }
    }
    err / scale.max(f64::MIN_POSITIVE)
}

/// Sum of log pivots of the Cholesky factor of `L_Y`; used to cross-check greedy gains.
pub fn log_det_subset(kernel: &DppKernel, subset: &[usize]) -> f64 {
    let sub = principal_submatrix(&kernel.l, subset);
    match cholesky_lower(&sub) {
        Some(f) => 2.0 * (0..subset.len()).map(|i| f[(i, i)].ln()).sum::<f64>(),
        None if subset.is_empty() => 0.0,
        None => f64::NEG_INFINITY,
    }
}
