//! Latent samplers: affine flows `z_k = A_k eps + b_k` driven by one shared noise draw, and
//! directly parameterized latent codes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Flows with `|det A| <= MIN_ABS_DET` are rejected as non-invertible.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineFlow {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Serialize for AffineFlow {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let a = (0..self.a.nrows())
            .map(|i| self.a.row(i).iter().copied().collect())
            .collect();
        FlowRepr {
            a,
            b: self.b.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineFlow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = FlowRepr::deserialize(d)?;
        let n = repr.b.len();
        if repr.a.len() != n || repr.a.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("flow matrix must be n_z x n_z"));
        }
        Ok(AffineFlow::new(
            DMatrix::from_row_slice(n, n, &repr.a.concat()),
            DVector::from_vec(repr.b),
        ))
    }
}

impl AffineFlow {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self { a, b }
    }

    pub fn identity(n_z: usize) -> Self {
        Self::new(DMatrix::identity(n_z, n_z), DVector::zeros(n_z))
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn det(&self) -> f64 {
        self.a.clone().lu().determinant()
    }

    pub fn check_invertible(&self) -> Result<f64> {
        let det = self.det();
        if !(det.abs() > MIN_ABS_DET) {
            return Err(Error::NotInvertible(det.abs()));
        }
        Ok(det)
    }

    pub fn apply(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::Shape(format!(
                "noise of length {} for n_z = {}",
                eps.len(),
                self.dim()
            )));
        }
        let z = &self.a * DVector::from_column_slice(eps) + &self.b;
        Ok(z.iter().copied().collect())
    }

    /// `eps = A^{-1} (z - b)`.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "latent of length {} for n_z = {}",
                z.len(),
                self.dim()
            )));
        }
        self.check_invertible()?;
        let rhs = DVector::from_column_slice(z) - &self.b;
        let eps = self
            .a
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::NotInvertible(0.0))?;
        Ok(eps.iter().copied().collect())
    }

    /// KL(N(b, A A^T) || N(0, I)) in closed form.
    pub fn kl_to_standard_normal(&self) -> Result<f64> {
        let det = self.check_invertible()?;
        let n = self.dim() as f64;
        let tr = self.a.iter().map(|v| v * v).sum::<f64>();
        let bb = self.b.dot(&self.b);
        Ok(0.5 * (tr + bb - n - 2.0 * det.abs().ln()))
    }

    /// Gradient of the KL with respect to `(A, b)`: `(A - A^{-T}, b)`.
    pub fn kl_gradient(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_invertible()?;
        let inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or(Error::NotInvertible(0.0))?;
        Ok((&self.a - inv.transpose(), self.b.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Affine maps applied to one shared noise draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineFlowSet {
    pub n_z: usize,
    pub flows: Vec<AffineFlow>,
}

impl AffineFlowSet {
    pub fn new(flows: Vec<AffineFlow>) -> Result<Self> {
        let n_z = flows
            .first()
            .ok_or_else(|| Error::Empty("flow set needs K >= 1 flows".into()))?
            .dim();
        if n_z == 0 {
            return Err(Error::Invalid("latent dimension must be >= 1".into()));
        }
        for f in &flows {
            if f.dim() != n_z || f.a.nrows() != n_z || f.a.ncols() != n_z {
                return Err(Error::Shape("flows disagree on n_z".into()));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite("flow parameters".into()));
            }
            f.check_invertible()?;
        }
        Ok(Self { n_z, flows })
    }

    pub fn identity(k: usize, n_z: usize) -> Self {
        Self {
            n_z,
            flows: vec![AffineFlow::identity(n_z); k],
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// `z_k = A_k eps + b_k` for every flow.
    pub fn apply(&self, eps: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.flows.iter().map(|f| f.apply(eps)).collect()
    }

    pub fn invert(&self, k: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.flow(k)?.invert(z)
    }

    pub fn kl(&self, k: usize) -> Result<f64> {
        self.flow(k)?.kl_to_standard_normal()
    }

    pub fn kl_terms(&self) -> Result<Vec<f64>> {
        self.flows.iter().map(AffineFlow::kl_to_standard_normal).collect()
    }

    fn flow(&self, k: usize) -> Result<&AffineFlow> {
        self.flows
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("flow index {k} out of range")))
    }

    /// Trainable scalar count, `K (n_z^2 + n_z)`.
    pub fn param_count(&self) -> usize {
        self.len() * (self.n_z * self.n_z + self.n_z)
    }

    /// Flat parameter vector: per flow, `A` row-major then `b`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.flows {
            for i in 0..self.n_z {
                out.extend(f.a.row(i).iter());
            }
            out.extend(f.b.iter());
        }
        out
    }

    pub fn from_params(k: usize, n_z: usize, params: &[f64]) -> Result<Self> {
        let per = n_z * n_z + n_z;
        if params.len() != k * per {
            return Err(Error::Shape(format!(
                "{} parameters for {k} flows of dim {n_z}",
                params.len()
            )));
        }
        let flows = params
            .chunks(per)
            .map(|c| {
                AffineFlow::new(
                    DMatrix::from_row_slice(n_z, n_z, &c[..n_z * n_z]),
                    DVector::from_column_slice(&c[n_z * n_z..]),
                )
            })
            .collect();
        Ok(Self { n_z, flows })
    }
}

/// Latent codes held directly as parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsfCodes {
    pub codes: Vec<Vec<f64>>,
}

impl DsfCodes {
    pub fn new(codes: Vec<Vec<f64>>) -> Result<Self> {
        let n_z = codes
            .first()
            .ok_or_else(|| Error::Empty("need K >= 1 codes".into()))?
            .len();
        if n_z == 0 || codes.iter().any(|c| c.len() != n_z) {
            return Err(Error::Shape("codes must share a nonzero dimension".into()));
        }
        if codes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn n_z(&self) -> usize {
        self.codes[0].len()
    }

    pub fn to_params(&self) -> Vec<f64> {
        self.codes.concat()
    }

    pub fn from_params(n_z: usize, params: &[f64]) -> Result<Self> {
        Self::new(params.chunks(n_z).map(<[f64]>::to_vec).collect())
    }
}

/// Seeded portable RNG (ChaCha8) used for every random draw in the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent RNG stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n_z` i.i.d. standard normal draws from the seeded generator.
pub fn sample_noise(seed: u64, n_z: usize) -> Vec<f64> {
    normal_vec(&mut rng_from_seed(seed), n_z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(a: &[f64], b: &[f64]) -> AffineFlow {
        let n = b.len();
        AffineFlow::new(DMatrix::from_row_slice(n, n, a), DVector::from_column_slice(b))
    }

    #[test]
    fn apply_cases() {
        let id = AffineFlow::identity(2);
        assert_eq!(id.apply(&[0.3, -1.0]).unwrap(), vec![0.3, -1.0]);
        let f = flow(&[2.0, 0.0, 0.0, 2.0], &[1.0, 1.0]);
        assert_eq!(f.apply(&[1.0, 0.0]).unwrap(), vec![3.0, 1.0]);
        let set = AffineFlowSet::new(vec![f.clone(), id.clone()]).unwrap();
        assert_eq!(set.apply(&[0.0, 0.0]).unwrap(), vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
        assert!(f.apply(&[1.0]).is_err());
    }

    #[test]
    fn invert_cases() {
        let id = AffineFlow::identity(2);
        assert_eq!(id.invert(&[0.5, 2.0]).unwrap(), vec![0.5, 2.0]);
        let f = flow(&[2.0, 0.0, 0.0, 2.0], &[1.0, 1.0]);
        assert_eq!(f.invert(&[3.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        let singular = flow(&[1.0, 2.0, 2.0, 4.0], &[0.0, 0.0]);
        assert!(matches!(singular.invert(&[1.0, 1.0]), Err(Error::NotInvertible(_))));
        assert!(singular.kl_to_standard_normal().is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(AffineFlow::identity(2).kl_to_standard_normal().unwrap(), 0.0);
        let shifted = flow(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0]);
        assert!((shifted.kl_to_standard_normal().unwrap() - 0.5).abs() < 1e-15);
        let scaled = flow(&[2.0, 0.0, 0.0, 2.0], &[0.0, 0.0]);
        let want = 0.5 * (8.0 - 2.0 - 16f64.ln());
        assert!((scaled.kl_to_standard_normal().unwrap() - want).abs() < 1e-14);
        assert!((want - 1.6137).abs() < 1e-4);
    }

    #[test]
    fn params_round_trip_and_count() {
        let set = AffineFlowSet::new(vec![
            flow(&[1.0, 0.5, 0.0, 2.0], &[0.1, 0.2]),
            flow(&[3.0, 0.0, 1.0, 1.0], &[-1.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(set.param_count(), 2 * (4 + 2));
        let p = set.to_params();
        assert_eq!(p.len(), set.param_count());
        assert_eq!(AffineFlowSet::from_params(2, 2, &p).unwrap(), set);
    }

    #[test]
    fn noise_is_seeded() {
        assert_eq!(sample_noise(7, 4), sample_noise(7, 4));
        assert_ne!(sample_noise(7, 4), sample_noise(8, 4));
    }

    #[test]
    fn noise_moments() {
        let mut rng = rng_from_seed(123);
        let draws = normal_vec(&mut rng, 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
