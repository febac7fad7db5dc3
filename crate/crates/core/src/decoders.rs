//! Deterministic latent-to-trajectory decoders standing in for a trained generator.
//!
//! [`CrossroadDecoder`] partitions the latent plane into three angular sectors whose angular
//! fractions equal the route probabilities (forward sector centred on angle 0, left sector
//! counter-clockwise of it, right sector clockwise). Since the angle of an isotropic Gaussian
//! is uniform, decoding prior draws reproduces the route frequencies, and the majority route
//! owns most of the latent space. Inside a sector, the relative angle `u in [0, 1)` and the
//! radius `rho` add a bounded within-mode variation at step `t`:
//!
//! ```text
//! x_t = template_t + scale * (t / T) * ((2u - 1) * n + tanh(rho - 1) * h)
//! ```
//!
//! so a code on the sector bisector at unit radius decodes exactly to the route template.
//! Sector boundaries are half-open with the lower angle inclusive.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synth::{route_template, Frame, Route};
use crate::trajectory::{Context, Trajectory};

/// Step used by the finite-difference fallback of [`Decoder::pullback`].
pub const PULLBACK_FD_STEP: f64 = 1e-6;

pub trait Decoder {
    fn latent_dim(&self) -> usize;

    /// `(T, D)` of every decoded trajectory.
    fn output_shape(&self) -> (usize, usize);

    fn decode(&self, z: &[f64], ctx: &Context) -> Result<Trajectory>;

    /// Vector-Jacobian product `J(z)^T cotangent` of the flattened decode. The default uses
    /// central differences.
    fn pullback(&self, z: &[f64], ctx: &Context, cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut zp = z.to_vec();
        let mut out = vec![0.0; z.len()];
        for i in 0..z.len() {
            let h = PULLBACK_FD_STEP * z[i].abs().max(1.0);
            zp[i] = z[i] + h;
            let up = self.decode(&zp, ctx)?;
            zp[i] = z[i] - h;
            let down = self.decode(&zp, ctx)?;
            zp[i] = z[i];
            out[i] = up
                .flat()
                .iter()
                .zip(down.flat())
                .zip(cotangent)
                .map(|((u, d), c)| c * (u - d) / (2.0 * h))
                .sum();
        }
        Ok(out)
    }
}

fn check_latent(z: &[f64], n_z: usize) -> Result<()> {
    if z.len() != n_z {
        return Err(Error::Shape(format!("latent of length {} for n_z = {n_z}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent code".into()));
    }
    Ok(())
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> std::result::Result<DMatrix<f64>, String> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("matrix rows must have {ncols} columns"));
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &rows.concat()))
}

/// `reshape(W z + c0 + M f)` where `f` is the context feature vector. With
/// `anchor_to_context`, the last past position is added to every step.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub steps: usize,
    pub dim: usize,
    pub w: DMatrix<f64>,
    pub c0: DVector<f64>,
    pub m: Option<DMatrix<f64>>,
    pub anchor_to_context: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearRepr {
    steps: usize,
    dim: usize,
    w: Vec<Vec<f64>>,
    c0: Vec<f64>,
    #[serde(default)]
    m: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    anchor_to_context: bool,
}

impl LinearDecoder {
    pub fn new(steps: usize, dim: usize, w: DMatrix<f64>, c0: DVector<f64>) -> Result<Self> {
        let dec = Self {
            steps,
            dim,
            w,
            c0,
            m: None,
            anchor_to_context: false,
        };
        dec.validate()?;
        Ok(dec)
    }

    pub fn with_context_projection(mut self, m: DMatrix<f64>) -> Result<Self> {
        self.m = Some(m);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let out = self.steps * self.dim;
        if out == 0 || self.w.ncols() == 0 {
            return Err(Error::Invalid("linear decoder needs T, D, n_z >= 1".into()));
        }
        if self.w.nrows() != out || self.c0.len() != out {
            return Err(Error::Shape(format!(
                "W is {}x{}, c0 has {} entries, expected {out} rows",
                self.w.nrows(),
                self.w.ncols(),
                self.c0.len()
            )));
        }
        if let Some(m) = &self.m {
            if m.nrows() != out {
                return Err(Error::Shape("context projection row count".into()));
            }
        }
        let all = self
            .w
            .iter()
            .chain(self.c0.iter())
            .chain(self.m.iter().flat_map(|m| m.iter()));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear decoder parameters".into()));
        }
        Ok(())
    }
}

impl Serialize for LinearDecoder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LinearRepr {
            steps: self.steps,
            dim: self.dim,
            w: rows_of(&self.w),
            c0: self.c0.iter().copied().collect(),
            m: self.m.as_ref().map(rows_of),
            anchor_to_context: self.anchor_to_context,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinearDecoder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = LinearRepr::deserialize(d)?;
        let n_z = r.w.first().map_or(0, Vec::len);
        let w = matrix_from_rows(&r.w, n_z).map_err(D::Error::custom)?;
        let m = match &r.m {
            Some(rows) => Some(
                matrix_from_rows(rows, rows.first().map_or(0, Vec::len))
                    .map_err(D::Error::custom)?,
            ),
            None => None,
        };
        let dec = LinearDecoder {
            steps: r.steps,
            dim: r.dim,
            w,
            c0: DVector::from_vec(r.c0),
            m,
            anchor_to_context: r.anchor_to_context,
        };
        dec.validate().map_err(D::Error::custom)?;
        Ok(dec)
    }
}

impl Decoder for LinearDecoder {
    fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.steps, self.dim)
    }

    fn decode(&self, z: &[f64], ctx: &Context) -> Result<Trajectory> {
        check_latent(z, self.latent_dim())?;
        let mut out = &self.w * DVector::from_column_slice(z) + &self.c0;
        if let Some(m) = &self.m {
            if ctx.features.len() != m.ncols() {
                return Err(Error::Shape(format!(
                    "context has {} features, projection expects {}",
                    ctx.features.len(),
                    m.ncols()
                )));
            }
            out += m * DVector::from_column_slice(&ctx.features);
        }
        if self.anchor_to_context {
            if ctx.past.dim() != self.dim {
                return Err(Error::Shape("context dimension differs from decoder".into()));
            }
            let anchor = ctx.past.last();
            for (i, v) in out.iter_mut().enumerate() {
                *v += anchor[i % self.dim];
            }
        }
        Trajectory::new(self.steps, self.dim, out.iter().copied().collect())
    }

    fn pullback(&self, z: &[f64], _ctx: &Context, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_latent(z, self.latent_dim())?;
        let g = self.w.transpose() * DVector::from_column_slice(cotangent);
        Ok(g.iter().copied().collect())
    }
}

/// Angular-sector crossroad decoder over a 2-D latent space (see module docs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossroadDecoder {
    /// Probabilities of (forward, left, right).
    pub mode_probs: [f64; 3],
    pub future_steps: usize,
    pub speed: f64,
    pub within_mode_scale: f64,
}

/// Location of a latent code in the sector partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectorPosition {
    pub route: Route,
    /// Relative angle inside the sector, in `[0, 1)`.
    pub u: f64,
    /// Angular width of the sector in radians.
    pub width: f64,
}

impl CrossroadDecoder {
    pub fn new(mode_probs: [f64; 3], future_steps: usize, speed: f64, within_mode_scale: f64) -> Result<Self> {
        let dec = Self {
            mode_probs,
            future_steps,
            speed,
            within_mode_scale,
        };
        dec.validate()?;
        Ok(dec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Invalid("crossroad mode probabilities must be > 0".into()));
        }
        let total: f64 = self.mode_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("mode probabilities sum to {total}, not 1")));
        }
        if self.future_steps == 0 {
            return Err(Error::Invalid("future_steps must be >= 1".into()));
        }
        if !(self.speed > 0.0) || !(self.within_mode_scale > 0.0) {
            return Err(Error::Invalid("speed and within_mode_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn sector(&self, z: &[f64]) -> SectorPosition {
        let [pf, pl, _] = self.mode_probs;
        let phi = (z[1].atan2(z[0]) + PI * pf).rem_euclid(TAU);
        let b1 = TAU * pf;
        let b2 = TAU * (pf + pl);
        let (route, start, end) = if phi < b1 {
            (Route::Forward, 0.0, b1)
        } else if phi < b2 {
            (Route::Left, b1, b2)
        } else {
            (Route::Right, b2, TAU)
        };
        let width = end - start;
        SectorPosition {
            route,
            u: ((phi - start) / width).min(1.0 - f64::EPSILON),
            width,
        }
    }

    pub fn route_of(&self, z: &[f64]) -> Route {
        self.sector(z).route
    }

    /// `(lateral, longitudinal)` variation coefficients, each in `[-1, 1]`.
    fn variation(&self, z: &[f64]) -> (f64, f64) {
        let pos = self.sector(z);
        let rho = z[0].hypot(z[1]);
        (2.0 * pos.u - 1.0, (rho - 1.0).tanh())
    }

    fn step_weight(&self, t: usize) -> f64 {
        self.within_mode_scale * t as f64 / self.future_steps as f64
    }
}

impl Decoder for CrossroadDecoder {
    fn latent_dim(&self) -> usize {
        2
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.future_steps, 2)
    }

    fn decode(&self, z: &[f64], ctx: &Context) -> Result<Trajectory> {
        check_latent(z, 2)?;
        let frame = Frame::from_past(&ctx.past)?;
        let pos = self.sector(z);
        let (lat, lon) = self.variation(z);
        let template = route_template(pos.route, &frame, self.future_steps, self.speed);
        let mut data = template.flat().to_vec();
        for t in 1..=self.future_steps {
            let w = self.step_weight(t);
            for d in 0..2 {
                data[(t - 1) * 2 + d] += w * (lat * frame.normal[d] + lon * frame.heading[d]);
            }
        }
        Trajectory::new(self.future_steps, 2, data)
    }

    /// Analytic inside each sector; the sector (route) itself is locally constant.
    fn pullback(&self, z: &[f64], ctx: &Context, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_latent(z, 2)?;
        let frame = Frame::from_past(&ctx.past)?;
        let rho2 = z[0] * z[0] + z[1] * z[1];
        if rho2 == 0.0 {
            return Ok(vec![0.0, 0.0]);
        }
        let rho = rho2.sqrt();
        let (g_lat, g_lon) = (1..=self.future_steps).fold((0.0, 0.0), |(a, b), t| {
            let w = self.step_weight(t);
            let c = &cotangent[(t - 1) * 2..t * 2];
            (
                a + w * (c[0] * frame.normal[0] + c[1] * frame.normal[1]),
                b + w * (c[0] * frame.heading[0] + c[1] * frame.heading[1]),
            )
        });
        let pos = self.sector(z);
        let lon = (rho - 1.0).tanh();
        // d lat / dz = (2 / width) * d theta / dz,  d theta / dz = (-z2, z1) / rho^2
        let dlat = [-2.0 * z[1] / (pos.width * rho2), 2.0 * z[0] / (pos.width * rho2)];
        let dlon = [(1.0 - lon * lon) * z[0] / rho, (1.0 - lon * lon) * z[1] / rho];
        Ok(vec![
            g_lat * dlat[0] + g_lon * dlon[0],
            g_lat * dlat[1] + g_lon * dlon[1],
        ])
    }
}

/// Trajectories tabulated on a 2-D latent grid, bilinearly interpolated (clamped at the grid
/// edges). The context is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedDecoder {
    axes: [Vec<f64>; 2],
    steps: usize,
    dim: usize,
    /// `table[i][j]` is the flattened trajectory at `(axes[0][i], axes[1][j])`.
    table: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabulatedRepr {
    #[serde(default = "format_version_one")]
    format_version: u32,
    z_grid: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "D")]
    dim: usize,
    table: Vec<Vec<Vec<Vec<f64>>>>,
}

fn format_version_one() -> u32 {
    1
}

impl TabulatedDecoder {
    pub fn new(axes: [Vec<f64>; 2], steps: usize, dim: usize, table: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for axis in &axes {
            if axis.len() < 2 || axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Invalid(
                    "grid axes need >= 2 strictly increasing values".into(),
                ));
            }
        }
        if table.len() != axes[0].len() || table.iter().any(|r| r.len() != axes[1].len()) {
            return Err(Error::Shape("table does not match grid axes".into()));
        }
        if table.iter().flatten().any(|t| t.len() != steps * dim) {
            return Err(Error::Shape(format!("table entries must hold {steps}x{dim} values")));
        }
        if table.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tabulated trajectory".into()));
        }
        Ok(Self {
            axes,
            steps,
            dim,
            table,
        })
    }

    fn locate(axis: &[f64], v: f64) -> (usize, f64) {
        let v = v.clamp(axis[0], axis[axis.len() - 1]);
        let i = axis.partition_point(|a| *a <= v).clamp(1, axis.len() - 1) - 1;
        (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
    }
}

impl Serialize for TabulatedDecoder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let table = self
            .table
            .iter()
            .map(|row| {
                row.iter()
                    .map(|t| t.chunks(self.dim).map(<[f64]>::to_vec).collect())
                    .collect()
            })
            .collect();
        TabulatedRepr {
            format_version: 1,
            z_grid: self.axes.to_vec(),
            steps: self.steps,
            dim: self.dim,
            table,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TabulatedDecoder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = TabulatedRepr::deserialize(d)?;
        if r.format_version != 1 {
            return Err(D::Error::custom(format!("unsupported format_version {}", r.format_version)));
        }
        let axes: [Vec<f64>; 2] = r
            .z_grid
            .try_into()
            .map_err(|_| D::Error::custom("z_grid must have exactly two axes"))?;
        let table = r
            .table
            .into_iter()
            .map(|row| row.into_iter().map(|t| t.concat()).collect())
            .collect();
        TabulatedDecoder::new(axes, r.steps, r.dim, table).map_err(D::Error::custom)
    }
}

impl Decoder for TabulatedDecoder {
    fn latent_dim(&self) -> usize {
        2
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.steps, self.dim)
    }

    fn decode(&self, z: &[f64], _ctx: &Context) -> Result<Trajectory> {
        check_latent(z, 2)?;
        let (i, fx) = Self::locate(&self.axes[0], z[0]);
        let (j, fy) = Self::locate(&self.axes[1], z[1]);
        let t = &self.table;
        let data = (0..self.steps * self.dim)
            .map(|k| {
                (1.0 - fx) * (1.0 - fy) * t[i][j][k]
                    + fx * (1.0 - fy) * t[i + 1][j][k]
                    + (1.0 - fx) * fy * t[i][j + 1][k]
                    + fx * fy * t[i + 1][j + 1][k]
            })
            .collect();
        Trajectory::new(self.steps, self.dim, data)
    }
}

/// Serializable decoder choice, tagged by `"kind"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecoderSpec {
    Linear(LinearDecoder),
    Crossroad(CrossroadDecoder),
    Tabulated(TabulatedDecoder),
}

impl DecoderSpec {
    fn inner(&self) -> &dyn Decoder {
        match self {
            DecoderSpec::Linear(d) => d,
            DecoderSpec::Crossroad(d) => d,
            DecoderSpec::Tabulated(d) => d,
        }
    }
}

impl Decoder for DecoderSpec {
    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }

    fn output_shape(&self) -> (usize, usize) {
        self.inner().output_shape()
    }

    fn decode(&self, z: &[f64], ctx: &Context) -> Result<Trajectory> {
        self.inner().decode(z, ctx)
    }

    fn pullback(&self, z: &[f64], ctx: &Context, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.inner().pullback(z, ctx, cotangent)
    }
}
