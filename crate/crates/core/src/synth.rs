//! Synthetic crossroad dataset: a vehicle approaches a junction in a straight line and then
//! goes forward, turns left, or turns right.
//!
//! Route geometry, in the frame of the approach heading `h` and its left normal `n`, starting
//! from the last past position `p`:
//!
//! * forward: `p + speed * t * h`, for `t = 1..=T`
//! * left/right: quarter-circle arc of radius `2 T speed / pi` (so each step covers arc
//!   length `speed`), `p + radius * (sin(phi_t) h +/- (1 - cos(phi_t)) n)` with
//!   `phi_t = (t / T) * pi / 2`.
//!
//! The approach starts at `(-H speed, 0)` heading along `+x`, so a noise-free approach ends at
//! the origin. Contexts carry no feature vector.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::rng_stream;
use crate::trajectory::{Context, Dataset, Example, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Forward,
    Left,
    Right,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::Forward, Route::Left, Route::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Route::Forward => "forward",
            Route::Left => "left",
            Route::Right => "right",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Origin, unit heading, and left normal taken from the end of a past trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: [f64; 2],
    pub heading: [f64; 2],
    pub normal: [f64; 2],
}

impl Frame {
    pub fn from_past(past: &Trajectory) -> Result<Self> {
        if past.dim() != 2 {
            return Err(Error::Shape(format!("crossroad contexts are 2-D, got D = {}", past.dim())));
        }
        let last = past.last();
        let origin = [last[0], last[1]];
        let mut heading = [1.0, 0.0];
        if past.steps() >= 2 {
            let prev = past.step(past.steps() - 2);
            let (dx, dy) = (last[0] - prev[0], last[1] - prev[1]);
            let norm = dx.hypot(dy);
            if norm > 0.0 {
                heading = [dx / norm, dy / norm];
            }
        }
        Ok(Self {
            origin,
            heading,
            normal: [-heading[1], heading[0]],
        })
    }

    pub fn point(&self, along: f64, lateral: f64) -> [f64; 2] {
        [
            self.origin[0] + along * self.heading[0] + lateral * self.normal[0],
            self.origin[1] + along * self.heading[1] + lateral * self.normal[1],
        ]
    }
}

/// Template position at step `t` (1-based) as (along-heading, lateral) offsets.
pub fn route_offset(route: Route, t: usize, steps: usize, speed: f64) -> (f64, f64) {
    match route {
        Route::Forward => (speed * t as f64, 0.0),
        Route::Left | Route::Right => {
            let radius = 2.0 * steps as f64 * speed / std::f64::consts::PI;
            let phi = t as f64 / steps as f64 * FRAC_PI_2;
            let side = if route == Route::Left { 1.0 } else { -1.0 };
            (radius * phi.sin(), side * radius * (1.0 - phi.cos()))
        }
    }
}

/// `steps x 2` route template starting from the end of `frame`.
pub fn route_template(route: Route, frame: &Frame, steps: usize, speed: f64) -> Trajectory {
    let mut data = Vec::with_capacity(steps * 2);
    for t in 1..=steps {
        let (a, l) = route_offset(route, t, steps, speed);
        data.extend(frame.point(a, l));
    }
    Trajectory::new(steps, 2, data).expect("template is finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossroadConfig {
    /// Probabilities of (forward, left, right).
    pub mode_probs: [f64; 3],
    pub n_examples: usize,
    #[serde(default = "default_past_steps")]
    pub past_steps: usize,
    #[serde(default = "default_future_steps")]
    pub future_steps: usize,
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Standard deviation of the Gaussian noise on each per-step velocity component.
    /// Defaults to `0.02 * speed`.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_past_steps() -> usize {
    2
}

fn default_future_steps() -> usize {
    3
}

fn default_speed() -> f64 {
    1.0
}

impl CrossroadConfig {
    pub fn new(mode_probs: [f64; 3], n_examples: usize, seed: u64) -> Self {
        Self {
            mode_probs,
            n_examples,
            past_steps: default_past_steps(),
            future_steps: default_future_steps(),
            speed: default_speed(),
            noise_std: None,
            seed,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise_std.unwrap_or(0.02 * self.speed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Invalid("n_examples must be >= 1".into()));
        }
        if self.past_steps == 0 || self.future_steps == 0 {
            return Err(Error::Invalid("past_steps and future_steps must be >= 1".into()));
        }
        if self.mode_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Invalid("mode probabilities must be >= 0".into()));
        }
        let total: f64 = self.mode_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("mode probabilities sum to {total}, not 1")));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Invalid("speed must be > 0".into()));
        }
        if !(self.noise() >= 0.0 && self.noise().is_finite()) {
            return Err(Error::Invalid("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

fn pick_route(u: f64, probs: &[f64; 3]) -> Route {
    let mut acc = 0.0;
    for route in Route::ALL {
        acc += probs[route.index()];
        if u < acc {
            return route;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    *Route::ALL
        .iter()
        .rev()
        .find(|r| probs[r.index()] > 0.0)
        .unwrap_or(&Route::Forward)
}

/// Generates the dataset. Example `i` draws from its own RNG stream so each example depends
/// only on `(seed, i)`. The chosen route is stored under `meta["route"]`.
pub fn generate_crossroad(cfg: &CrossroadConfig) -> Result<Dataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise()).map_err(|e| Error::Invalid(e.to_string()))?;
    let (h, t_steps, speed) = (cfg.past_steps, cfg.future_steps, cfg.speed);
    let mut examples = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let mut rng = rng_stream(cfg.seed, i as u64);
        let route = pick_route(rng.gen::<f64>(), &cfg.mode_probs);

        let mut pos = [-(h as f64) * speed, 0.0];
        let mut past = Vec::with_capacity(h * 2);
        for _ in 0..h {
            pos[0] += speed + noise.sample(&mut rng);
            pos[1] += noise.sample(&mut rng);
            past.extend(pos);
        }
        let past = Trajectory::new(h, 2, past)?;
        let frame = Frame::from_past(&past)?;
        let template = route_template(route, &frame, t_steps, speed);

        let mut prev = frame.origin;
        let mut cur = frame.origin;
        let mut future = Vec::with_capacity(t_steps * 2);
        for step in 0..t_steps {
            let target = template.step(step);
            let v = [target[0] - prev[0], target[1] - prev[1]];
            prev = [target[0], target[1]];
            cur[0] += v[0] + noise.sample(&mut rng);
            cur[1] += v[1] + noise.sample(&mut rng);
            future.extend(cur);
        }
        let mut meta = BTreeMap::new();
        meta.insert("route".to_string(), serde_json::Value::from(route.name()));
        examples.push(Example {
            id: i as i64,
            context: Context::new(past, Vec::new())?,
            future: Trajectory::new(t_steps, 2, future)?,
            meta,
        });
    }
    Dataset::new(
        examples,
        format!(
            "crossroad probs={:?} n={} seed={}",
            cfg.mode_probs, cfg.n_examples, cfg.seed
        ),
    )
}

/// Route label stored in an example's metadata.
pub fn example_route(ex: &Example) -> Option<Route> {
    ex.meta.get("route").and_then(|v| v.as_str()).and_then(Route::from_name)
}

/// Count of examples per route, indexed by [`Route::index`].
pub fn route_histogram(ds: &Dataset) -> [usize; 3] {
    let mut h = [0; 3];
    for ex in &ds.examples {
        if let Some(r) = example_route(ex) {
            h[r.index()] += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_forward_matches_template() {
        let mut cfg = CrossroadConfig::new([1.0, 0.0, 0.0], 20, 3);
        cfg.noise_std = Some(0.0);
        let ds = generate_crossroad(&cfg).unwrap();
        for ex in &ds.examples {
            let frame = Frame::from_past(&ex.context.past).unwrap();
            assert_eq!(ex.future, route_template(Route::Forward, &frame, 3, 1.0));
            assert_eq!(example_route(ex), Some(Route::Forward));
        }
        assert_eq!(ds.examples[0].future.rows(), vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]);
    }

    #[test]
    fn noise_free_turns_lie_on_templates() {
        let mut cfg = CrossroadConfig::new([0.2, 0.4, 0.4], 50, 9);
        cfg.noise_std = Some(0.0);
        let ds = generate_crossroad(&cfg).unwrap();
        for ex in &ds.examples {
            let frame = Frame::from_past(&ex.context.past).unwrap();
            let route = example_route(ex).unwrap();
            let tmpl = route_template(route, &frame, 3, 1.0);
            assert!(crate::linalg::sq_dist(tmpl.flat(), ex.future.flat()) < 1e-24);
        }
        // left arc ends a quarter turn away at (radius, radius)
        let frame = Frame::from_past(&ds.examples[0].context.past).unwrap();
        let left = route_template(Route::Left, &frame, 3, 1.0);
        let r = 6.0 / std::f64::consts::PI;
        assert!((left.last()[0] - r).abs() < 1e-12 && (left.last()[1] - r).abs() < 1e-12);
    }

    #[test]
    fn route_counts_follow_probs() {
        let cfg = CrossroadConfig::new([0.8, 0.1, 0.1], 10_000, 11);
        let hist = route_histogram(&generate_crossroad(&cfg).unwrap());
        for (count, p) in hist.iter().zip(cfg.mode_probs) {
            let n = 10_000.0;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((*count as f64 - n * p).abs() <= 3.0 * sd, "{hist:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = CrossroadConfig::new([0.5, 0.25, 0.25], 30, 5);
        assert_eq!(generate_crossroad(&cfg).unwrap(), generate_crossroad(&cfg).unwrap());
        let other = CrossroadConfig { seed: 6, ..cfg.clone() };
        assert_ne!(generate_crossroad(&cfg).unwrap(), generate_crossroad(&other).unwrap());
    }

    #[test]
    fn validation() {
        assert!(generate_crossroad(&CrossroadConfig::new([0.8, 0.1, 0.1], 0, 1)).is_err());
        assert!(generate_crossroad(&CrossroadConfig::new([0.8, 0.1, 0.2], 5, 1)).is_err());
    }
}
