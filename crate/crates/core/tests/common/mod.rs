#![allow(dead_code)]

use std::collections::BTreeMap;

use divsample::decoders::{CrossroadDecoder, LinearDecoder};
use divsample::dpp::{DppKernel, KernelConfig};
use divsample::energy::EnergyConfig;
use divsample::flows::normal_vec;
use divsample::synth::{generate_crossroad, CrossroadConfig};
use divsample::training::{TrainConfig, TrainMode};
use divsample::trajectory::{Context, Dataset, Example, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IMBALANCED: [f64; 3] = [0.8, 0.1, 0.1];

/// Within-mode variation scale of the toy crossroad decoder used by the experiments.
pub const CROSSROAD_SCALE: f64 = 0.3;

pub fn crossroad_decoder(probs: [f64; 3]) -> CrossroadDecoder {
    CrossroadDecoder::new(probs, 3, 1.0, CROSSROAD_SCALE).unwrap()
}

pub fn crossroad_data(probs: [f64; 3], n: usize, seed: u64) -> Dataset {
    generate_crossroad(&CrossroadConfig::new(probs, n, seed)).unwrap()
}

/// DSF settings used for the crossroad mode-coverage experiment.
pub fn dsf_crossroad_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(TrainMode::Dsf, 10);
    cfg.seed = seed;
    cfg.lr = 0.02;
    cfg.iters = 300;
    cfg.kernel = KernelConfig {
        sim_scale: 10.0,
        ..KernelConfig::default()
    };
    cfg
}

/// DLow settings used for the crossroad beta sweep.
pub fn dlow_crossroad_config(seed: u64, beta: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(TrainMode::Dlow, 5);
    cfg.seed = seed;
    cfg.lr = 0.05;
    cfg.iters = 300;
    cfg.energy = EnergyConfig {
        sigma_d: 1.0,
        lambda_d: 400.0,
        lambda_r: 2.0,
        beta,
        ..EnergyConfig::default()
    };
    cfg
}

/// Random PSD matrix `B B^T` with `B` of shape `n x rank`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let rank = rng.gen_range(1..=n);
    let b = DMatrix::from_row_slice(n, rank, &normal_vec(rng, n * rank));
    &b * b.transpose()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> DppKernel {
    DppKernel::from_matrix(random_psd(rng, n)).unwrap()
}

pub fn random_linear_decoder(rng: &mut ChaCha8Rng, steps: usize, dim: usize, n_z: usize) -> LinearDecoder {
    let out = steps * dim;
    LinearDecoder::new(
        steps,
        dim,
        DMatrix::from_row_slice(out, n_z, &normal_vec(rng, out * n_z)),
        DVector::from_vec(normal_vec(rng, out)),
    )
    .unwrap()
}

pub fn empty_context(dim: usize) -> Context {
    Context::new(Trajectory::zeros(1, dim), vec![]).unwrap()
}

/// Examples whose futures are `decoder` outputs at standard-normal latents plus small noise.
pub fn linear_dataset(rng: &mut ChaCha8Rng, dec: &LinearDecoder, n: usize) -> Dataset {
    use divsample::decoders::Decoder;
    let (steps, dim) = dec.output_shape();
    let examples = (0..n)
        .map(|i| {
            let ctx = Context::new(Trajectory::zeros(1, dim), vec![rng.gen_range(-1.0..1.0)]).unwrap();
            let z = normal_vec(rng, dec.latent_dim());
            let clean = dec.decode(&z, &ctx).unwrap();
            let noisy: Vec<f64> = clean.flat().iter().map(|v| v + 0.01 * rng.gen_range(-1.0..1.0)).collect();
            Example {
                id: i as i64,
                context: ctx,
                future: Trajectory::new(steps, dim, noisy).unwrap(),
                meta: BTreeMap::new(),
            }
        })
        .collect();
    Dataset::new(examples, "linear").unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(a.abs()).max(1e-300)
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}
