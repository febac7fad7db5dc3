mod common;

use std::collections::BTreeSet;

use common::*;
use divsample::decoders::{Decoder, LinearDecoder};
use divsample::dpp::KernelConfig;
use divsample::energy::EnergyConfig;
use divsample::flows::{normal_vec, rng_from_seed, rng_stream, AffineFlowSet, DsfCodes};
use divsample::training::*;
use divsample::trajectory::{apd, Context, Trajectory};
use divsample::Error;
use nalgebra::{DMatrix, DVector};

fn small_linear(seed: u64, n_z: usize) -> (LinearDecoder, divsample::trajectory::Dataset) {
    let mut rng = rng_from_seed(seed);
    let dec = random_linear_decoder(&mut rng, 3, 2, n_z);
    let ds = linear_dataset(&mut rng, &dec, 12);
    (dec, ds)
}

#[test]
fn dsf_single_item_closed_form_and_quality_saturation() {
    let dec = LinearDecoder::new(1, 2, DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
    let ds = {
        let mut rng = rng_from_seed(0);
        linear_dataset(&mut rng, &dec, 4)
    };
    let mut cfg = TrainConfig::new(TrainMode::Dsf, 1);
    cfg.lr = 0.05;
    cfg.iters = 400;
    let r = cfg.kernel.radius().unwrap();
    let start = DsfCodes::new(vec![vec![3.0, 0.0]]).unwrap();
    let (codes, report) = train_dsf_from(&ds, &dec, &cfg, start).unwrap();

    let q0 = (r * r - 9.0).exp();
    let lambda0 = q0 * q0;
    assert!((report.initial_loss + lambda0 / (lambda0 + 1.0)).abs() < 1e-12);
    let z = &codes.codes[0];
    assert!(z[0].hypot(z[1]) <= r + 1e-2, "|z| = {}", z[0].hypot(z[1]));
    assert!((report.final_loss + 0.5).abs() < 1e-3, "final {}", report.final_loss);
}

#[test]
fn dsf_crossroad_covers_all_modes_in_most_runs() {
    let dec = crossroad_decoder(IMBALANCED);
    let ds = crossroad_data(IMBALANCED, 200, 11);
    let mut covered = 0;
    for seed in 0..100 {
        let mut cfg = dsf_crossroad_config(seed);
        cfg.examples_per_iter = 2;
        let (codes, _) = train_dsf(&ds, &dec, &cfg).unwrap();
        let routes: BTreeSet<_> = codes.codes.iter().map(|z| dec.route_of(z)).collect();
        covered += usize::from(routes.len() == 3);
    }
    assert!(covered >= 95, "{covered}/100 runs covered all routes");
}

#[test]
fn dsf_training_is_deterministic_and_improves() {
    let dec = crossroad_decoder(IMBALANCED);
    let ds = crossroad_data(IMBALANCED, 50, 2);
    let mut cfg = dsf_crossroad_config(7);
    cfg.iters = 60;
    let (c1, r1) = train_dsf(&ds, &dec, &cfg).unwrap();
    let (c2, r2) = train_dsf(&ds, &dec, &cfg).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(
        serde_json::to_string(&r1).unwrap(),
        serde_json::to_string(&r2).unwrap()
    );
    assert_eq!(r1.trace.len(), 60);
    assert!(r1.final_loss < r1.initial_loss);
    for w in r1.trace.windows(2) {
        assert!(w[1].best_so_far <= w[0].best_so_far);
    }
}

#[test]
fn dlow_without_energies_converges_to_prior() {
    let (dec, ds) = small_linear(1, 2);
    let mut cfg = TrainConfig::new(TrainMode::Dlow, 3);
    cfg.energy = EnergyConfig {
        lambda_d: 0.0,
        lambda_r: 0.0,
        ..EnergyConfig::default()
    };
    cfg.init = Init::Random;
    cfg.lr = 0.01;
    cfg.iters = 3000;
    let (sampler, _) = train_dlow(&ds, &dec, &cfg).unwrap();
    let Sampler::Dlow { flows, .. } = sampler else {
        panic!("expected flows")
    };
    for f in &flows.flows {
        let aat = &f.a * f.a.transpose();
        let err = (aat - DMatrix::<f64>::identity(2, 2)).amax();
        assert!(err < 1e-3, "A A^T deviates by {err}");
        assert!(f.b.amax() < 1e-3, "b = {}", f.b);
    }
}

#[test]
fn zero_learning_rate_keeps_identity_flows() {
    let (dec, ds) = small_linear(2, 3);
    let mut cfg = TrainConfig::new(TrainMode::Dlow, 4);
    cfg.init = Init::Identity;
    cfg.iters = 1;
    cfg.lr = 0.0;
    let (sampler, report) = train_dlow(&ds, &dec, &cfg).unwrap();
    let Sampler::Dlow { flows, .. } = sampler else {
        panic!("expected flows")
    };
    assert_eq!(flows, AffineFlowSet::identity(4, 3));
    assert_eq!(report.trace.len(), 1);
}

#[test]
fn parameter_count_matches_flow_shapes() {
    let (dec, ds) = small_linear(3, 3);
    let cfg = {
        let mut c = TrainConfig::new(TrainMode::Dlow, 4);
        c.iters = 2;
        c
    };
    let (sampler, _) = train_dlow(&ds, &dec, &cfg).unwrap();
    let Sampler::Dlow { flows, featurization } = sampler else {
        panic!("expected flows")
    };
    assert_eq!(flows.to_params().len(), 4 * (9 + 3));
    assert_eq!(flows.param_count(), 4 * (9 + 3));
    assert!(featurization.is_none());

    let mut fcfg = cfg.clone();
    fcfg.context_features = true;
    let (sampler, _) = train_dlow(&ds, &dec, &fcfg).unwrap();
    let Sampler::Dlow {
        featurization: Some(feat),
        ..
    } = sampler
    else {
        panic!("expected featurization")
    };
    let fdim = ds.examples[0].context.flat().len();
    assert_eq!(feat.feature_dim, fdim);
    assert_eq!(feat.weights.len(), 4);
    assert!(feat.weights.iter().all(|w| w.len() == 12 * fdim));
}

#[test]
fn dlow_training_gradient_matches_finite_differences() {
    for (seed, features, fix_first) in [(4, false, false), (5, true, false), (6, true, true)] {
        let (dec, ds) = small_linear(seed, 2);
        let mut cfg = TrainConfig::new(TrainMode::Dlow, 3);
        cfg.context_features = features;
        cfg.fix_first_identity = fix_first;
        cfg.noise_draws_per_iter = 3;
        cfg.examples_per_iter = 4;
        cfg.fd_step = 1e-6;
        cfg.energy.sigma_d = 4.0;
        cfg.energy.lambda_s = 0.5;
        cfg.energy.joint_split = Some(divsample::energy::JointSplit {
            similar: vec![0],
            diverse: vec![1],
        });
        let mut rng = rng_stream(seed, 9);
        let per = 3 * 6;
        let fdim = if features { ds.examples[0].context.flat().len() } else { 0 };
        let mut p: Vec<f64> = normal_vec(&mut rng, per * (1 + fdim)).iter().map(|v| 0.3 * v).collect();
        for k in 0..3 {
            p[k * 6] += 1.0;
            p[k * 6 + 3] += 1.0;
        }
        let (_, a, n) = dlow_training_gradients(&ds, &dec, &cfg, &p, 0).unwrap();
        let err = max_relative_error(&a, &n);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        if fix_first {
            assert!(a[..6].iter().all(|g| *g == 0.0));
        }
    }
}

#[test]
fn fixed_first_flow_stays_identity() {
    let (dec, ds) = small_linear(7, 2);
    let mut cfg = TrainConfig::new(TrainMode::Dlow, 3);
    cfg.fix_first_identity = true;
    cfg.iters = 50;
    cfg.lr = 0.05;
    let (sampler, _) = train_dlow(&ds, &dec, &cfg).unwrap();
    let Sampler::Dlow { flows, .. } = sampler else {
        panic!("expected flows")
    };
    assert_eq!(flows.flows[0], divsample::flows::AffineFlow::identity(2));
    assert_ne!(flows.flows[1], divsample::flows::AffineFlow::identity(2));
}

#[test]
fn dlow_beta_sweep_reduces_diversity() {
    let dec = crossroad_decoder(IMBALANCED);
    let mut apds = Vec::new();
    for beta in [1.0, 10.0, 100.0] {
        let mut total = 0.0;
        for seed in 0..3 {
            let ds = crossroad_data(IMBALANCED, 100, 40 + seed);
            let (sampler, _) = train_dlow(&ds, &dec, &dlow_crossroad_config(seed, beta)).unwrap();
            for (i, ex) in ds.examples.iter().enumerate() {
                let eps = normal_vec(&mut rng_stream(77, i as u64), 2);
                total += apd(&sampler.sample_set(&dec, &ex.context, &eps, ex.id).unwrap()).unwrap();
            }
        }
        apds.push(total);
    }
    assert!(apds[0] > apds[1] && apds[1] > apds[2], "{apds:?}");
}

/// Errors once any latent leaves a ball, so training fails mid-run.
struct Fenced(LinearDecoder, f64);

impl Decoder for Fenced {
    fn latent_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn output_shape(&self) -> (usize, usize) {
        self.0.output_shape()
    }
    fn decode(&self, z: &[f64], ctx: &Context) -> divsample::Result<Trajectory> {
        if z.iter().map(|v| v * v).sum::<f64>().sqrt() > self.1 {
            return Err(Error::Invalid("latent left the fence".into()));
        }
        self.0.decode(z, ctx)
    }
    fn pullback(&self, z: &[f64], ctx: &Context, g: &[f64]) -> divsample::Result<Vec<f64>> {
        self.0.pullback(z, ctx, g)
    }
}

#[test]
fn training_errors_carry_the_iteration() {
    let (dec, ds) = small_linear(8, 2);
    let fenced = Fenced(dec, 6.0);
    let mut cfg = TrainConfig::new(TrainMode::Dlow, 3);
    cfg.energy.lambda_d = 1e4;
    cfg.energy.sigma_d = 100.0;
    cfg.lr = 0.2;
    cfg.iters = 500;
    match train_dlow(&ds, &fenced, &cfg) {
        Err(Error::Training { iter, .. }) => assert!(iter > 0),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn dsf_gradient_check_on_crossroad_decoder() {
    let dec = crossroad_decoder(IMBALANCED);
    let ds = crossroad_data(IMBALANCED, 3, 5);
    let ctxs: Vec<&Context> = ds.examples.iter().map(|e| &e.context).collect();
    let mut rng = rng_from_seed(12);
    let codes = DsfCodes::new((0..4).map(|_| normal_vec(&mut rng, 2)).collect()).unwrap();
    let kernel = KernelConfig {
        sim_scale: 2.0,
        ..KernelConfig::default()
    };
    let (a, n) = dsf_gradient_check(&dec, &ctxs, &kernel, &codes, 1e-6).unwrap();
    assert!(max_relative_error(&a, &n) < 1e-4);
}

#[test]
fn config_rejects_unknown_keys() {
    let ok = r#"{"mode": "dsf", "K": 3}"#;
    let cfg: TrainConfig = serde_json::from_str(ok).unwrap();
    assert_eq!(cfg.iters, 300);
    assert_eq!(cfg.lr, 5e-3);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"mode": "dsf", "K": 3, "lr_decay": 1}"#).is_err());
    let mut bad = cfg.clone();
    bad.k = 0;
    assert!(bad.validate().is_err());
}
