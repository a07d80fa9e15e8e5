mod common;

use std::f64::consts::PI;

use common::{normal_matrix, perturb, rng};
use mollify_core::autodiff::{Graph, Tensor};
use mollify_core::vae::{standard_normal, SampleMode, VaeModel, VaeSpec};
use proptest::prelude::*;
use rand::Rng;

fn set(vae: &mut VaeModel, name: &str, values: &[f64]) {
    let p = vae.params_mut().by_name_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.value.data_mut().copy_from_slice(values);
}

/// One-dimensional linear-Gaussian VAE: `z ~ N(0, 1)`, `x | z ~ N(w z + b, s2)`.
fn linear_gaussian(w: f64, b: f64, s2: f64, enc: [f64; 3]) -> VaeModel {
    let spec = VaeSpec { dim: 1, latent: 1, hidden: vec![], sample_mode: SampleMode::Mean };
    let mut vae = VaeModel::new(spec, &mut rng(0)).unwrap();
    set(&mut vae, "decoder.l0.weight", &[w, 0.0]);
    set(&mut vae, "decoder.l0.bias", &[b, s2.ln()]);
    set(&mut vae, "encoder.l0.weight", &[enc[0], 0.0]);
    set(&mut vae, "encoder.l0.bias", &[enc[1], enc[2]]);
    vae
}

#[test]
fn elbo_mean_does_not_exceed_exact_log_likelihood() {
    let (w, b, s2) = (1.3, 0.4, 0.5);
    let vae = linear_gaussian(w, b, s2, [0.2, -0.1, -0.8]);
    let x0 = 1.1;
    let var = w * w + s2;
    let exact = -0.5 * ((2.0 * PI * var).ln() + (x0 - b) * (x0 - b) / var);
    let n = 200_000;
    let x = Tensor::full(&[n, 1], x0);
    let eps = standard_normal(n, 1, &mut rng(1));
    // Per-row single-sample ELBOs (closed-form KL, beta = 1).
    let mut g = Graph::new();
    let p = vae.params().bind_frozen(&mut g);
    let xv = g.constant(x);
    let t = vae.terms(&mut g, &p, xv, &eps).unwrap();
    let rows: Vec<f64> = g.value(t.recon).data().iter().zip(g.value(t.kl).data()).map(|(r, k)| r - k).collect();
    let mean = rows.iter().sum::<f64>() / n as f64;
    let sd = (rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!(mean <= exact + 3.0 * se, "elbo {mean} > log p {exact} + 3 se {se}");
}

#[test]
fn exact_posterior_makes_the_bound_tight() {
    let (w, b, s2) = (0.8, -0.3, 0.6);
    let x0 = 0.9;
    // q(z|x) = N(w (x - b) / (w^2 + s2), s2 / (w^2 + s2))
    let d = w * w + s2;
    let (a, c) = (w / d, -w * b / d);
    let vae = linear_gaussian(w, b, s2, [a, c, (s2 / d).ln()]);
    let exact = -0.5 * ((2.0 * PI * d).ln() + (x0 - b) * (x0 - b) / d);
    let x = Tensor::full(&[3, 1], x0);
    let eps = standard_normal(3, 1, &mut rng(2));
    let iwae = vae.iwae_with_noise(&x, std::slice::from_ref(&eps)).unwrap();
    assert!((iwae - exact).abs() < 1e-12);
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let spec = VaeSpec { dim: 2, latent: 3, hidden: vec![5], sample_mode: SampleMode::Mean };
    let mut vae = VaeModel::new(spec, &mut rng(3)).unwrap();
    perturb(vae.params_mut(), 0.4, &mut rng(4));
    let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
    let mut g = Graph::new();
    let p = vae.params().bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let (mu, lv) = vae.encode(&mut g, &p, xv).unwrap();
    let (mu, lv) = (g.value(mu).row(0).to_vec(), g.value(lv).row(0).to_vec());
    let closed = {
        let eps = standard_normal(1, 3, &mut rng(5));
        let t = vae.terms(&mut g, &p, xv, &eps).unwrap();
        g.value(t.kl).data()[0]
    };
    let mut r = rng(6);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for k in 0..3 {
            let e: f64 = r.sample(rand_distr::StandardNormal);
            let z = mu[k] + (0.5 * lv[k]).exp() * e;
            log_ratio += -0.5 * e * e - 0.5 * lv[k] + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    let mc = acc / n as f64;
    assert!((mc - closed).abs() / closed < 0.01, "mc {mc} closed {closed}");
}

#[test]
fn more_importance_samples_tighten_the_bound() {
    let spec = VaeSpec { dim: 2, latent: 2, hidden: vec![6], sample_mode: SampleMode::Mean };
    let mut vae = VaeModel::new(spec, &mut rng(7)).unwrap();
    perturb(vae.params_mut(), 0.5, &mut rng(8));
    let mut r = rng(9);
    let mut diff = 0.0;
    for _ in 0..200 {
        let x = normal_matrix(16, 2, 1.0, &mut r);
        let eps: Vec<Tensor> = (0..5).map(|_| standard_normal(16, 2, &mut r)).collect();
        let k5 = vae.iwae_with_noise(&x, &eps).unwrap();
        let k1 = vae.iwae_with_noise(&x, &eps[..1]).unwrap();
        diff += k5 - k1;
    }
    assert!(diff / 200.0 >= 0.0);
}

#[test]
fn prior_matching_autoencoder_on_a_point_mass_recovers_decoder_density() {
    let spec = VaeSpec { dim: 3, latent: 2, hidden: vec![], sample_mode: SampleMode::Mean };
    let mut vae = VaeModel::new(spec, &mut rng(10)).unwrap();
    let datum = [0.5, -1.0, 2.0];
    let log_var = -4.0;
    set(&mut vae, "encoder.l0.weight", &[0.0; 12]);
    set(&mut vae, "encoder.l0.bias", &[0.0; 4]);
    set(&mut vae, "decoder.l0.weight", &[0.0; 12]);
    set(&mut vae, "decoder.l0.bias", &[datum[0], datum[1], datum[2], log_var, log_var, log_var]);
    let x = Tensor::matrix(4, 3, datum.repeat(4)).unwrap();
    let expect = -1.5 * ((2.0 * PI).ln() + log_var);
    for k in [1, 5, 50] {
        let b = vae.iwae_bound(&x, k, &mut rng(k as u64)).unwrap();
        assert!((b - expect).abs() < 1e-10, "K={k}: {b} vs {expect}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_sample_iwae_equals_monte_carlo_elbo(seed in any::<u64>()) {
        let spec = VaeSpec { dim: 3, latent: 2, hidden: vec![4], sample_mode: SampleMode::Mean };
        let mut vae = VaeModel::new(spec, &mut rng(seed)).unwrap();
        perturb(vae.params_mut(), 0.3, &mut rng(seed ^ 1));
        let x = normal_matrix(8, 3, 1.0, &mut rng(seed ^ 2));
        let eps = standard_normal(8, 2, &mut rng(seed ^ 3));
        prop_assert_eq!(
            vae.iwae_with_noise(&x, std::slice::from_ref(&eps)).unwrap(),
            vae.mc_elbo_with_noise(&x, &eps).unwrap()
        );
    }

    #[test]
    fn beta_scales_only_the_kl_term(seed in any::<u64>(), beta in 0.05f64..2.0) {
        let spec = VaeSpec { dim: 2, latent: 2, hidden: vec![4], sample_mode: SampleMode::Mean };
        let mut vae = VaeModel::new(spec, &mut rng(seed)).unwrap();
        perturb(vae.params_mut(), 0.3, &mut rng(seed ^ 1));
        let x = normal_matrix(6, 2, 1.0, &mut rng(seed ^ 2));
        let eps = standard_normal(6, 2, &mut rng(seed ^ 3));
        let one = vae.elbo_with_noise(&x, &eps, 1.0).unwrap();
        let b = vae.elbo_with_noise(&x, &eps, beta).unwrap();
        prop_assert_eq!(one.recon, b.recon);
        prop_assert_eq!(one.kl, b.kl);
        prop_assert!((b.elbo - (b.recon - beta * b.kl)).abs() < 1e-12);
    }
}

#[test]
fn samples_of_a_trained_vae_track_data_moments() {
    use mollify_core::datasets::{toy_dataset, ToyKind};
    use mollify_core::model::{Model, ModelSpec};
    use mollify_core::trainer::{train, Duration, TrainConfig, VaeObjective};

    let data = toy_dataset(ToyKind::TwoGaussians, 4000, 10, 0.0, &mut rng(11));
    let spec = ModelSpec::Vae(VaeSpec { dim: 2, latent: 2, hidden: vec![32, 32], sample_mode: SampleMode::Draw });
    let mut model = Model::new(&spec, &mut rng(12)).unwrap();
    let cfg = TrainConfig {
        duration: Duration::Iterations(1500),
        batch_size: 128,
        lr: 3e-3,
        eval_every: 10_000,
        log_every: 10_000,
        eval_mmd: false,
        eval_loglik: false,
        vae_objective: VaeObjective::Elbo { beta: 1.0 },
        wall_clock: false,
        ..TrainConfig::default()
    };
    train(&cfg, &data, &mut model, None).unwrap();
    let s = model.sample(5000, &mut rng(13)).unwrap();
    for c in 0..2 {
        let col = |t: &Tensor| (0..t.rows()).map(|r| t.get(r, c)).collect::<Vec<_>>();
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let mu = m(v);
            (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let (ds, ss) = (col(&data.train), col(&s));
        assert!((m(&ds) - m(&ss)).abs() < 0.25, "column {c} mean {} vs {}", m(&ds), m(&ss));
        assert!((sd(&ds) / sd(&ss) - 1.0).abs() < 0.25, "column {c} sd {} vs {}", sd(&ds), sd(&ss));
    }
}
