//! Reverse-mode loss gradients against central finite differences.

use barrier_forge::rng;
use barrier_forge::trainer::{
    grad_total_loss, sample_initial, total_loss, LossConfig, LossModel, TrainConfig, TrainParams,
};
use barrier_forge::ProblemModel;
use rand::Rng;

use crate::common::*;

const STEP: f64 = 1e-7;
/// Points with any activation argument closer than this to its kink are
/// skipped: a step of `STEP` could cross it.
const KINK_CLEARANCE: f64 = 1e-4;
const POINTS: usize = 100;

fn check_setup(name: &str, model: &ProblemModel, anchors: Vec<Vec<f64>>, l_tilde: f64, gamma0: (f64, f64)) {
    let mut sets = sample_initial(model, 40, 40, 7).unwrap();
    sets.xi = anchors;
    let lm = LossModel::new(model, l_tilde, LossConfig::default(), gamma0);
    let xs: Vec<&[f64]> = sets.xs.iter().map(|s| s.x.as_slice()).collect();
    let xu: Vec<&[f64]> = sets.xu.iter().map(|s| s.x.as_slice()).collect();
    let xi: Vec<&[f64]> = sets.xi.iter().map(Vec::as_slice).collect();
    let cfg = TrainConfig::default();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut attempt = 0u64;
    while checked < POINTS {
        assert!(attempt < 20 * POINTS as u64, "{name}: too many points near kinks");
        let mut r = rng::stream(attempt, "gradient-point");
        let mut p = TrainParams::initialize(model, &cfg, &mut r);
        attempt += 1;
        // Spread the barrier and γ₀ so every loss term is active somewhere.
        for t in p.barrier.theta.iter_mut() {
            *t = r.gen_range(-1.5..1.5);
        }
        p.gamma0 = r.gen_range(0.5..1.1);
        if lm.kink_margin(&p, &xs, &xu, &xi).unwrap() < KINK_CLEARANCE {
            skipped += 1;
            continue;
        }
        let g = grad_total_loss(&lm, &p, &sets).unwrap();
        let base = p.flatten();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..base.len() {
            let mut q = p.clone();
            let mut f = base.clone();
            f[i] = base[i] + STEP;
            q.unflatten(&f);
            let up = total_loss(&lm, &q, &sets).unwrap();
            f[i] = base[i] - STEP;
            q.unflatten(&f);
            let down = total_loss(&lm, &q, &sets).unwrap();
            let fd = (up - down) / (2.0 * STEP);
            err += (g[i] - fd).powi(2);
            norm += fd * fd;
        }
        let rel = (err / norm.max(1e-300)).sqrt();
        worst = worst.max(rel);
        assert!(rel <= 1e-5, "{name}: relative error {rel} at point {attempt}");
        checked += 1;
    }
    eprintln!("{name}: {checked} points checked, {skipped} skipped near kinks, worst relative error {worst:e}");
}

pub fn polynomial_setup_gradient_matches_finite_differences() {
    check_setup("polynomial", &polynomial_model(), vec![vec![0.0, 0.0], vec![0.6, 0.0]], 3.0, (0.7, 0.9));
}

pub fn cartpole_setup_gradient_matches_finite_differences() {
    check_setup("cart-pole", &cartpole_model(), vec![vec![0.0, 0.0], vec![0.3, 0.0]], 100.0, (0.7, 1.0));
}
