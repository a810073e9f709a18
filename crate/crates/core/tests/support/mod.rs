#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sfcam::classifier::{cls_grad, ClassifierState, GradientBundle};
use sfcam::numerics::FeatureMap;
use sfcam::sfc::{dw_p_loss, dw_w_loss, msdw_total, DCVector, TrainConfig};
use sfcam::synthworld::SyntheticScene;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub struct Instance {
    pub state: ClassifierState,
    pub scene: SyntheticScene,
    pub dc: DCVector,
}

/// Small random problem: up to 3 classes, 3..4 pixels per side, depth <= 6.
/// Three pixels per side keeps the half-scale view at least 2x2; a 1x1 view
/// max-normalizes to a near constant and leaves gradients at roundoff level.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=3);
    let d = rng.gen_range(c + 1..=6);
    let h = rng.gen_range(3..=4);
    let w = rng.gen_range(3..=4);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let data: Vec<f64> = (0..h * w * d).map(|_| normal()).collect();
    let weights: Vec<f64> = (0..c * d).map(|_| normal()).collect();
    let mut projection: Vec<f64> = (0..d * d).map(|_| 0.3 * normal()).collect();
    for i in 0..d {
        projection[i * d + i] += 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut present: Vec<usize> = (1..=c).filter(|_| rng.gen_bool(0.6)).collect();
    if present.is_empty() {
        present.push(rng.gen_range(1..=c));
    }
    let mut dc = DCVector::plain(c);
    for v in &mut dc.dc {
        *v = rng.gen_range(0.1..2.0);
    }
    let features = FeatureMap::new(h, w, d, data).unwrap();
    Instance {
        state: ClassifierState::from_parts(c, d, d, weights, projection, rng.gen_range(0.2..0.5)).unwrap(),
        scene: SyntheticScene::from_features(features, present),
        dc,
    }
}

/// Norm-wise relative error between analytic and central-difference
/// gradients over every weight and projection entry.
pub fn fd_relative_error(
    state: &ClassifierState,
    loss: impl Fn(&ClassifierState) -> f64,
    analytic: &GradientBundle,
) -> f64 {
    let mut num = Vec::new();
    let n_w = state.weights().len();
    for k in 0..n_w + state.projection().len() {
        let bump = |delta: f64| {
            let mut s = state.clone();
            if k < n_w {
                s.weights_mut()[k] += delta;
            } else {
                s.projection_mut()[k - n_w] += delta;
            }
            loss(&s)
        };
        num.push((bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP));
    }
    let ana: Vec<f64> = analytic
        .d_weights
        .iter()
        .chain(&analytic.d_projection)
        .copied()
        .collect();
    let diff: f64 = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(&ana).max(scale(&num));
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

pub fn full_config(use_pcm: bool) -> TrainConfig {
    TrainConfig {
        use_pcm,
        ..TrainConfig::default()
    }
}

/// Gradient norm below which central differences at `FD_STEP` cannot
/// resolve the slope of an O(1) loss.
pub const FLAT_GRADIENT: f64 = 1e-4;

fn bundle_norm(b: &GradientBundle) -> f64 {
    b.d_weights.iter().chain(&b.d_projection).map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative errors of the four objectives on one instance, or `None` when
/// one of them is flat there.
pub fn gradient_errors(inst: &Instance, use_pcm: bool) -> Option<[f64; 4]> {
    let Instance { state, scene, dc } = inst;
    let y = scene.labels(state.class_count());
    let cls = cls_grad(state, scene, &y).unwrap();
    let e_cls = fd_relative_error(state, |s| cls_grad(s, scene, &y).unwrap().loss_value, &cls);

    let p = dw_p_loss(state, scene, dc, use_pcm).unwrap();
    let e_p = fd_relative_error(state, |s| dw_p_loss(s, scene, dc, use_pcm).unwrap().loss_value, &p);

    let w = dw_w_loss(state, scene, dc, 0.5, use_pcm).unwrap();
    let e_w = fd_relative_error(
        state,
        |s| dw_w_loss(s, scene, dc, 0.5, use_pcm).unwrap().loss_value,
        &w,
    );

    let cfg = full_config(use_pcm);
    let (_, t) = msdw_total(state, scene, dc, &cfg).unwrap();
    if [&cls, &p, &w, &t].iter().any(|b| bundle_norm(b) < FLAT_GRADIENT) {
        return None;
    }
    let e_t = fd_relative_error(
        state,
        |s| msdw_total(s, scene, dc, &cfg).unwrap().1.loss_value,
        &t,
    );
    Some([e_cls, e_p, e_w, e_t])
}

/// Worst relative error per objective over the first `wanted` non-flat
/// instances drawn from consecutive seeds, and how many were skipped.
pub fn gradient_sweep(first_seed: u64, wanted: usize, use_pcm: bool) -> ([f64; 4], usize) {
    let mut worst = [0.0f64; 4];
    let (mut kept, mut skipped, mut seed) = (0, 0, first_seed);
    while kept < wanted {
        match gradient_errors(&random_instance(seed), use_pcm) {
            Some(errs) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
                kept += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    (worst, skipped)
}
