use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{sgd_step, ClassifierState, GradientBundle};
use crate::error::{Error, Result};
use crate::synthworld::{avg_classes_per_image, class_counts, Dataset};

use super::bank::{bank_sample, bank_update, ImageBank};
use super::config::TrainConfig;
use super::dc::{dc_coefficients, estimate_n, DCVector};
use super::losses::{msdw_terms, LossBreakdown, PreparedScene};

const SHUFFLE_STREAM: u64 = 3;
const BANK_STREAM: u64 = 4;

/// Mean loss components over all scenes seen in one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub dw_p: f64,
    pub dw_w: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub dc: Option<DCVector>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_cls,L_DW_P,L_DW_W,total\n");
        for r in &self.epochs {
            // {:e} round-trips f64 exactly
            writeln!(out, "{},{:e},{:e},{:e},{:e}", r.epoch, r.cls, r.dw_p, r.dw_w, r.total)
                .expect("write to String");
        }
        out
    }
}

/// Distribution coefficients for a dataset under a training setup.
pub fn dataset_dc(dataset: &Dataset, config: &TrainConfig) -> DCVector {
    let counts = class_counts(dataset);
    let n_iter = dataset.len().div_ceil(config.batch_size);
    let n_ibr = if config.use_ibr { config.n_ibr } else { 0 };
    let n_est = estimate_n(n_ibr, avg_classes_per_image(dataset), n_iter, dataset.class_count());
    dc_coefficients(&counts, n_est)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mini-batch gradient descent on the combined objective.
///
/// The first `warmup_epochs` use the classification loss only. Each batch
/// refreshes the image bank with its own scenes, then appends `n_ibr` bank
/// draws. Scene gradients are computed in parallel and
/// averaged in batch order, so results do not depend on the thread count.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ClassifierState, TrainingLog)> {
    train_from(ClassifierState::new(dataset.class_count(), dataset.basis.depth, config.proto_threshold), dataset, config)
}

pub fn train_from(
    mut state: ClassifierState,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ClassifierState, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset has no scenes".into()));
    }
    let c = dataset.class_count();
    let dc = dataset_dc(dataset, config);
    let mut log = TrainingLog {
        dc: Some(dc.clone()),
        epochs: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok((state, log));
    }
    let scale = config.use_dw_w.then_some(config.scale_factor);
    let prepared = dataset
        .scenes
        .par_iter()
        .map(|s| PreparedScene::new(s, c, config.use_pcm, scale))
        .collect::<Result<Vec<_>>>()?;

    let mut order_rng = seeded(config.seed, SHUFFLE_STREAM);
    let mut bank = ImageBank::new(c, 0);
    let bank_rng = seeded(config.seed, BANK_STREAM);
    bank.reseed(bank_rng);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let warm = TrainConfig {
        use_dw_p: false,
        use_dw_w: false,
        ..config.clone()
    };
    for epoch in 0..config.epochs {
        let phase = if epoch < config.warmup_epochs { &warm } else { config };
        order.shuffle(&mut order_rng);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = chunk.to_vec();
            if config.use_ibr {
                bank_update(
                    &mut bank,
                    chunk.iter().map(|&i| (i, dataset.scenes[i].present_classes.as_slice())),
                );
                batch.extend(bank_sample(&mut bank, config.n_ibr));
            }
            let results = batch
                .par_iter()
                .map(|&i| msdw_terms(&state, &prepared[i], &dc, phase))
                .collect::<Result<Vec<_>>>()?;
            for (parts, _) in &results {
                sums.cls += parts.cls;
                sums.dw_p += parts.dw_p;
                sums.dw_w += parts.dw_w;
            }
            seen += results.len();
            let grads = GradientBundle::mean(&state, results.iter().map(|(_, g)| g));
            if !grads.is_finite() {
                return Err(Error::NonFinite(state.step as usize));
            }
            sgd_step(&mut state, &grads, config.lr);
        }
        let n = seen as f64;
        let rec = EpochRecord {
            epoch,
            cls: sums.cls / n,
            dw_p: sums.dw_p / n,
            dw_w: sums.dw_w / n,
            total: (sums.cls + sums.dw_p + sums.dw_w) / n,
        };
        log.epochs.push(rec);
    }
    Ok((state, log))
}
