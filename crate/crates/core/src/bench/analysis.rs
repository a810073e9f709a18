use serde::{Deserialize, Serialize};

use crate::camgen::{
    classifier_weight_cam, extract_prototypes, prototype_cam, ActivationStack, NORM_EPS,
};
use crate::classifier::ClassifierState;
use crate::error::Result;
use crate::numerics::{dot, max_normalize};
use crate::synthworld::{class_counts, head_class, tail_class, ClassId, Dataset, FeatureBasis};

/// Coordinates of one weight vector in the world basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDecomposition {
    pub class: ClassId,
    /// Coefficient on each class feature `f_1..f_C`.
    pub class_coefficients: Vec<f64>,
    /// Coefficient on the shared feature `f_0`.
    pub shared: f64,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
}

impl ClassDecomposition {
    pub fn own(&self) -> f64 {
        self.class_coefficients[self.class - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDecomposition {
    pub classes: Vec<ClassDecomposition>,
}

impl WeightDecomposition {
    pub fn class(&self, class: ClassId) -> &ClassDecomposition {
        &self.classes[class - 1]
    }

    pub fn shared(&self, class: ClassId) -> f64 {
        self.class(class).shared
    }
}

pub fn decompose_weights(state: &ClassifierState, basis: &FeatureBasis) -> WeightDecomposition {
    let classes = (1..=state.class_count())
        .map(|c| {
            let w = state.weight(c);
            let class_coefficients: Vec<f64> =
                basis.class_features.iter().map(|f| dot(w, f)).collect();
            let shared = dot(w, &basis.shared_feature);
            let mut residual = w.to_vec();
            for (k, v) in basis.vectors().enumerate() {
                let coeff = if k < class_coefficients.len() {
                    class_coefficients[k]
                } else {
                    shared
                };
                residual.iter_mut().zip(v).for_each(|(r, b)| *r -= coeff * b);
            }
            let residual_norm = dot(&residual, &residual).sqrt();
            ClassDecomposition {
                class: c,
                class_coefficients,
                shared,
                residual,
                residual_norm,
            }
        })
        .collect();
    WeightDecomposition { classes }
}

/// Activated share of the image over scenes containing one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaFractions {
    pub weight: f64,
    pub prototype: f64,
    pub ground_truth: f64,
}

/// Pixel-level view of what the weights and prototypes respond to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub head: ClassId,
    pub tail: ClassId,
    /// `dot_means[g][c - 1]`: mean `f_p . W_c` over pixels whose ground
    /// truth is `g` (0 = background).
    pub dot_means: Vec<Vec<f64>>,
    pub tail_on_tail: f64,
    pub tail_on_head: f64,
    pub head_on_head: f64,
    pub head_on_tail: f64,
    /// Shares of whole frames, indexed by class id minus one.
    pub areas: Vec<AreaFractions>,
    /// Shares of the union of object pixels, indexed by class id minus one.
    pub object_areas: Vec<AreaFractions>,
    pub threshold: f64,
}

impl ActivationReport {
    pub fn area(&self, class: ClassId) -> &AreaFractions {
        &self.areas[class - 1]
    }

    pub fn object_area(&self, class: ClassId) -> &AreaFractions {
        &self.object_areas[class - 1]
    }
}

fn active(map: &crate::numerics::ScalarMap, tau: f64) -> usize {
    map.data().iter().filter(|&&v| v >= tau).count()
}

fn active_on_objects(map: &crate::numerics::ScalarMap, gt: &[u16], tau: f64) -> usize {
    map.data().iter().zip(gt).filter(|&(&v, &g)| g != 0 && v >= tau).count()
}

#[derive(Clone, Copy, Default)]
struct Hits {
    weight: usize,
    prototype: usize,
    truth: usize,
    total: usize,
}

impl Hits {
    fn fractions(&self) -> AreaFractions {
        let f = |x: usize| if self.total > 0 { x as f64 / self.total as f64 } else { 0.0 };
        AreaFractions {
            weight: f(self.weight),
            prototype: f(self.prototype),
            ground_truth: f(self.truth),
        }
    }
}

/// Dot-product means by ground-truth class and, for every class, the share
/// of pixels in scenes containing it where the max-normalized weight CAM or
/// prototype CAM reaches `state.proto_threshold`, next to the true share.
/// Shares are reported over whole frames and over object pixels only.
pub fn activation_report(state: &ClassifierState, dataset: &Dataset, use_pcm: bool) -> Result<ActivationReport> {
    let c = state.class_count();
    let tau = state.proto_threshold;
    let mut dot_sums = vec![vec![0.0; c]; c + 1];
    let mut dot_counts = vec![0usize; c + 1];
    let mut frame = vec![Hits::default(); c];
    let mut objects = vec![Hits::default(); c];
    for scene in &dataset.scenes {
        for (p, px) in scene.features.pixels().enumerate() {
            let g = scene.gt_mask.data()[p] as usize;
            dot_counts[g] += 1;
            for (k, s) in dot_sums[g].iter_mut().enumerate() {
                *s += dot(px, state.weight(k + 1));
            }
        }
        let wstack = classifier_weight_cam(state, scene, use_pcm)?;
        let protos = extract_prototypes(state, scene, &wstack)?;
        let pstack = prototype_cam(state, scene, &protos)?;
        let gt = scene.gt_mask.data();
        let npx = scene.features.num_pixels();
        let nobj = gt.iter().filter(|&&g| g != 0).count();
        for &class in &scene.present_classes {
            let w = wstack.foreground(class);
            let p = max_normalize(pstack.foreground(class), NORM_EPS);
            let truth = scene.gt_mask.count(class as u16);
            let h = &mut frame[class - 1];
            h.weight += active(w, tau);
            h.prototype += active(&p, tau);
            h.truth += truth;
            h.total += npx;
            let h = &mut objects[class - 1];
            h.weight += active_on_objects(w, gt, tau);
            h.prototype += active_on_objects(&p, gt, tau);
            h.truth += truth;
            h.total += nobj;
        }
    }
    let dot_means: Vec<Vec<f64>> = dot_sums
        .into_iter()
        .zip(&dot_counts)
        .map(|(row, &n)| row.into_iter().map(|s| if n > 0 { s / n as f64 } else { 0.0 }).collect())
        .collect();
    let areas = frame.iter().map(Hits::fractions).collect();
    let object_areas = objects.iter().map(Hits::fractions).collect();
    let counts = class_counts(dataset);
    let (head, tail) = (head_class(&counts), tail_class(&counts));
    Ok(ActivationReport {
        head,
        tail,
        tail_on_tail: dot_means[tail][tail - 1],
        tail_on_head: dot_means[tail][head - 1],
        head_on_head: dot_means[head][head - 1],
        head_on_tail: dot_means[head][tail - 1],
        dot_means,
        areas,
        object_areas,
        threshold: tau,
    })
}

/// Share of stack pixels per foreground channel at or above `tau`.
pub fn activated_fraction(stack: &ActivationStack, class: ClassId, tau: f64) -> f64 {
    let ch = stack.foreground(class);
    active(ch, tau) as f64 / ch.len() as f64
}
