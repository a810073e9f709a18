//! Activation-map generation: classifier-weight CAMs (with an affinity-based
//! refinement and a complementary background channel), masked-average-pooled
//! prototypes, prototype CAMs, their sum, and argmax decoding.
//!
//! Forward passes that feed a loss return a trace so the matching backward
//! pass can push stack gradients into the classifier weights or the
//! prototype projection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierState;
use crate::codec;
use crate::error::{Error, Result};
use crate::numerics::{
    dot, ensure_same_shape, masked_average_pool, max_normalize, max_normalize_backward, norm,
    relu, BinaryMask, FeatureMap, LabelMap, ScalarMap,
};
use crate::synthworld::{ClassId, SyntheticScene};

/// Additive guard in every max-normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackKind {
    ClassifierWeight,
    Prototype,
    Final,
}

/// `|C| + 1` channels: foreground classes `1..=|C|` then background.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStack {
    pub kind: StackKind,
    pub channels: Vec<ScalarMap>,
}

impl ActivationStack {
    pub fn zeros(kind: StackKind, class_count: usize, height: usize, width: usize) -> Self {
        Self {
            kind,
            channels: vec![ScalarMap::zeros(height, width); class_count + 1],
        }
    }

    pub fn class_count(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn foreground(&self, class: ClassId) -> &ScalarMap {
        &self.channels[class - 1]
    }

    pub fn background(&self) -> &ScalarMap {
        self.channels.last().expect("stack has a background channel")
    }

    /// Max over foreground channels at each pixel.
    pub fn foreground_max(&self) -> ScalarMap {
        let (h, w) = self.shape();
        let mut out = ScalarMap::filled(h, w, f64::NEG_INFINITY);
        for ch in &self.channels[..self.class_count()] {
            for (o, v) in out.data_mut().iter_mut().zip(ch.data()) {
                *o = o.max(*v);
            }
        }
        out
    }

    /// Writes one PGM per channel plus a JSON sidecar.
    pub fn export(&self, dir: &std::path::Path, stem: &str, threshold: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let c = self.class_count();
        for (k, ch) in self.channels.iter().enumerate() {
            let name = if k == c {
                format!("{stem}_bg.pgm")
            } else {
                format!("{stem}_c{}.pgm", k + 1)
            };
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            codec::scalar_to_pgm(&mut f, ch)?;
        }
        let sidecar = serde_json::json!({
            "kind": self.kind,
            "class_count": c,
            "height": self.shape().0,
            "width": self.shape().1,
            "threshold": threshold,
            "scale": 255,
        });
        let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        f.write_all(serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }
}

/// Row-normalized `relu(cos)` affinity between all pixel pairs.
///
/// Stands in for the pixel correlation module: one round of smoothing where
/// each pixel takes the affinity-weighted mean of the map. Pixels with a
/// zero feature vector keep only themselves.
#[derive(Clone, Debug)]
pub struct PcmAffinity {
    height: usize,
    width: usize,
    rows: Vec<f64>,
}

impl PcmAffinity {
    pub fn from_features(features: &FeatureMap) -> Self {
        let n = features.num_pixels();
        let d = features.depth();
        let mut unit = vec![0.0; n * d];
        let mut alive = vec![false; n];
        for (p, px) in features.pixels().enumerate() {
            let len = norm(px);
            if len > 0.0 {
                alive[p] = true;
                for (u, v) in unit[p * d..(p + 1) * d].iter_mut().zip(px) {
                    *u = v / len;
                }
            }
        }
        let mut rows = vec![0.0; n * n];
        for p in 0..n {
            let row = &mut rows[p * n..(p + 1) * n];
            if !alive[p] {
                row[p] = 1.0;
                continue;
            }
            let up = &unit[p * d..(p + 1) * d];
            let mut sum = 0.0;
            for q in 0..n {
                if alive[q] {
                    let a = dot(up, &unit[q * d..(q + 1) * d]).max(0.0);
                    row[q] = a;
                    sum += a;
                }
            }
            row.iter_mut().for_each(|a| *a /= sum);
        }
        Self {
            height: features.height(),
            width: features.width(),
            rows,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.rows[p * n..(p + 1) * n]
    }

    pub fn apply(&self, map: &ScalarMap) -> Result<ScalarMap> {
        ensure_same_shape(self.shape(), map.shape())?;
        let n = map.len();
        let data = (0..n).map(|p| dot(self.row(p), map.data())).collect();
        ScalarMap::new(self.height, self.width, data)
    }

    pub fn apply_transpose(&self, grad: &ScalarMap) -> Result<ScalarMap> {
        ensure_same_shape(self.shape(), grad.shape())?;
        let n = grad.len();
        let mut data = vec![0.0; n];
        for (p, &g) in grad.data().iter().enumerate() {
            if g != 0.0 {
                for (o, a) in data.iter_mut().zip(self.row(p)) {
                    *o += g * a;
                }
            }
        }
        ScalarMap::new(self.height, self.width, data)
    }
}

/// Affinity smoothing followed by max-normalization.
pub fn pcm_refine(raw_cam: &ScalarMap, features: &FeatureMap) -> Result<ScalarMap> {
    ensure_same_shape(raw_cam.shape(), (features.height(), features.width()))?;
    let affinity = PcmAffinity::from_features(features);
    Ok(max_normalize(&affinity.apply(raw_cam)?, NORM_EPS))
}

/// Forward state of a classifier-weight CAM, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct WeightCamTrace {
    pub classes: Vec<ClassId>,
    /// `relu(F W_c)` per listed class.
    rectified: Vec<ScalarMap>,
    /// Affinity-smoothed maps, when refinement is on.
    smoothed: Option<Vec<ScalarMap>>,
    /// Position in `classes` of the channel achieving the foreground max.
    winner: Vec<Option<usize>>,
    pub stack: ActivationStack,
}

/// Classifier-weight CAM over the given classes; the other foreground
/// channels stay zero. Background is `1 - max` over the listed channels.
pub fn weight_cam_forward(
    state: &ClassifierState,
    features: &FeatureMap,
    classes: &[ClassId],
    affinity: Option<&PcmAffinity>,
) -> Result<WeightCamTrace> {
    state.check_depth(features)?;
    let (h, w) = (features.height(), features.width());
    let c = state.class_count();
    let mut stack = ActivationStack::zeros(StackKind::ClassifierWeight, c, h, w);
    let mut rectified = Vec::with_capacity(classes.len());
    let mut smoothed = affinity.map(|_| Vec::with_capacity(classes.len()));
    for &class in classes {
        if class == 0 || class > c {
            return Err(Error::DimMismatch {
                expected: c,
                actual: class,
            });
        }
        let r = relu(&features.dot_map(state.weight(class))?);
        let n = max_normalize(&r, NORM_EPS);
        stack.channels[class - 1] = match (affinity, smoothed.as_mut()) {
            (Some(a), Some(sm)) => {
                let m = a.apply(&n)?;
                let out = max_normalize(&m, NORM_EPS);
                sm.push(m);
                out
            }
            _ => n,
        };
        rectified.push(r);
    }

    let mut winner = vec![None; h * w];
    let mut bg = ScalarMap::filled(h, w, 1.0);
    for (p, (b, win)) in bg.data_mut().iter_mut().zip(winner.iter_mut()).enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &class) in classes.iter().enumerate() {
            let v = stack.channels[class - 1].data()[p];
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            *b = 1.0 - v;
            *win = Some(i);
        }
    }
    stack.channels[c] = bg;
    Ok(WeightCamTrace {
        classes: classes.to_vec(),
        rectified,
        smoothed,
        winner,
        stack,
    })
}

/// Gradient of a loss with respect to the classifier weights, given the
/// loss gradient on every channel of the traced stack.
pub fn weight_cam_backward(
    trace: &WeightCamTrace,
    state: &ClassifierState,
    features: &FeatureMap,
    affinity: Option<&PcmAffinity>,
    grad: &[ScalarMap],
) -> Result<Vec<f64>> {
    let c = state.class_count();
    let d = state.depth();
    if grad.len() != c + 1 {
        return Err(Error::DimMismatch {
            expected: c + 1,
            actual: grad.len(),
        });
    }
    let mut per_class: Vec<ScalarMap> = trace
        .classes
        .iter()
        .map(|&class| grad[class - 1].clone())
        .collect();
    for (p, (&g_bg, win)) in grad[c].data().iter().zip(&trace.winner).enumerate() {
        if let Some(i) = win {
            per_class[*i].data_mut()[p] -= g_bg;
        }
    }

    let mut d_weights = vec![0.0; c * d];
    for (i, &class) in trace.classes.iter().enumerate() {
        let g_out = &per_class[i];
        let g_norm = match (&trace.smoothed, affinity) {
            (Some(sm), Some(a)) => a.apply_transpose(&max_normalize_backward(&sm[i], NORM_EPS, g_out))?,
            _ => g_out.clone(),
        };
        let r = &trace.rectified[i];
        let g_r = max_normalize_backward(r, NORM_EPS, &g_norm);
        let row = &mut d_weights[(class - 1) * d..class * d];
        for (p, (&g, &rv)) in g_r.data().iter().zip(r.data()).enumerate() {
            if rv > 0.0 && g != 0.0 {
                for (acc, f) in row.iter_mut().zip(features.pixel(p)) {
                    *acc += g * f;
                }
            }
        }
    }
    Ok(d_weights)
}

/// Classifier-weight CAM for the scene's labelled classes.
pub fn classifier_weight_cam(
    state: &ClassifierState,
    scene: &SyntheticScene,
    use_pcm: bool,
) -> Result<ActivationStack> {
    let affinity = use_pcm.then(|| PcmAffinity::from_features(&scene.features));
    Ok(weight_cam_forward(state, &scene.features, &scene.present_classes, affinity.as_ref())?.stack)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    /// Projected prototype `L^T mean(F)`.
    pub vector: Vec<f64>,
    /// Unprojected masked mean, kept for the projection gradient.
    pub feature_mean: Vec<f64>,
    pub mask: BinaryMask,
    pub fallback: bool,
}

/// Prototypes indexed like stack channels; `None` for absent classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub entries: Vec<Option<Prototype>>,
}

impl PrototypeSet {
    pub fn background(&self) -> Option<&Prototype> {
        self.entries.last().and_then(Option::as_ref)
    }

    pub fn class(&self, class: ClassId) -> Option<&Prototype> {
        self.entries[class - 1].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }
}

fn prototype_from(
    state: &ClassifierState,
    features: &FeatureMap,
    channel: &ScalarMap,
    threshold: f64,
) -> Result<Prototype> {
    let mut mask = channel.threshold(threshold);
    let mut fallback = false;
    if mask.count_active() == 0 {
        mask = BinaryMask::single(channel.height(), channel.width(), channel.argmax());
        fallback = true;
    }
    let feature_mean = masked_average_pool(features, &mask)?;
    Ok(Prototype {
        vector: state.project(&feature_mean),
        feature_mean,
        mask,
        fallback,
    })
}

/// Prototypes for the listed classes and background, pooled from projected
/// features where the weight CAM reaches `state.proto_threshold`. An empty
/// mask falls back to the channel's argmax pixel.
pub fn extract_prototypes_for(
    state: &ClassifierState,
    features: &FeatureMap,
    classes: &[ClassId],
    stack: &ActivationStack,
) -> Result<PrototypeSet> {
    ensure_same_shape(stack.shape(), (features.height(), features.width()))?;
    let c = state.class_count();
    let mut entries = vec![None; c + 1];
    for &class in classes {
        entries[class - 1] = Some(prototype_from(
            state,
            features,
            stack.foreground(class),
            state.proto_threshold,
        )?);
    }
    entries[c] = Some(prototype_from(
        state,
        features,
        stack.background(),
        state.proto_threshold,
    )?);
    Ok(PrototypeSet { entries })
}

pub fn extract_prototypes(
    state: &ClassifierState,
    scene: &SyntheticScene,
    stack: &ActivationStack,
) -> Result<PrototypeSet> {
    extract_prototypes_for(state, &scene.features, &scene.present_classes, stack)
}

/// `relu(cos(P_c, L^T f_p))` per pixel for every prototype; zero channels
/// where there is none. Pixels whose projection vanishes get zero.
pub fn prototype_cam_for(
    state: &ClassifierState,
    features: &FeatureMap,
    protos: &PrototypeSet,
) -> Result<ActivationStack> {
    state.check_depth(features)?;
    if protos.is_empty() {
        return Err(Error::InvalidConfig("prototype set is empty".into()));
    }
    let (h, w) = (features.height(), features.width());
    let projected = state.project_map(features)?;
    let norms: Vec<f64> = projected.pixels().map(norm).collect();
    let mut stack = ActivationStack::zeros(StackKind::Prototype, state.class_count(), h, w);
    for (channel, proto) in stack.channels.iter_mut().zip(&protos.entries) {
        let Some(proto) = proto else { continue };
        let pn = norm(&proto.vector);
        if pn == 0.0 {
            return Err(Error::ZeroVector);
        }
        for (p, out) in channel.data_mut().iter_mut().enumerate() {
            if norms[p] > 0.0 {
                *out = (dot(&proto.vector, projected.pixel(p)) / (pn * norms[p])).clamp(0.0, 1.0);
            }
        }
    }
    Ok(stack)
}

pub fn prototype_cam(
    state: &ClassifierState,
    scene: &SyntheticScene,
    protos: &PrototypeSet,
) -> Result<ActivationStack> {
    prototype_cam_for(state, &scene.features, protos)
}

/// Gradient of a loss with respect to the projection `L`, given the loss
/// gradient on each prototype-CAM channel. Masks are held fixed; the
/// prototype itself depends on `L` through `P = L^T mean(F)`.
pub fn prototype_cam_backward(
    state: &ClassifierState,
    features: &FeatureMap,
    protos: &PrototypeSet,
    grad: &[ScalarMap],
) -> Result<Vec<f64>> {
    let dp = state.proj_dim();
    let d = state.depth();
    let projected = state.project_map(features)?;
    let norms: Vec<f64> = projected.pixels().map(norm).collect();
    let mut d_proj = vec![0.0; d * dp];
    for (g, proto) in grad.iter().zip(&protos.entries) {
        let Some(proto) = proto else { continue };
        let pv = &proto.vector;
        let pn = norm(pv);
        if pn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut g_proto = vec![0.0; dp];
        for (p, &gp) in g.data().iter().enumerate() {
            if gp == 0.0 || norms[p] == 0.0 {
                continue;
            }
            let x = projected.pixel(p);
            let xn = norms[p];
            let cos = dot(pv, x) / (pn * xn);
            if cos <= 0.0 || cos > 1.0 {
                continue;
            }
            let f = features.pixel(p);
            for j in 0..dp {
                let d_x = gp * (pv[j] / (pn * xn) - cos * x[j] / (xn * xn));
                g_proto[j] += gp * (x[j] / (pn * xn) - cos * pv[j] / (pn * pn));
                if d_x != 0.0 {
                    for (i, &fi) in f.iter().enumerate() {
                        d_proj[i * dp + j] += fi * d_x;
                    }
                }
            }
        }
        for (i, &mi) in proto.feature_mean.iter().enumerate() {
            for j in 0..dp {
                d_proj[i * dp + j] += mi * g_proto[j];
            }
        }
    }
    Ok(d_proj)
}

/// Channelwise sum of a weight stack and a prototype stack.
pub fn final_cam(weight_stack: &ActivationStack, proto_stack: &ActivationStack) -> Result<ActivationStack> {
    if weight_stack.channels.len() != proto_stack.channels.len() {
        return Err(Error::DimMismatch {
            expected: weight_stack.channels.len(),
            actual: proto_stack.channels.len(),
        });
    }
    let channels = weight_stack
        .channels
        .iter()
        .zip(&proto_stack.channels)
        .map(|(a, b)| a.zip_with(b, |x, y| x + y))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationStack {
        kind: StackKind::Final,
        channels,
    })
}

/// Per-pixel argmax with background encoded as `0`. Channels are visited in
/// output-id order (background, then classes `1..`) and only a strictly
/// larger value takes over, so ties go to the lower id.
pub fn decode_mask(stack: &ActivationStack) -> LabelMap {
    let (h, w) = stack.shape();
    let c = stack.class_count();
    let mut out = LabelMap::background(h, w);
    let bg = stack.background().data();
    for (p, label) in out.data_mut().iter_mut().enumerate() {
        let mut best = bg[p];
        for class in 1..=c {
            let v = stack.channels[class - 1].data()[p];
            if v > best {
                best = v;
                *label = class as u16;
            }
        }
    }
    out
}
