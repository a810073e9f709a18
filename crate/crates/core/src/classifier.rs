//! Linear multi-label classifier on pooled features, its loss and gradients.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gap, sigmoid, FeatureMap};
use crate::synthworld::SyntheticScene;

const LOG_CLAMP: f64 = 1e-12;

/// Trainable parameters: one weight vector per class and the prototype
/// projection `L` (`depth x proj_dim`, applied as `L^T f`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    class_count: usize,
    depth: usize,
    proj_dim: usize,
    weights: Vec<f64>,
    projection: Vec<f64>,
    pub proto_threshold: f64,
    pub step: u64,
}

impl ClassifierState {
    /// Zero weights and an identity projection.
    pub fn new(class_count: usize, depth: usize, proto_threshold: f64) -> Self {
        let mut projection = vec![0.0; depth * depth];
        for i in 0..depth {
            projection[i * depth + i] = 1.0;
        }
        Self {
            class_count,
            depth,
            proj_dim: depth,
            weights: vec![0.0; class_count * depth],
            projection,
            proto_threshold,
            step: 0,
        }
    }

    pub fn from_parts(
        class_count: usize,
        depth: usize,
        proj_dim: usize,
        weights: Vec<f64>,
        projection: Vec<f64>,
        proto_threshold: f64,
    ) -> Result<Self> {
        if weights.len() != class_count * depth {
            return Err(Error::DimMismatch {
                expected: class_count * depth,
                actual: weights.len(),
            });
        }
        if projection.len() != depth * proj_dim {
            return Err(Error::DimMismatch {
                expected: depth * proj_dim,
                actual: projection.len(),
            });
        }
        if let Some(i) = weights.iter().chain(&projection).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            class_count,
            depth,
            proj_dim,
            weights,
            projection,
            proto_threshold,
            step: 0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    /// Weight vector of a 1-based class id.
    pub fn weight(&self, class: usize) -> &[f64] {
        &self.weights[(class - 1) * self.depth..class * self.depth]
    }

    pub fn weight_mut(&mut self, class: usize) -> &mut [f64] {
        let d = self.depth;
        &mut self.weights[(class - 1) * d..class * d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    /// `L^T f`.
    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.proj_dim];
        for (i, &fi) in f.iter().enumerate() {
            let row = &self.projection[i * self.proj_dim..(i + 1) * self.proj_dim];
            for (o, l) in out.iter_mut().zip(row) {
                *o += fi * l;
            }
        }
        out
    }

    pub fn project_map(&self, features: &FeatureMap) -> Result<FeatureMap> {
        self.check_depth(features)?;
        let data: Vec<f64> = features.pixels().flat_map(|px| self.project(px)).collect();
        FeatureMap::new(features.height(), features.width(), self.proj_dim, data)
    }

    pub(crate) fn check_depth(&self, features: &FeatureMap) -> Result<()> {
        if features.depth() != self.depth {
            return Err(Error::DimMismatch {
                expected: self.depth,
                actual: features.depth(),
            });
        }
        Ok(())
    }
}

/// Gradients shaped like [`ClassifierState`] plus the loss they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_weights: Vec<f64>,
    pub d_projection: Vec<f64>,
    pub loss_value: f64,
}

impl GradientBundle {
    pub fn zeros(state: &ClassifierState) -> Self {
        Self {
            d_weights: vec![0.0; state.weights.len()],
            d_projection: vec![0.0; state.projection.len()],
            loss_value: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            *a += b;
        }
        for (a, b) in self.d_projection.iter_mut().zip(&other.d_projection) {
            *a += b;
        }
        self.loss_value += other.loss_value;
    }

    pub fn scale(&mut self, k: f64) {
        self.d_weights.iter_mut().for_each(|v| *v *= k);
        self.d_projection.iter_mut().for_each(|v| *v *= k);
        self.loss_value *= k;
    }

    /// Mean of a sequence of bundles, summed in order.
    pub fn mean<'a>(state: &ClassifierState, bundles: impl IntoIterator<Item = &'a Self>) -> Self {
        let mut acc = Self::zeros(state);
        let mut n = 0usize;
        for b in bundles {
            acc.add_assign(b);
            n += 1;
        }
        if n > 0 {
            acc.scale(1.0 / n as f64);
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.loss_value.is_finite()
            && self.d_weights.iter().chain(&self.d_projection).all(|v| v.is_finite())
    }
}

/// `z_c = GAP(F W_c) = GAP(F) . W_c`.
pub fn logits(state: &ClassifierState, scene: &SyntheticScene) -> Result<Vec<f64>> {
    state.check_depth(&scene.features)?;
    let pooled = gap(&scene.features);
    Ok((1..=state.class_count)
        .map(|c| dot(&pooled, state.weight(c)))
        .collect())
}

/// Multi-label soft margin loss, averaged over classes.
pub fn cls_loss(z: &[f64], y: &[bool]) -> f64 {
    debug_assert_eq!(z.len(), y.len());
    let sum: f64 = z
        .iter()
        .zip(y)
        .map(|(&zc, &yc)| {
            let p = sigmoid(zc);
            if yc {
                p.max(LOG_CLAMP).ln()
            } else {
                (1.0 - p).max(LOG_CLAMP).ln()
            }
        })
        .sum();
    -sum / z.len() as f64
}

/// `dL/dz_c = (sigmoid(z_c) - y_c) / |C|`.
pub fn cls_logit_grad(z: &[f64], y: &[bool]) -> Vec<f64> {
    let n = z.len() as f64;
    z.iter()
        .zip(y)
        .map(|(&zc, &yc)| (sigmoid(zc) - if yc { 1.0 } else { 0.0 }) / n)
        .collect()
}

pub fn cls_grad(state: &ClassifierState, scene: &SyntheticScene, y: &[bool]) -> Result<GradientBundle> {
    cls_grad_features(state, &scene.features, y)
}

pub fn cls_grad_features(state: &ClassifierState, features: &FeatureMap, y: &[bool]) -> Result<GradientBundle> {
    if y.len() != state.class_count {
        return Err(Error::DimMismatch {
            expected: state.class_count,
            actual: y.len(),
        });
    }
    state.check_depth(features)?;
    let pooled = gap(features);
    let z: Vec<f64> = (1..=state.class_count)
        .map(|c| dot(&pooled, state.weight(c)))
        .collect();
    let dz = cls_logit_grad(&z, y);
    let mut bundle = GradientBundle::zeros(state);
    for (c, g) in dz.iter().enumerate() {
        let row = &mut bundle.d_weights[c * state.depth..(c + 1) * state.depth];
        for (r, p) in row.iter_mut().zip(&pooled) {
            *r = g * p;
        }
    }
    bundle.loss_value = cls_loss(&z, y);
    Ok(bundle)
}

/// Plain gradient descent.
pub fn sgd_step(state: &mut ClassifierState, grads: &GradientBundle, lr: f64) {
    for (w, g) in state.weights.iter_mut().zip(&grads.d_weights) {
        *w -= lr * g;
    }
    for (l, g) in state.projection.iter_mut().zip(&grads.d_projection) {
        *l -= lr * g;
    }
    state.step += 1;
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    class_count: usize,
    depth: usize,
    proj_dim: usize,
    step: u64,
    proto_threshold: f64,
}

/// Checkpoint layout: `SFCK`, `u32` header length, JSON header, then the
/// weights and the projection as little-endian `f64`.
pub fn write_checkpoint<W: Write>(w: &mut W, state: &ClassifierState) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        class_count: state.class_count,
        depth: state.depth,
        proj_dim: state.proj_dim,
        step: state.step,
        proto_threshold: state.proto_threshold,
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in state.weights.iter().chain(&state.projection) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ClassifierState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let nw = header.class_count * header.depth;
    let np = header.depth * header.proj_dim;
    let mut payload = vec![0u8; (nw + np) * 8];
    r.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut state = ClassifierState::from_parts(
        header.class_count,
        header.depth,
        header.proj_dim,
        values[..nw].to_vec(),
        values[nw..].to_vec(),
        header.proto_threshold,
    )?;
    state.step = header.step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LabelMap;

    fn scene(h: usize, w: usize, d: usize, data: Vec<f64>) -> SyntheticScene {
        SyntheticScene {
            features: FeatureMap::new(h, w, d, data).unwrap(),
            gt_mask: LabelMap::background(h, w),
            present_classes: vec![],
            composition: vec![(0.0, 0.0); h * w],
        }
    }

    #[test]
    fn logits_basic() {
        let s = scene(1, 1, 2, vec![0.6, 0.8]);
        let mut st = ClassifierState::new(2, 2, 0.3);
        assert_eq!(logits(&st, &s).unwrap(), vec![0.0, 0.0]);
        st.weight_mut(1).copy_from_slice(&[0.6, 0.8]);
        assert!((logits(&st, &s).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logits_equal_pooled_pixel_dots() {
        let s = scene(2, 2, 3, (0..12).map(|v| (v as f64 * 0.37).sin()).collect());
        let mut st = ClassifierState::new(1, 3, 0.3);
        st.weight_mut(1).copy_from_slice(&[0.3, -1.2, 0.7]);
        let z = logits(&st, &s).unwrap()[0];
        let per_pixel = s.features.dot_map(st.weight(1)).unwrap();
        let mean = per_pixel.data().iter().sum::<f64>() / 4.0;
        assert!((z - mean).abs() < 1e-12);
    }

    #[test]
    fn logit_dimension_checked() {
        let s = scene(1, 1, 3, vec![1.0, 0.0, 0.0]);
        let st = ClassifierState::new(2, 2, 0.3);
        assert!(matches!(logits(&st, &s), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cls_loss(&[0.0, 0.0, 0.0], &[true, false, true]) - ln2).abs() < 1e-15);
        assert!((cls_loss(&[0.0, 0.0], &[true, false]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cls_loss(&[40.0], &[true]) < 1e-15);
        // clamped rather than infinite when confidently wrong
        assert!(cls_loss(&[800.0], &[false]).is_finite());
    }

    #[test]
    fn logit_gradient_at_zero() {
        let g = cls_logit_grad(&[0.0, 0.0], &[true, false]);
        assert_eq!(g, vec![-0.25, 0.25]);
    }

    #[test]
    fn sgd_algebra() {
        let mut st = ClassifierState::new(1, 2, 0.3);
        st.weights_mut().copy_from_slice(&[1.0, -2.0]);
        let before = st.clone();
        let zero = GradientBundle::zeros(&st);
        sgd_step(&mut st, &zero, 0.5);
        assert_eq!(st.weights(), before.weights());

        let mut g = GradientBundle::zeros(&st);
        g.d_weights.copy_from_slice(&[1.0, -2.0]);
        sgd_step(&mut st, &g, 1.0);
        assert_eq!(st.weights(), &[0.0, 0.0]);
    }

    #[test]
    fn checkpoint_bytes_start_with_magic() {
        let mut st = ClassifierState::new(2, 3, 0.3);
        st.weights_mut()[4] = -0.25;
        st.step = 17;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &st).unwrap();
        assert_eq!(&buf[..4], b"SFCK");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, st);
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
