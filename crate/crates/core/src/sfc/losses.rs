use crate::camgen::{
    extract_prototypes_for, prototype_cam_backward, prototype_cam_for, weight_cam_backward,
    weight_cam_forward, ActivationStack, PcmAffinity,
};
use crate::classifier::{cls_grad_features, ClassifierState, GradientBundle};
use crate::error::{Error, Result};
use crate::numerics::{l1_distance, l1_grad, FeatureMap, ResizePlan, ScalarMap};
use crate::synthworld::{ClassId, SyntheticScene};

use super::config::TrainConfig;
use super::dc::DCVector;

/// A training scene with everything the losses reuse across epochs.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub features: FeatureMap,
    pub classes: Vec<ClassId>,
    pub labels: Vec<bool>,
    pub affinity: Option<PcmAffinity>,
    pub small: Option<SmallView>,
}

/// Bilinearly down-scaled copy of a scene.
#[derive(Clone, Debug)]
pub struct SmallView {
    pub plan: ResizePlan,
    pub features: FeatureMap,
    pub affinity: Option<PcmAffinity>,
}

/// Output size of a down-scale by `factor`, at least one pixel per side.
pub fn scaled_shape(h: usize, w: usize, factor: f64) -> (usize, usize) {
    let side = |n: usize| ((n as f64 * factor).round() as usize).max(1);
    (side(h), side(w))
}

impl PreparedScene {
    pub fn new(scene: &SyntheticScene, class_count: usize, use_pcm: bool, scale: Option<f64>) -> Result<Self> {
        let features = scene.features.clone();
        let affinity = use_pcm.then(|| PcmAffinity::from_features(&features));
        let small = match scale {
            Some(factor) => Some(SmallView::new(&features, factor, use_pcm)?),
            None => None,
        };
        Ok(Self {
            labels: scene.labels(class_count),
            classes: scene.present_classes.clone(),
            features,
            affinity,
            small,
        })
    }
}

impl SmallView {
    pub fn new(features: &FeatureMap, factor: f64, use_pcm: bool) -> Result<Self> {
        let (h, w) = (features.height(), features.width());
        if h < 2 || w < 2 {
            return Err(Error::TooSmall { height: h, width: w });
        }
        let (sh, sw) = scaled_shape(h, w, factor);
        let plan = ResizePlan::new(h, w, sh, sw)?;
        let small = plan.apply_features(features)?;
        let affinity = use_pcm.then(|| PcmAffinity::from_features(&small));
        Ok(Self {
            plan,
            features: small,
            affinity,
        })
    }
}

/// Loss between two stacks and its gradient with respect to each.
#[derive(Clone, Debug)]
pub struct StackLoss {
    pub loss: f64,
    pub grad_weight: Vec<ScalarMap>,
    pub grad_proto: Vec<ScalarMap>,
}

/// `sum_c dc_c l1(W_c, P_c) + l1(W_bg, P_bg)` over the listed classes.
pub fn dw_p_stack_loss(
    weight_stack: &ActivationStack,
    proto_stack: &ActivationStack,
    dc: &DCVector,
    present: &[ClassId],
) -> Result<StackLoss> {
    if weight_stack.channels.len() != proto_stack.channels.len() {
        return Err(Error::DimMismatch {
            expected: weight_stack.channels.len(),
            actual: proto_stack.channels.len(),
        });
    }
    let (h, w) = weight_stack.shape();
    let n = weight_stack.channels.len();
    let mut grad_weight = vec![ScalarMap::zeros(h, w); n];
    let mut grad_proto = vec![ScalarMap::zeros(h, w); n];
    let mut loss = 0.0;
    let bg = n - 1;
    let terms = present.iter().map(|&c| (c - 1, dc.get(c))).chain([(bg, 1.0)]);
    for (k, weight) in terms {
        let (a, b) = (&weight_stack.channels[k], &proto_stack.channels[k]);
        loss += weight * l1_distance(a, b)?;
        let g = l1_grad(a, b)?;
        grad_weight[k] = g.map(|v| weight * v);
        grad_proto[k] = g.map(|v| -weight * v);
    }
    Ok(StackLoss {
        loss,
        grad_weight,
        grad_proto,
    })
}

/// Prototype-vs-weight consistency and its gradients into `W` and `L`.
pub fn dw_p_terms(state: &ClassifierState, scene: &PreparedScene, dc: &DCVector) -> Result<GradientBundle> {
    let trace = weight_cam_forward(state, &scene.features, &scene.classes, scene.affinity.as_ref())?;
    let protos = extract_prototypes_for(state, &scene.features, &scene.classes, &trace.stack)?;
    let proto_stack = prototype_cam_for(state, &scene.features, &protos)?;
    let sl = dw_p_stack_loss(&trace.stack, &proto_stack, dc, &scene.classes)?;
    let d_weights = weight_cam_backward(
        &trace,
        state,
        &scene.features,
        scene.affinity.as_ref(),
        &sl.grad_weight,
    )?;
    let d_projection = prototype_cam_backward(state, &scene.features, &protos, &sl.grad_proto)?;
    Ok(GradientBundle {
        d_weights,
        d_projection,
        loss_value: sl.loss,
    })
}

/// Consistency between the down-scaled weight CAM of the scene and the
/// weight CAM of the down-scaled scene, foreground classes only.
pub fn dw_w_terms(state: &ClassifierState, scene: &PreparedScene, dc: &DCVector) -> Result<GradientBundle> {
    let small = scene
        .small
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("scene was prepared without a down-scaled view".into()))?;
    let big = weight_cam_forward(state, &scene.features, &scene.classes, scene.affinity.as_ref())?;
    let little = weight_cam_forward(state, &small.features, &scene.classes, small.affinity.as_ref())?;
    let c = state.class_count();
    let (h, w) = big.stack.shape();
    let (sh, sw) = little.stack.shape();
    let mut g_big = vec![ScalarMap::zeros(h, w); c + 1];
    let mut g_little = vec![ScalarMap::zeros(sh, sw); c + 1];
    let mut loss = 0.0;
    for &class in &scene.classes {
        let weight = dc.get(class);
        let shrunk = small.plan.apply(big.stack.foreground(class))?;
        let target = little.stack.foreground(class);
        loss += weight * l1_distance(&shrunk, target)?;
        let g = l1_grad(&shrunk, target)?;
        g_big[class - 1] = small.plan.adjoint(&g.map(|v| weight * v))?;
        g_little[class - 1] = g.map(|v| -weight * v);
    }
    let mut d_weights = weight_cam_backward(&big, state, &scene.features, scene.affinity.as_ref(), &g_big)?;
    let d_small = weight_cam_backward(&little, state, &small.features, small.affinity.as_ref(), &g_little)?;
    for (a, b) in d_weights.iter_mut().zip(&d_small) {
        *a += b;
    }
    Ok(GradientBundle {
        d_weights,
        d_projection: vec![0.0; state.projection().len()],
        loss_value: loss,
    })
}

pub fn dw_p_loss(
    state: &ClassifierState,
    scene: &SyntheticScene,
    dc: &DCVector,
    use_pcm: bool,
) -> Result<GradientBundle> {
    let prepared = PreparedScene::new(scene, state.class_count(), use_pcm, None)?;
    dw_p_terms(state, &prepared, dc)
}

pub fn dw_w_loss(
    state: &ClassifierState,
    scene: &SyntheticScene,
    dc: &DCVector,
    scale_factor: f64,
    use_pcm: bool,
) -> Result<GradientBundle> {
    let prepared = PreparedScene::new(scene, state.class_count(), use_pcm, Some(scale_factor))?;
    dw_w_terms(state, &prepared, dc)
}

/// Loss values of each term of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dw_p: f64,
    pub dw_w: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.dw_p + self.dw_w
    }
}

/// Classification loss plus the enabled consistency terms. Disabled
/// distribution weighting means a unit weight for every class.
pub fn msdw_terms(
    state: &ClassifierState,
    scene: &PreparedScene,
    dc: &DCVector,
    config: &TrainConfig,
) -> Result<(LossBreakdown, GradientBundle)> {
    let mut bundle = cls_grad_features(state, &scene.features, &scene.labels)?;
    let mut parts = LossBreakdown {
        cls: bundle.loss_value,
        ..Default::default()
    };
    let plain = DCVector::plain(state.class_count());
    if config.use_dw_p {
        let g = dw_p_terms(state, scene, if config.dc_in_p { dc } else { &plain })?;
        parts.dw_p = g.loss_value;
        bundle.add_assign(&g);
    }
    if config.use_dw_w {
        let g = dw_w_terms(state, scene, if config.dc_in_w { dc } else { &plain })?;
        parts.dw_w = g.loss_value;
        bundle.add_assign(&g);
    }
    Ok((parts, bundle))
}

pub fn msdw_total(
    state: &ClassifierState,
    scene: &SyntheticScene,
    dc: &DCVector,
    config: &TrainConfig,
) -> Result<(LossBreakdown, GradientBundle)> {
    let prepared = PreparedScene::new(
        scene,
        state.class_count(),
        config.use_pcm,
        config.use_dw_w.then_some(config.scale_factor),
    )?;
    msdw_terms(state, &prepared, dc, config)
}
