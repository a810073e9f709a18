use std::collections::btree_map::{BTreeMap, Entry};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgen::{classifier_weight_cam, decode_mask, extract_prototypes, final_cam, prototype_cam};
use crate::classifier::ClassifierState;
use crate::error::Result;
use crate::numerics::LabelMap;
use crate::sfc::{train, TrainConfig};
use crate::synthworld::{generate, make_basis, Dataset, LongTailSpec};

use super::metrics::{miou, IoUReport};

/// Which stack is decoded into the pseudo-mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Weight,
    Prototype,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    Base,
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
    IX,
    X,
}

/// Training switches of one setting, independent of the base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Toggles {
    pub ibr: bool,
    pub dw_p: bool,
    pub dw_w: bool,
    pub dc_in_p: bool,
    pub dc_in_w: bool,
}

impl Setting {
    pub const COMPONENTS: [Setting; 6] = [Self::Base, Self::I, Self::II, Self::III, Self::IV, Self::V];
    pub const DC: [Setting; 4] = [Self::V, Self::VI, Self::VII, Self::VIII];
    pub const INFERENCE: [Setting; 3] = [Self::IX, Self::X, Self::V];
    pub const ALL: [Setting; 11] = [
        Self::Base,
        Self::I,
        Self::II,
        Self::III,
        Self::IV,
        Self::V,
        Self::VI,
        Self::VII,
        Self::VIII,
        Self::IX,
        Self::X,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "Base",
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
            Self::V => "V",
            Self::VI => "VI",
            Self::VII => "VII",
            Self::VIII => "VIII",
            Self::IX => "IX",
            Self::X => "X",
        }
    }

    pub fn toggles(self) -> Toggles {
        let t = |ibr, dw_p, dw_w, dc_in_p, dc_in_w| Toggles {
            ibr,
            dw_p,
            dw_w,
            dc_in_p,
            dc_in_w,
        };
        match self {
            Self::Base => t(false, false, false, true, true),
            Self::I => t(true, false, false, true, true),
            Self::II => t(false, true, true, true, true),
            Self::III => t(true, true, false, true, true),
            Self::IV => t(true, false, true, true, true),
            Self::V | Self::IX | Self::X => t(true, true, true, true, true),
            Self::VI => t(true, true, true, false, false),
            Self::VII => t(true, true, true, true, false),
            Self::VIII => t(true, true, true, false, true),
        }
    }

    /// Settings without the prototype branch are read off the weight CAM.
    pub fn inference(self) -> Inference {
        match self {
            Self::Base | Self::I | Self::IX => Inference::Weight,
            Self::X => Inference::Prototype,
            _ => Inference::Final,
        }
    }

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let t = self.toggles();
        TrainConfig {
            use_ibr: t.ibr,
            use_dw_p: t.dw_p,
            use_dw_w: t.dw_w,
            dc_in_p: t.dc_in_p,
            dc_in_w: t.dc_in_w,
            ..base.clone()
        }
    }
}

/// Decoded pseudo-masks for every scene of the dataset.
pub fn pseudo_masks(
    state: &ClassifierState,
    dataset: &Dataset,
    inference: Inference,
    use_pcm: bool,
) -> Result<Vec<LabelMap>> {
    dataset
        .scenes
        .par_iter()
        .map(|scene| {
            let w = classifier_weight_cam(state, scene, use_pcm)?;
            let stack = match inference {
                Inference::Weight => w,
                _ => {
                    let protos = extract_prototypes(state, scene, &w)?;
                    let p = prototype_cam(state, scene, &protos)?;
                    if inference == Inference::Prototype {
                        p
                    } else {
                        final_cam(&w, &p)?
                    }
                }
            };
            Ok(decode_mask(&stack))
        })
        .collect()
}

pub fn evaluate(
    state: &ClassifierState,
    dataset: &Dataset,
    inference: Inference,
    use_pcm: bool,
) -> Result<IoUReport> {
    let pred = pseudo_masks(state, dataset, inference, use_pcm)?;
    let gt: Vec<LabelMap> = dataset.scenes.iter().map(|s| s.gt_mask.clone()).collect();
    miou(&pred, &gt, dataset.class_count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub seed: u64,
    pub toggles: Toggles,
    pub inference: Inference,
    pub report: IoUReport,
}

impl AblationRow {
    pub fn miou(&self) -> f64 {
        self.report.miou
    }
}

/// World for one seed: the generator seed is replaced and the basis is drawn
/// from the same seed.
pub fn world_for_seed(spec: &LongTailSpec, depth: usize, seed: u64) -> Result<Dataset> {
    let spec = LongTailSpec {
        seed,
        ..spec.clone()
    };
    let basis = make_basis(spec.class_count, depth, seed)?;
    generate(&spec, &basis)
}

/// Trains each distinct toggle set once per seed and evaluates every
/// requested setting on the training scenes. Rows come out seed-major in
/// the order of `settings`.
pub fn run_ablation(
    spec: &LongTailSpec,
    depth: usize,
    base: &TrainConfig,
    seeds: &[u64],
    settings: &[Setting],
) -> Result<Vec<AblationRow>> {
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let dataset = world_for_seed(spec, depth, seed)?;
            let mut models: BTreeMap<Toggles, ClassifierState> = BTreeMap::new();
            let mut rows = Vec::with_capacity(settings.len());
            for &setting in settings {
                let toggles = setting.toggles();
                let model = match models.entry(toggles) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => {
                        let cfg = TrainConfig {
                            seed,
                            ..setting.config(base)
                        };
                        e.insert(train(&dataset, &cfg)?.0)
                    }
                };
                let report = evaluate(model, &dataset, setting.inference(), base.use_pcm)?;
                rows.push(AblationRow {
                    setting,
                    seed,
                    toggles,
                    inference: setting.inference(),
                    report,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Median mIoU of each setting over its rows.
pub fn median_miou(rows: &[AblationRow], setting: Setting) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.setting == setting).map(AblationRow::miou).collect();
    median(&mut v)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// One row per setting and seed with all toggles as columns.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting,seed,ibr,dw_p,dw_w,dc_in_p,dc_in_w,inference,miou\n");
    for r in rows {
        let t = r.toggles;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:?},{:.6}",
            r.setting.name(),
            r.seed,
            t.ibr as u8,
            t.dw_p as u8,
            t.dw_w as u8,
            t.dc_in_p as u8,
            t.dc_in_w as u8,
            r.inference,
            r.miou()
        )
        .expect("write to String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_table_shape() {
        assert_eq!(Setting::COMPONENTS.len(), 6);
        assert_eq!(Setting::V.toggles(), Setting::IX.toggles());
        assert_eq!(Setting::Base.inference(), Inference::Weight);
        assert_eq!(Setting::X.inference(), Inference::Prototype);
        let cfg = Setting::Base.config(&TrainConfig::default());
        assert!(!cfg.use_ibr && !cfg.use_dw_p && !cfg.use_dw_w);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
