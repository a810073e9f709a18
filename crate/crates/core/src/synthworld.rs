//! Synthetic long-tailed scenes with a known feature decomposition.
//!
//! Every foreground pixel of class `c` carries `alpha * f_c + eta * f_0 + noise`
//! over an orthonormal basis, so weight and activation decompositions can be
//! read off exactly by projection.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::numerics::{dot, FeatureMap, LabelMap, ScalarMap};

/// 1-based foreground class id; `0` is reserved for background.
pub type ClassId = usize;

const BASIS_STREAM: u64 = 1;
const SCENE_STREAM: u64 = 2;

/// Orthonormal class features `f_1..f_C` plus the shared feature `f_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub depth: usize,
    pub class_features: Vec<Vec<f64>>,
    pub shared_feature: Vec<f64>,
}

impl FeatureBasis {
    pub fn class_count(&self) -> usize {
        self.class_features.len()
    }

    pub fn class_feature(&self, class: ClassId) -> &[f64] {
        &self.class_features[class - 1]
    }

    /// All basis vectors, class features first and `f_0` last.
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.class_features
            .iter()
            .map(Vec::as_slice)
            .chain(std::iter::once(self.shared_feature.as_slice()))
    }

    /// Largest absolute deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let vs: Vec<&[f64]> = self.vectors().collect();
        let mut worst = 0.0f64;
        for (i, a) in vs.iter().enumerate() {
            for (j, b) in vs.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }
}

/// Random orthonormal basis: Gram-Schmidt on Gaussian vectors, which is a
/// uniformly random rotation of the canonical axes.
pub fn make_basis(class_count: usize, depth: usize, seed: u64) -> Result<FeatureBasis> {
    let required = class_count + 1;
    if class_count == 0 || depth < required {
        return Err(Error::DepthTooSmall { depth, required });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BASIS_STREAM);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(required);
    while vectors.len() < required {
        let mut v: Vec<f64> = (0..depth).map(|_| rng.sample(StandardNormal)).collect();
        // two passes keep the residual orthogonal to working precision
        for _ in 0..2 {
            for u in &vectors {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        vectors.push(v);
    }
    let shared_feature = vectors.pop().expect("required >= 2");
    Ok(FeatureBasis {
        depth,
        class_features: vectors,
        shared_feature,
    })
}

/// Generator parameters for one long-tailed world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub class_count: usize,
    /// Number of scenes containing each class.
    pub counts: Vec<usize>,
    pub mean_alpha: Vec<f64>,
    pub mean_eta: Vec<f64>,
    /// Per-pixel standard deviation around `mean_alpha` / `mean_eta`.
    pub jitter: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Object area as a fraction of the image, drawn uniformly.
    pub fg_area_range: (f64, f64),
    pub seed: u64,
    /// Target fraction of tail-class scenes that also hold the head class.
    #[serde(default = "default_co_occurrence")]
    pub co_occurrence: f64,
    /// Average number of objects per scene; sets how many scenes are drawn.
    #[serde(default = "default_objects_per_scene")]
    pub objects_per_scene: f64,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Amplitude of a per-scene background direction drawn from the
    /// orthogonal complement of the basis; `0` leaves background as noise.
    #[serde(default)]
    pub background_texture: f64,
}

fn default_co_occurrence() -> f64 {
    0.5
}

fn default_objects_per_scene() -> f64 {
    2.0
}

fn default_max_objects() -> usize {
    3
}

fn default_noise_std() -> f64 {
    0.01
}

/// Texture amplitude used by the constructors.
pub const DEFAULT_BACKGROUND_TEXTURE: f64 = 0.3;

/// `n_c` decaying geometrically from `max_count` (class 1) to `min_count`.
pub fn geometric_counts(class_count: usize, max_count: usize, min_count: usize) -> Vec<usize> {
    if class_count == 1 {
        return vec![max_count];
    }
    let ratio = min_count as f64 / max_count as f64;
    (0..class_count)
        .map(|i| {
            let t = i as f64 / (class_count - 1) as f64;
            ((max_count as f64 * ratio.powf(t)).round() as usize).max(1)
        })
        .collect()
}

impl LongTailSpec {
    /// Spec with uniform composition means and the library defaults for the
    /// remaining knobs.
    pub fn with_counts(counts: Vec<usize>, seed: u64) -> Self {
        let class_count = counts.len();
        Self {
            class_count,
            counts,
            mean_alpha: vec![0.6; class_count],
            mean_eta: vec![0.3; class_count],
            jitter: 0.15,
            image_h: 24,
            image_w: 24,
            fg_area_range: (0.08, 0.16),
            seed,
            co_occurrence: default_co_occurrence(),
            objects_per_scene: default_objects_per_scene(),
            max_objects: default_max_objects(),
            noise_std: default_noise_std(),
            background_texture: DEFAULT_BACKGROUND_TEXTURE,
        }
    }

    /// Six classes, counts geometric from 200 down to 10.
    pub fn default_long_tail(seed: u64) -> Self {
        Self::with_counts(geometric_counts(6, 200, 10), seed)
    }

    /// Six classes with 100 scenes each.
    pub fn balanced(seed: u64) -> Self {
        Self::with_counts(vec![100; 6], seed)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if c == 0 {
            return bad("class_count must be positive".into());
        }
        for (name, len) in [
            ("counts", self.counts.len()),
            ("mean_alpha", self.mean_alpha.len()),
            ("mean_eta", self.mean_eta.len()),
        ] {
            if len != c {
                return bad(format!("{name} has {len} entries for {c} classes"));
            }
        }
        if self.counts.contains(&0) {
            return bad("every class count must be >= 1".into());
        }
        for k in 0..c {
            let (a, e) = (self.mean_alpha[k], self.mean_eta[k]);
            if !(a > 0.0 && a <= 1.0) || !(0.0..1.0).contains(&e) || a + e > 1.0 + 1e-12 {
                return bad(format!("class {}: mean_alpha {a}, mean_eta {e}", k + 1));
            }
        }
        let (lo, hi) = self.fg_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("fg_area_range ({lo}, {hi}) must lie in (0, 1)"));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return bad("image dims must be positive".into());
        }
        if !(self.background_texture >= 0.0 && self.background_texture.is_finite()) {
            return bad(format!("background_texture {} must be >= 0", self.background_texture));
        }
        if !(self.jitter >= 0.0 && self.noise_std >= 0.0) {
            return bad("jitter and noise_std must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return bad(format!("co_occurrence {} not in [0, 1]", self.co_occurrence));
        }
        if self.max_objects == 0 || self.objects_per_scene.is_nan() || self.objects_per_scene < 1.0 {
            return bad("objects_per_scene must be >= 1 and max_objects >= 1".into());
        }
        Ok(())
    }
}

/// Count-tercile class sets, used for co-occurrence and class-set gains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassSet {
    Many,
    Medium,
    Few,
}

/// Assigns each class to a count tercile. A class's rank is the number of
/// classes with a strictly larger count, so ties land in the same set and
/// the assignment does not depend on class order.
pub fn count_terciles(counts: &[usize]) -> Vec<ClassSet> {
    let n = counts.len();
    counts
        .iter()
        .map(|&c| {
            let rank = counts.iter().filter(|&&o| o > c).count();
            match 3 * rank / n.max(1) {
                0 => ClassSet::Many,
                1 => ClassSet::Medium,
                _ => ClassSet::Few,
            }
        })
        .collect()
}

/// One image-like sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub features: FeatureMap,
    pub gt_mask: LabelMap,
    /// Sorted, deduplicated class ids.
    pub present_classes: Vec<ClassId>,
    /// Per-pixel `(alpha, eta)`; `(0, 0)` on background.
    pub composition: Vec<(f64, f64)>,
}

impl SyntheticScene {
    /// Scene with the given features and image-level classes but no
    /// ground-truth layout (all background, zero composition).
    pub fn from_features(features: FeatureMap, mut present_classes: Vec<ClassId>) -> Self {
        present_classes.sort_unstable();
        present_classes.dedup();
        let (h, w) = (features.height(), features.width());
        Self {
            features,
            gt_mask: LabelMap::background(h, w),
            present_classes,
            composition: vec![(0.0, 0.0); h * w],
        }
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.present_classes.binary_search(&class).is_ok()
    }

    pub fn labels(&self, class_count: usize) -> Vec<bool> {
        (1..=class_count).map(|c| self.contains(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    /// Multi-hot labels, one row per scene.
    pub label_matrix: Vec<Vec<bool>>,
    pub basis: FeatureBasis,
    pub spec: LongTailSpec,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

pub fn class_counts(dataset: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; dataset.class_count()];
    for row in &dataset.label_matrix {
        for (n, &y) in counts.iter_mut().zip(row) {
            *n += y as usize;
        }
    }
    counts
}

pub fn avg_classes_per_image(dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let total: usize = dataset
        .label_matrix
        .iter()
        .map(|row| row.iter().filter(|&&y| y).count())
        .sum();
    total as f64 / dataset.len() as f64
}

/// Index of the largest-count class (lowest id on ties).
pub fn head_class(counts: &[usize]) -> ClassId {
    let mut best = 0;
    for (k, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = k;
        }
    }
    best + 1
}

/// Index of the smallest-count class (highest id on ties).
pub fn tail_class(counts: &[usize]) -> ClassId {
    let mut best = 0;
    for (k, &n) in counts.iter().enumerate() {
        if n <= counts[best] {
            best = k;
        }
    }
    best + 1
}

/// Decides which classes each scene holds.
///
/// Scene count is `max(max n_c, ceil(sum n_c / objects_per_scene))`. Scene
/// sizes start at one object and grow at random up to `max_objects`. Classes
/// are then placed largest-count first into the scenes with the most free
/// slots (random tie-break), which realizes any feasible count vector
/// exactly. Few-set classes split their scenes between those holding the
/// head class and those without it according to `co_occurrence`.
fn plan_scene_classes(spec: &LongTailSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ClassId>>> {
    let total: usize = spec.counts.iter().sum();
    let max_count = *spec.counts.iter().max().expect("validated");
    let n_scenes = max_count.max((total as f64 / spec.objects_per_scene).ceil() as usize);
    let max_objects = spec.max_objects.min(spec.class_count);
    if total > n_scenes * max_objects {
        return Err(Error::InfeasibleSpec(format!(
            "{total} objects do not fit {n_scenes} scenes of at most {max_objects} objects"
        )));
    }
    let mut last = None;
    for _ in 0..PLAN_ATTEMPTS {
        match try_plan(spec, n_scenes, total, max_objects, rng) {
            Ok(scenes) => return Ok(scenes),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

const PLAN_ATTEMPTS: usize = 32;

fn try_plan(
    spec: &LongTailSpec,
    n_scenes: usize,
    total: usize,
    max_objects: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<ClassId>>> {
    let mut capacity = vec![1usize; n_scenes];
    let mut extra = total - n_scenes;
    let mut open: Vec<usize> = (0..n_scenes).collect();
    while extra > 0 {
        let pick = rng.gen_range(0..open.len());
        let s = open[pick];
        capacity[s] += 1;
        if capacity[s] == max_objects {
            open.swap_remove(pick);
        }
        extra -= 1;
    }

    let head = head_class(&spec.counts);
    let sets = count_terciles(&spec.counts);
    let mut order: Vec<ClassId> = (1..=spec.class_count).collect();
    order.sort_by(|&a, &b| spec.counts[b - 1].cmp(&spec.counts[a - 1]).then(a.cmp(&b)));

    let mut scenes: Vec<Vec<ClassId>> = vec![Vec::new(); n_scenes];
    for &class in &order {
        let need = spec.counts[class - 1];
        let mut cands: Vec<(usize, u64)> = (0..n_scenes)
            .filter(|&s| capacity[s] > scenes[s].len())
            .map(|s| (s, rng.gen()))
            .collect();
        if cands.len() < need {
            return Err(Error::InfeasibleSpec(format!(
                "class {class} needs {need} scenes but only {} have room",
                cands.len()
            )));
        }
        let free = |s: usize| capacity[s] - scenes[s].len();
        cands.sort_by(|a, b| free(b.0).cmp(&free(a.0)).then(a.1.cmp(&b.1)));

        let chosen: Vec<usize> = if class != head && sets[class - 1] == ClassSet::Few {
            let (with, without): (Vec<usize>, Vec<usize>) = cands
                .iter()
                .map(|c| c.0)
                .partition(|&s| scenes[s].contains(&head));
            let want_with = ((spec.co_occurrence * need as f64).round() as usize)
                .clamp(need.saturating_sub(without.len()), with.len().min(need));
            with.iter()
                .take(want_with)
                .chain(without.iter().take(need - want_with))
                .copied()
                .collect()
        } else {
            cands.iter().take(need).map(|c| c.0).collect()
        };
        for s in chosen {
            scenes[s].push(class);
        }
    }
    // a scene can end up below its planned size when the co-occurrence split
    // skipped it; drop any that stayed empty
    scenes.retain(|s| !s.is_empty());
    for s in &mut scenes {
        s.sort_unstable();
    }
    scenes.shuffle(rng);
    Ok(scenes)
}

/// Axis-aligned rectangle covering roughly `pixels` cells at a free spot.
fn place_rectangle(
    occupied: &[bool],
    h: usize,
    w: usize,
    pixels: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..8 {
        let aspect: f64 = (rng.gen_range(-1.0f64..=1.0) * std::f64::consts::LN_2).exp();
        let rh = ((pixels as f64 * aspect).sqrt().round() as usize).clamp(1, h);
        let rw = ((pixels as f64 / rh as f64).round() as usize).clamp(1, w);
        let mut spots = Vec::new();
        for y in 0..=(h - rh) {
            for x in 0..=(w - rw) {
                let free = (y..y + rh).all(|yy| (x..x + rw).all(|xx| !occupied[yy * w + xx]));
                if free {
                    spots.push((y, x));
                }
            }
        }
        if let Some(&(y, x)) = spots.get(rng.gen_range(0..spots.len().max(1))) {
            return Some((y, x, rh, rw));
        }
    }
    None
}

/// Random unit vector orthogonal to every basis vector.
fn complement_direction(basis: &FeatureBasis, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..basis.depth).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in basis.vectors() {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            return v;
        }
    }
}

/// Draws a dataset whose realized class counts equal `spec.counts` exactly.
/// Object pixels mix their class feature with the shared feature; background
/// pixels carry a per-scene texture direction outside the basis.
pub fn generate(spec: &LongTailSpec, basis: &FeatureBasis) -> Result<Dataset> {
    spec.validate()?;
    if basis.class_count() != spec.class_count {
        return Err(Error::DimMismatch {
            expected: spec.class_count,
            actual: basis.class_count(),
        });
    }
    if spec.background_texture > 0.0 && basis.depth < spec.class_count + 2 {
        return Err(Error::DepthTooSmall {
            depth: basis.depth,
            required: spec.class_count + 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SCENE_STREAM);
    let plan = plan_scene_classes(spec, &mut rng)?;

    let (h, w, d) = (spec.image_h, spec.image_w, basis.depth);
    let npix = h * w;
    let mut scenes = Vec::with_capacity(plan.len());
    for classes in plan {
        let mut occupied = vec![false; npix];
        let mut gt = vec![0u16; npix];
        let mut order = classes.clone();
        order.shuffle(&mut rng);
        for &class in &order {
            let (lo, hi) = spec.fg_area_range;
            let frac = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let pixels = ((frac * npix as f64).round() as usize).max(1);
            let (y0, x0, rh, rw) =
                place_rectangle(&occupied, h, w, pixels, &mut rng).ok_or_else(|| {
                    Error::InfeasibleSpec(format!(
                        "cannot place a {pixels}-pixel object for class {class} in a {h}x{w} scene"
                    ))
                })?;
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    occupied[y * w + x] = true;
                    gt[y * w + x] = class as u16;
                }
            }
        }

        let texture = if spec.background_texture > 0.0 {
            complement_direction(basis, &mut rng)
                .into_iter()
                .map(|v| v * spec.background_texture)
                .collect()
        } else {
            vec![0.0; d]
        };
        let mut data = vec![0.0; npix * d];
        let mut composition = vec![(0.0, 0.0); npix];
        for p in 0..npix {
            let px = &mut data[p * d..(p + 1) * d];
            let class = gt[p] as usize;
            if class == 0 {
                px.copy_from_slice(&texture);
            } else {
                let (ma, me) = (spec.mean_alpha[class - 1], spec.mean_eta[class - 1]);
                let na: f64 = rng.sample(StandardNormal);
                let ne: f64 = rng.sample(StandardNormal);
                let alpha = (ma + spec.jitter * na).clamp(0.0, 1.0);
                let eta = (me + spec.jitter * ne).clamp(0.0, 1.0 - alpha);
                let fc = basis.class_feature(class);
                for k in 0..d {
                    px[k] = alpha * fc[k] + eta * basis.shared_feature[k];
                }
                composition[p] = (alpha, eta);
            }
            if spec.noise_std > 0.0 {
                for v in px.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise_std * n;
                }
            }
        }
        scenes.push(SyntheticScene {
            features: FeatureMap::new(h, w, d, data)?,
            gt_mask: LabelMap::new(h, w, gt)?,
            present_classes: classes,
            composition,
        });
    }

    let label_matrix = scenes.iter().map(|s| s.labels(spec.class_count)).collect();
    Ok(Dataset {
        scenes,
        label_matrix,
        basis: basis.clone(),
        spec: spec.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: LongTailSpec,
    seed: u64,
    basis: FeatureBasis,
    label_matrix: Vec<Vec<bool>>,
    scenes: Vec<SceneEntry>,
}

#[derive(Serialize, Deserialize)]
struct SceneEntry {
    features: String,
    mask: String,
    alpha: String,
    eta: String,
    present_classes: Vec<ClassId>,
}

const MANIFEST: &str = "manifest.json";

/// Writes `manifest.json` plus per-scene binary feature maps, composition
/// maps and PGM ground-truth masks.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = dataset.class_count();
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let entry = SceneEntry {
            features: format!("scene_{i:05}.fmap"),
            mask: format!("scene_{i:05}_gt.pgm"),
            alpha: format!("scene_{i:05}_alpha.smap"),
            eta: format!("scene_{i:05}_eta.smap"),
            present_classes: scene.present_classes.clone(),
        };
        let mut f = BufWriter::new(File::create(dir.join(&entry.features))?);
        codec::write_feature_map(&mut f, &scene.features)?;
        let mut f = BufWriter::new(File::create(dir.join(&entry.mask))?);
        codec::labels_to_pgm(&mut f, &scene.gt_mask, c)?;
        let (h, w) = scene.gt_mask.shape();
        let alpha = ScalarMap::new(h, w, scene.composition.iter().map(|p| p.0).collect())?;
        let eta = ScalarMap::new(h, w, scene.composition.iter().map(|p| p.1).collect())?;
        codec::write_scalar_map(&mut BufWriter::new(File::create(dir.join(&entry.alpha))?), &alpha)?;
        codec::write_scalar_map(&mut BufWriter::new(File::create(dir.join(&entry.eta))?), &eta)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: 1,
        spec: dataset.spec.clone(),
        seed: dataset.spec.seed,
        basis: dataset.basis.clone(),
        label_matrix: dataset.label_matrix.clone(),
        scenes: entries,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(MANIFEST))?), &manifest)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let c = manifest.spec.class_count;
    let step = (255 / c.max(1)) as u16;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let features = codec::read_feature_map(&mut BufReader::new(File::open(
            dir.join(&entry.features),
        )?))?;
        let (h, w, px) = codec::read_pgm(&mut BufReader::new(File::open(dir.join(&entry.mask))?))?;
        let gt: Vec<u16> = px.iter().map(|&v| v as u16 / step).collect();
        let alpha =
            codec::read_scalar_map(&mut BufReader::new(File::open(dir.join(&entry.alpha))?))?;
        let eta = codec::read_scalar_map(&mut BufReader::new(File::open(dir.join(&entry.eta))?))?;
        scenes.push(SyntheticScene {
            features,
            gt_mask: LabelMap::new(h, w, gt)?,
            present_classes: entry.present_classes.clone(),
            composition: alpha.data().iter().copied().zip(eta.data().iter().copied()).collect(),
        });
    }
    let dataset = Dataset {
        scenes,
        label_matrix: manifest.label_matrix,
        basis: manifest.basis,
        spec: manifest.spec,
    };
    if dataset.label_matrix.len() != dataset.scenes.len() {
        return Err(Error::Format("label matrix and scene list differ in length".into()));
    }
    Ok(dataset)
}

/// Sorted set of class ids present in a label map.
pub fn classes_in(labels: &LabelMap) -> BTreeSet<ClassId> {
    labels
        .data()
        .iter()
        .filter(|&&v| v > 0)
        .map(|&v| v as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(counts: Vec<usize>, seed: u64) -> LongTailSpec {
        let mut spec = LongTailSpec::with_counts(counts, seed);
        spec.image_h = 16;
        spec.image_w = 16;
        spec
    }

    #[test]
    fn basis_is_orthonormal_and_deterministic() {
        let b = make_basis(2, 3, 7).unwrap();
        assert_eq!(b.vectors().count(), 3);
        assert!(b.orthonormality_error() < 1e-10);
        assert_eq!(b, make_basis(2, 3, 7).unwrap());
        assert_ne!(b, make_basis(2, 3, 8).unwrap());
        let big = make_basis(20, 64, 1).unwrap();
        assert!(big.orthonormality_error() < 1e-10);
    }

    #[test]
    fn basis_needs_room() {
        assert!(matches!(
            make_basis(3, 3, 0),
            Err(Error::DepthTooSmall {
                depth: 3,
                required: 4
            })
        ));
    }

    #[test]
    fn geometric_default_counts() {
        assert_eq!(geometric_counts(6, 200, 10), vec![200, 110, 60, 33, 18, 10]);
        assert_eq!(geometric_counts(1, 5, 5), vec![5]);
    }

    #[test]
    fn realized_counts_match_spec() {
        let spec = small_spec(vec![90, 10], 3);
        let basis = make_basis(2, 4, 3).unwrap();
        let ds = generate(&spec, &basis).unwrap();
        assert_eq!(class_counts(&ds), vec![90, 10]);
        for (row, scene) in ds.label_matrix.iter().zip(&ds.scenes) {
            assert_eq!(row, &scene.labels(2));
            for &c in &scene.present_classes {
                assert!(scene.gt_mask.count(c as u16) > 0);
            }
            assert!((1..=3).contains(&scene.present_classes.len()));
        }
    }

    #[test]
    fn zero_jitter_gives_exact_composition() {
        let mut spec = small_spec(vec![5, 4, 3], 11);
        spec.jitter = 0.0;
        spec.mean_alpha = vec![0.5, 0.6, 0.7];
        spec.mean_eta = vec![0.2, 0.3, 0.1];
        let ds = generate(&spec, &make_basis(3, 5, 1).unwrap()).unwrap();
        for s in &ds.scenes {
            for (p, &(a, e)) in s.composition.iter().enumerate() {
                let c = s.gt_mask.data()[p] as usize;
                if c == 0 {
                    assert_eq!((a, e), (0.0, 0.0));
                } else {
                    assert_eq!((a, e), (spec.mean_alpha[c - 1], spec.mean_eta[c - 1]));
                }
            }
        }
    }

    #[test]
    fn fixed_area_objects() {
        let mut spec = small_spec(vec![6, 6], 5);
        spec.image_h = 20;
        spec.image_w = 20;
        spec.fg_area_range = (0.1, 0.1);
        let ds = generate(&spec, &make_basis(2, 4, 5).unwrap()).unwrap();
        for s in &ds.scenes {
            for &c in &s.present_classes {
                let area = s.gt_mask.count(c as u16) as f64;
                // 40 target pixels; rectangle rounding moves it by at most a few
                assert!((area - 40.0).abs() <= 4.0, "area {area}");
            }
        }
    }

    #[test]
    fn infeasible_when_objects_cannot_fit() {
        let mut spec = small_spec(vec![3, 3, 3], 1);
        spec.image_h = 4;
        spec.image_w = 4;
        spec.fg_area_range = (0.6, 0.6);
        spec.objects_per_scene = 3.0;
        let err = generate(&spec, &make_basis(3, 5, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSpec(_)));
    }

    #[test]
    fn avg_classes_and_counts_helpers() {
        let mut spec = small_spec(vec![4], 2);
        spec.objects_per_scene = 1.0;
        let ds = generate(&spec, &make_basis(1, 3, 2).unwrap()).unwrap();
        assert_eq!(avg_classes_per_image(&ds), 1.0);
        assert_eq!(class_counts(&ds), vec![4]);
    }

    #[test]
    fn texture_needs_a_spare_dimension() {
        let spec = small_spec(vec![3, 3], 1);
        assert!(matches!(
            generate(&spec, &make_basis(2, 3, 1).unwrap()),
            Err(Error::DepthTooSmall { depth: 3, required: 4 })
        ));
        let mut flat = spec.clone();
        flat.background_texture = 0.0;
        assert!(generate(&flat, &make_basis(2, 3, 1).unwrap()).is_ok());
    }

    #[test]
    fn background_texture_lies_outside_the_basis() {
        let mut spec = small_spec(vec![4, 3], 9);
        spec.noise_std = 0.0;
        let basis = make_basis(2, 6, 9).unwrap();
        let ds = generate(&spec, &basis).unwrap();
        for s in &ds.scenes {
            let mut first: Option<Vec<f64>> = None;
            for (p, px) in s.features.pixels().enumerate() {
                if s.gt_mask.data()[p] != 0 {
                    continue;
                }
                let n = crate::numerics::norm(px);
                assert!((n - spec.background_texture).abs() < 1e-12);
                for v in basis.vectors() {
                    assert!(crate::numerics::dot(px, v).abs() < 1e-12);
                }
                // one direction per scene
                match &first {
                    None => first = Some(px.to_vec()),
                    Some(f) => assert_eq!(f.as_slice(), px),
                }
            }
        }

        spec.background_texture = 0.0;
        let ds = generate(&spec, &basis).unwrap();
        for s in &ds.scenes {
            for (p, px) in s.features.pixels().enumerate() {
                if s.gt_mask.data()[p] == 0 {
                    assert!(px.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn terciles_by_count() {
        use ClassSet::*;
        assert_eq!(count_terciles(&[30, 20, 10]), vec![Many, Medium, Few]);
        assert_eq!(count_terciles(&[10, 30, 20]), vec![Few, Many, Medium]);
        assert_eq!(
            count_terciles(&[200, 110, 60, 33, 18, 10]),
            vec![Many, Many, Medium, Medium, Few, Few]
        );
    }

    #[test]
    fn head_and_tail() {
        assert_eq!(head_class(&[5, 9, 9, 1]), 2);
        assert_eq!(tail_class(&[5, 1, 9, 1]), 4);
    }
}
