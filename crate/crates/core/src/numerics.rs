//! Dense map primitives: pooling, resampling, normalization and similarity.
//!
//! Everything is `f64`, row-major, and summed in a fixed order so results are
//! reproducible bit-for-bit across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x D` grid of feature vectors, row-major with depth innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidShape(format!(
                "feature map dims must be positive, got {height}x{width}x{depth}"
            )));
        }
        if data.len() != height * width * depth {
            return Err(Error::InvalidShape(format!(
                "expected {} values for {height}x{width}x{depth}, got {}",
                height * width * depth,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        assert!(height > 0 && width > 0 && depth > 0, "empty feature map");
        Self {
            height,
            width,
            depth,
            data: vec![0.0; height * width * depth],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        let depth = pixels.first().map_or(0, Vec::len);
        if pixels.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "expected {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| p.len() != depth) {
            return Err(Error::DimMismatch {
                expected: depth,
                actual: bad.len(),
            });
        }
        Self::new(height, width, depth, pixels.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.depth..(p + 1) * self.depth]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let d = self.depth;
        &mut self.data[p * d..(p + 1) * d]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.depth)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    /// Pixelwise dot product with `w`, giving the `F W_c` map.
    pub fn dot_map(&self, w: &[f64]) -> Result<ScalarMap> {
        if w.len() != self.depth {
            return Err(Error::DimMismatch {
                expected: self.depth,
                actual: w.len(),
            });
        }
        let data = self.pixels().map(|px| dot(px, w)).collect();
        Ok(ScalarMap {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// One spatial channel, `H x W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "scalar map dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty scalar map");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_shape(self.shape(), other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn threshold(&self, tau: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v >= tau).collect(),
        }
    }
}

/// A `{0,1}` spatial mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "mask {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn single(height: usize, width: usize, index: usize) -> Self {
        let mut data = vec![false; height * width];
        data[index] = true;
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_active(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel class ids; `0` is background, `1..=C` foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn mask_of(&self, class: u16) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Global average pooling: the per-channel spatial mean.
pub fn gap(map: &FeatureMap) -> Vec<f64> {
    let mut acc = vec![0.0; map.depth];
    for px in map.pixels() {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    let n = map.num_pixels() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean feature vector over the active pixels of `mask`.
pub fn masked_average_pool(map: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    ensure_same_shape((map.height, map.width), mask.shape())?;
    let mut acc = vec![0.0; map.depth];
    let mut count = 0usize;
    for (px, _) in map.pixels().zip(&mask.data).filter(|(_, &m)| m) {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Sampling taps for one output pixel of a bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    index: usize,
    weight: f64,
}

/// Precomputed bilinear sampling plan (half-pixel centers, border clamp).
///
/// The plan is a linear operator from the source grid to the destination
/// grid; [`ResizePlan::adjoint`] applies its transpose for backpropagation.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    src: (usize, usize),
    dst: (usize, usize),
    taps: Vec<[Tap; 4]>,
}

fn axis_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Self> {
        if src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0 {
            return Err(Error::InvalidShape(format!(
                "resize {src_h}x{src_w} -> {dst_h}x{dst_w}"
            )));
        }
        let ys = axis_taps(src_h, dst_h);
        let xs = axis_taps(src_w, dst_w);
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                taps.push([
                    Tap {
                        index: y0 * src_w + x0,
                        weight: (1.0 - ty) * (1.0 - tx),
                    },
                    Tap {
                        index: y0 * src_w + x1,
                        weight: (1.0 - ty) * tx,
                    },
                    Tap {
                        index: y1 * src_w + x0,
                        weight: ty * (1.0 - tx),
                    },
                    Tap {
                        index: y1 * src_w + x1,
                        weight: ty * tx,
                    },
                ]);
            }
        }
        Ok(Self {
            src: (src_h, src_w),
            dst: (dst_h, dst_w),
            taps,
        })
    }

    pub fn dst_shape(&self) -> (usize, usize) {
        self.dst
    }

    pub fn apply(&self, map: &ScalarMap) -> Result<ScalarMap> {
        ensure_same_shape(self.src, map.shape())?;
        let data = self
            .taps
            .iter()
            .map(|t| t.iter().map(|tap| tap.weight * map.data[tap.index]).sum())
            .collect();
        Ok(ScalarMap {
            height: self.dst.0,
            width: self.dst.1,
            data,
        })
    }

    pub fn apply_features(&self, map: &FeatureMap) -> Result<FeatureMap> {
        ensure_same_shape(self.src, (map.height, map.width))?;
        let d = map.depth;
        let mut data = vec![0.0; self.taps.len() * d];
        for (out, t) in data.chunks_exact_mut(d).zip(&self.taps) {
            for tap in t {
                for (o, v) in out.iter_mut().zip(map.pixel(tap.index)) {
                    *o += tap.weight * v;
                }
            }
        }
        Ok(FeatureMap {
            height: self.dst.0,
            width: self.dst.1,
            depth: d,
            data,
        })
    }

    /// Transpose of [`ResizePlan::apply`]: scatters a destination-grid
    /// gradient back onto the source grid.
    pub fn adjoint(&self, grad: &ScalarMap) -> Result<ScalarMap> {
        ensure_same_shape(self.dst, grad.shape())?;
        let mut data = vec![0.0; self.src.0 * self.src.1];
        for (g, t) in grad.data.iter().zip(&self.taps) {
            for tap in t {
                data[tap.index] += tap.weight * g;
            }
        }
        Ok(ScalarMap {
            height: self.src.0,
            width: self.src.1,
            data,
        })
    }
}

/// Maps that can be bilinearly resampled channel by channel.
pub trait Resample: Sized {
    fn bilinear_resize(&self, new_h: usize, new_w: usize) -> Result<Self>;
}

impl Resample for ScalarMap {
    fn bilinear_resize(&self, new_h: usize, new_w: usize) -> Result<Self> {
        ResizePlan::new(self.height, self.width, new_h, new_w)?.apply(self)
    }
}

impl Resample for FeatureMap {
    fn bilinear_resize(&self, new_h: usize, new_w: usize) -> Result<Self> {
        ResizePlan::new(self.height, self.width, new_h, new_w)?.apply_features(self)
    }
}

pub fn bilinear_resize<M: Resample>(map: &M, new_h: usize, new_w: usize) -> Result<M> {
    map.bilinear_resize(new_h, new_w)
}

pub fn relu(map: &ScalarMap) -> ScalarMap {
    map.map(|v| v.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `map / (max(map) + eps)` for a nonnegative map.
pub fn max_normalize(map: &ScalarMap, eps: f64) -> ScalarMap {
    let m = map.max().max(0.0);
    if m == 0.0 {
        return ScalarMap::zeros(map.height, map.width);
    }
    let denom = m + eps;
    map.map(|v| v / denom)
}

/// Backward pass of [`max_normalize`] given the input it was applied to.
///
/// The maximum is attributed to the first argmax pixel.
pub fn max_normalize_backward(input: &ScalarMap, eps: f64, grad_out: &ScalarMap) -> ScalarMap {
    let m = input.max();
    if m <= 0.0 {
        return ScalarMap::zeros(input.height, input.width);
    }
    let denom = m + eps;
    let mut grad = grad_out.map(|g| g / denom);
    let coupling: f64 = grad_out
        .data
        .iter()
        .zip(&input.data)
        .map(|(g, v)| g * v)
        .sum::<f64>()
        / (denom * denom);
    grad.data[input.argmax()] -= coupling;
    grad
}

/// Mean absolute difference over pixels.
pub fn l1_distance(a: &ScalarMap, b: &ScalarMap) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`l1_distance`] with respect to `a` (`sign(a - b) / n`).
pub fn l1_grad(a: &ScalarMap, b: &ScalarMap) -> Result<ScalarMap> {
    let n = a.len() as f64;
    a.zip_with(b, |x, y| {
        let d = x - y;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })
}
