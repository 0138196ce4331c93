//! Nested concentric crops on a feature map and the ordered pairs they form.
//!
//! Boxes are indexed so that `v_0` is the smallest crop and `v_M` is the whole
//! map; every pair `(m, n)` with `m < n` has `v_m` inside `v_n`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_SIDE: usize = 2;
/// The center is drawn from a window of `1/CENTER_WINDOW_DIVISOR` of each side.
pub const CENTER_WINDOW_DIVISOR: usize = 8;

/// Axis-aligned box in level-local cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &CropBox) -> bool {
        other.top >= self.top
            && other.left >= self.left
            && other.bottom() <= self.bottom()
            && other.right() <= self.right()
    }

    pub fn intersection(&self, other: &CropBox) -> Option<CropBox> {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = self.bottom().min(other.bottom());
        let right = self.right().min(other.right());
        (bottom > top && right > left).then(|| CropBox {
            top,
            left,
            height: bottom - top,
            width: right - left,
        })
    }

    /// Smallest box covering both.
    pub fn union_hull(&self, other: &CropBox) -> CropBox {
        let top = self.top.min(other.top);
        let left = self.left.min(other.left);
        CropBox {
            top,
            left,
            height: self.bottom().max(other.bottom()) - top,
            width: self.right().max(other.right()) - left,
        }
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.bottom() <= height && self.right() <= width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Concentric crops `v_0 ⊆ v_1 ⊆ … ⊆ v_M` of one feature level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedPatchSet {
    pub boxes: Vec<CropBox>,
    pub level_shape: LevelShape,
    pub center: (usize, usize),
}

impl NestedPatchSet {
    /// Number of cropped patches `M` (the set holds `M + 1` boxes).
    pub fn crops(&self) -> usize {
        self.boxes.len() - 1
    }

    pub fn check_invariants(&self, ratio: f64, min_side: usize) -> Result<()> {
        let LevelShape { height, width, .. } = self.level_shape;
        let last = self
            .boxes
            .last()
            .ok_or_else(|| Error::InvalidRegion("empty patch set".into()))?;
        if *last != CropBox::full(height, width) {
            return Err(Error::InvalidRegion(format!(
                "largest box {last:?} does not cover the {height}x{width} map"
            )));
        }
        for (m, pair) in self.boxes.windows(2).enumerate() {
            let (small, large) = (pair[0], pair[1]);
            if small.height == 0 || small.width == 0 || !small.fits_in(height, width) {
                return Err(Error::InvalidRegion(format!("box {m} is degenerate: {small:?}")));
            }
            if !large.contains(&small) {
                return Err(Error::InvalidRegion(format!(
                    "box {m} {small:?} escapes box {} {large:?}",
                    m + 1
                )));
            }
            let want = (
                shrink_side(large.height, ratio, min_side),
                shrink_side(large.width, ratio, min_side),
            );
            if (small.height, small.width) != want {
                return Err(Error::InvalidRegion(format!(
                    "box {m} has sides {}x{}, expected {}x{}",
                    small.height, small.width, want.0, want.1
                )));
            }
        }
        Ok(())
    }
}

/// Ordered pairs `(small, large)` of patch indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl RankPairSet {
    /// All 2-subsets of `{0..=crops}` in ascending lexicographic order.
    pub fn for_crops(crops: usize) -> Self {
        let pairs = (0..crops)
            .flat_map(|m| (m + 1..=crops).map(move |n| (m, n)))
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `crops x pairs` matrix with +1 at the small patch and -1 at the large
    /// one, so `counts · A` yields `count_small - count_large` per pair.
    pub fn difference_matrix(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let patches = self.pairs.iter().map(|&(_, n)| n + 1).max().unwrap_or(0);
        let cols = self.pairs.len();
        let mut a = vec![0f64; patches * cols];
        for (p, &(m, n)) in self.pairs.iter().enumerate() {
            a[m * cols + p] = 1.0;
            a[n * cols + p] = -1.0;
        }
        Ok(Tensor::from_vec(a, (patches, cols), device)?.to_dtype(dtype)?)
    }
}

/// Relative center location inside the sampling window, in `[0, 1)` per axis.
///
/// Sampling once and mapping to every level keeps all levels centered on the
/// same spatial neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDraw {
    pub row: f64,
    pub col: f64,
}

impl CenterDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            row: rng.random::<f64>(),
            col: rng.random::<f64>(),
        }
    }

    /// Maps the draw to an integer cell of a `height x width` level. The cell
    /// is uniform over the `⌈H/8⌉ x ⌈W/8⌉` window around `(H/2, W/2)`.
    pub fn locate(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height < CENTER_WINDOW_DIVISOR || width < CENTER_WINDOW_DIVISOR {
            return Err(Error::LevelTooSmall { height, width });
        }
        Ok((
            window_cell(height, self.row),
            window_cell(width, self.col),
        ))
    }
}

fn window_cell(len: usize, u: f64) -> usize {
    let half = len.div_ceil(CENTER_WINDOW_DIVISOR) / 2;
    let lo = len / 2 - half;
    let span = 2 * half + 1;
    let offset = ((u * span as f64).floor() as usize).min(span - 1);
    lo + offset
}

/// Draws a crop center for one level.
pub fn sample_center<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    CenterDraw::sample(rng).locate(height, width)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn shrink_side(side: usize, ratio: f64, min_side: usize) -> usize {
    round_half_up(ratio * side as f64).max(min_side).min(side)
}

/// Builds `v_M = F` and `M` concentric crops, each side shrunk by `ratio`
/// from its parent (round-half-up, never below `min_side`). Children are
/// clamped into their parent so nesting survives centers near the border.
pub fn generate_nested_boxes(
    level_shape: LevelShape,
    center: (usize, usize),
    crops: usize,
    ratio: f64,
    min_side: usize,
) -> Result<NestedPatchSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "crop ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if crops == 0 {
        return Err(Error::InvalidParameter("need at least one crop (M >= 1)".into()));
    }
    if min_side == 0 {
        return Err(Error::InvalidParameter("minimum side must be >= 1".into()));
    }
    let LevelShape { height, width, .. } = level_shape;
    if height == 0 || width == 0 || center.0 >= height || center.1 >= width {
        return Err(Error::InvalidParameter(format!(
            "center {center:?} is not inside the {height}x{width} level"
        )));
    }

    let mut boxes = vec![CropBox::full(height, width)];
    for _ in 0..crops {
        let parent = *boxes.last().unwrap();
        let h = shrink_side(parent.height, ratio, min_side);
        let w = shrink_side(parent.width, ratio, min_side);
        let top = (center.0 as isize - (h / 2) as isize)
            .clamp(parent.top as isize, (parent.bottom() - h) as isize) as usize;
        let left = (center.1 as isize - (w / 2) as isize)
            .clamp(parent.left as isize, (parent.right() - w) as isize) as usize;
        boxes.push(CropBox {
            top,
            left,
            height: h,
            width: w,
        });
    }
    boxes.reverse();
    Ok(NestedPatchSet {
        boxes,
        level_shape,
        center,
    })
}

/// Every pair `(m, n)`, `m < n`, of the set; nesting is re-checked against the
/// defining predicate (`v_m ∩ v_n = v_m` and `v_m ∪ v_n = v_n`).
pub fn build_pair_set(patches: &NestedPatchSet) -> Result<RankPairSet> {
    let set = RankPairSet::for_crops(patches.crops());
    for &(m, n) in &set.pairs {
        let (small, large) = (patches.boxes[m], patches.boxes[n]);
        let nested = small.intersection(&large) == Some(small) && small.union_hull(&large) == large;
        if !nested {
            return Err(Error::InvalidRegion(format!(
                "patch {m} {small:?} is not nested in patch {n} {large:?}"
            )));
        }
    }
    Ok(set)
}

/// Cumulative stride and receptive-field size of one feature level with
/// respect to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub stride: usize,
    pub receptive_field: usize,
}

impl LevelGeometry {
    /// Input-space region seen by the cells of `region`: scale by the stride,
    /// grow by half the receptive field, clamp to the image.
    pub fn to_input_space(&self, region: &CropBox, input_height: usize, input_width: usize) -> CropBox {
        let radius = self.receptive_field / 2;
        let top = (region.top * self.stride).saturating_sub(radius).min(input_height);
        let left = (region.left * self.stride).saturating_sub(radius).min(input_width);
        let bottom = (region.bottom() * self.stride + radius).min(input_height);
        let right = (region.right() * self.stride + radius).min(input_width);
        CropBox {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }
}

/// `out_len x in_len` bilinear interpolation matrix (half-pixel centers, edge
/// clamping). Equal lengths give the identity.
pub fn resize_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut mat = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        mat[i * in_len + i0] += 1.0 - frac;
        if frac > 0.0 {
            mat[i * in_len + i1] += frac;
        }
    }
    mat
}

/// Crops `region` out of the last two dims of `feature` and bilinearly
/// resizes it to `(out_height, out_width)`, channel by channel.
pub fn crop_and_resize_to(
    feature: &Tensor,
    region: &CropBox,
    out_height: usize,
    out_width: usize,
) -> Result<Tensor> {
    let rank = feature.rank();
    if rank < 2 {
        return Err(Error::InvalidInput(format!(
            "feature must have at least 2 dims, got {rank}"
        )));
    }
    let (height, width) = (feature.dim(rank - 2)?, feature.dim(rank - 1)?);
    if region.height == 0 || region.width == 0 || !region.fits_in(height, width) {
        return Err(Error::InvalidRegion(format!(
            "box {region:?} is not inside the {height}x{width} feature"
        )));
    }
    let crop = feature
        .narrow(rank - 2, region.top, region.height)?
        .narrow(rank - 1, region.left, region.width)?;
    let (dtype, device) = (feature.dtype(), feature.device());
    let rows = if out_height == region.height {
        crop
    } else {
        let rh = Tensor::from_vec(resize_matrix(out_height, region.height), (out_height, region.height), device)?
            .to_dtype(dtype)?;
        rh.broadcast_matmul(&crop)?
    };
    let out = if out_width == region.width {
        rows
    } else {
        let rwt = Tensor::from_vec(resize_matrix(out_width, region.width), (out_width, region.width), device)?
            .to_dtype(dtype)?
            .t()?;
        rows.broadcast_matmul(&rwt)?
    };
    Ok(out)
}

/// [`crop_and_resize_to`] back to the feature's own spatial size.
pub fn crop_and_resize(feature: &Tensor, region: &CropBox) -> Result<Tensor> {
    let rank = feature.rank();
    if rank < 2 {
        return Err(Error::InvalidInput("feature must have at least 2 dims".into()));
    }
    let (h, w) = (feature.dim(rank - 2)?, feature.dim(rank - 1)?);
    crop_and_resize_to(feature, region, h, w)
}

/// Stacks the resized patches `v_0..=v_M` of a `C x H x W` level into an
/// `(M+1) x C x H x W` batch.
pub fn nested_patch_batch(level: &Tensor, patches: &NestedPatchSet) -> Result<Tensor> {
    let resized = patches
        .boxes
        .iter()
        .map(|b| crop_and_resize(level, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&resized, 0)?)
}
