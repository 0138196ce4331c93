//! Ground-truth density maps built from head annotations.
//!
//! Every head deposits one Gaussian kernel truncated at 4σ. Each kernel is
//! renormalized over the part of its support that falls inside the image, so
//! a map always integrates to exactly its head count (up to rounding), even
//! for heads touching the border.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::CropBox;

/// Kernel truncation radius in units of σ.
pub const TRUNCATE_SIGMAS: f64 = 4.0;
/// Fallback σ for heads without enough neighbours (and the fixed-kernel default).
pub const DEFAULT_SIGMA: f64 = 15.0;
pub const DEFAULT_ADAPTIVE_BETA: f64 = 0.3;
pub const DEFAULT_ADAPTIVE_K: usize = 3;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_HEADER_LEN: usize = 16;

/// Head annotations for one image, in pixel coordinates.
///
/// `x` runs along the width, `y` along the height. Pixel `(row, col)` covers
/// `[col, col + 1) x [row, row + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPointSet {
    points: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

impl HeadPointSet {
    pub fn new(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidAnnotation(format!(
                "image size {height}x{width} is empty"
            )));
        }
        for (i, &[x, y]) in points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x < width as f64
                && y < height as f64;
            if !inside {
                return Err(Error::InvalidAnnotation(format!(
                    "point {i} at ({x}, {y}) lies outside the {height}x{width} image"
                )));
            }
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(Vec::new(), height, width)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Non-negative grid whose sum is a person count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    /// Grid resolution divided by image resolution (1 for ground truth).
    cell_scale: f64,
    data: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cell_scale: 1.0,
            data: vec![0.0; height * width],
        }
    }

    /// Wraps a row-major grid. Rejects negative or non-finite cells.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "density grid of {} cells does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "density cells must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            cell_scale: 1.0,
            data,
        })
    }

    pub fn with_cell_scale(mut self, cell_scale: f64) -> Self {
        self.cell_scale = cell_scale;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_scale(&self) -> f64 {
        self.cell_scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Total mass, accumulated in f64.
    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn full_box(&self) -> CropBox {
        CropBox {
            top: 0,
            left: 0,
            height: self.height,
            width: self.width,
        }
    }

    /// Sum of the cells inside `region`. Zero-area boxes are allowed here and
    /// integrate to 0.
    pub fn integrate(&self, region: &CropBox) -> Result<f64> {
        if region.top + region.height > self.height || region.left + region.width > self.width {
            return Err(Error::InvalidRegion(format!(
                "box {region:?} exceeds the {}x{} grid",
                self.height, self.width
            )));
        }
        let mut total = 0.0f64;
        for row in region.top..region.top + region.height {
            let start = row * self.width + region.left;
            total += self.data[start..start + region.width]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        Ok(total)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// Serializes to the `DMAP` raster format: a 16-byte header (magic,
    /// u32 height, u32 width, u32 reserved = 0) followed by little-endian f32
    /// cells in row-major order.
    pub fn write_raster<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DMAP_MAGIC)?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_raster<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; DMAP_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::io("reading density header", e))?;
        if &header[0..4] != DMAP_MAGIC {
            return Err(Error::InvalidInput("missing DMAP magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, reserved) = (word(4), word(8), word(12));
        if reserved != 0 {
            return Err(Error::InvalidInput(format!(
                "reserved header field is {reserved}, expected 0"
            )));
        }
        let mut body = vec![0u8; height * width * 4];
        input
            .read_exact(&mut body)
            .map_err(|e| Error::io("reading density cells", e))?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(height, width, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_raster(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_raster(std::io::BufReader::new(file))
    }
}

/// How ground-truth kernels are sized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Fixed {
        sigma: f64,
    },
    Adaptive {
        beta: f64,
        k: usize,
        #[serde(default = "default_sigma")]
        default_sigma: f64,
    },
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Adaptive {
            beta: DEFAULT_ADAPTIVE_BETA,
            k: DEFAULT_ADAPTIVE_K,
            default_sigma: DEFAULT_SIGMA,
        }
    }
}

impl KernelSpec {
    pub fn render(&self, points: &HeadPointSet) -> Result<DensityMap> {
        match *self {
            KernelSpec::Fixed { sigma } => fixed_kernel_density(points, sigma),
            KernelSpec::Adaptive {
                beta,
                k,
                default_sigma,
            } => adaptive_density_with_fallback(points, beta, k, default_sigma),
        }
    }
}

/// One unit-mass Gaussian of width `sigma` per head.
pub fn fixed_kernel_density(points: &HeadPointSet, sigma: f64) -> Result<DensityMap> {
    check_sigma(sigma)?;
    let sigmas = vec![sigma; points.len()];
    deposit(points, &sigmas)
}

/// Geometry-adaptive kernels with σ = β · (mean distance to the k nearest
/// heads), falling back to [`DEFAULT_SIGMA`] when fewer than k + 1 heads exist.
pub fn geometry_adaptive_density(points: &HeadPointSet, beta: f64, k: usize) -> Result<DensityMap> {
    adaptive_density_with_fallback(points, beta, k, DEFAULT_SIGMA)
}

pub fn adaptive_density_with_fallback(
    points: &HeadPointSet,
    beta: f64,
    k: usize,
    default_sigma: f64,
) -> Result<DensityMap> {
    let sigmas = adaptive_sigmas(points, beta, k, default_sigma)?;
    deposit(points, &sigmas)
}

/// Per-head σ for the adaptive kernel, in the order of `points.points()`.
pub fn adaptive_sigmas(
    points: &HeadPointSet,
    beta: f64,
    k: usize,
    default_sigma: f64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("adaptive kernel needs k >= 1".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
    }
    check_sigma(default_sigma)?;

    let pts = points.points();
    if pts.len() < k + 1 {
        return Ok(vec![default_sigma; pts.len()]);
    }
    let mut dists = Vec::with_capacity(pts.len());
    let sigmas = pts
        .iter()
        .enumerate()
        .map(|(i, &[x, y])| {
            dists.clear();
            dists.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &[ox, oy])| ((ox - x).powi(2) + (oy - y).powi(2)).sqrt()),
            );
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &mut dists[..k];
            nearest.sort_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / k as f64;
            let sigma = beta * mean;
            // coincident heads would give a zero-width kernel
            if sigma > 0.0 {
                sigma
            } else {
                default_sigma
            }
        })
        .collect();
    Ok(sigmas)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")))
    }
}

fn deposit(points: &HeadPointSet, sigmas: &[f64]) -> Result<DensityMap> {
    let (height, width) = (points.height(), points.width());
    let mut grid = vec![0.0f64; height * width];

    // Fixed accumulation order so the map does not depend on annotation order.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points.points()[a], points.points()[b]);
        pa[0]
            .total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(sigmas[a].total_cmp(&sigmas[b]))
    });

    for idx in order {
        let [x, y] = points.points()[idx];
        let (cols, wx) = axis_weights(x, sigmas[idx], width);
        let (rows, wy) = axis_weights(y, sigmas[idx], height);
        let norm = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
        for (dr, gy) in wy.iter().enumerate() {
            let base = (rows + dr) * width + cols;
            for (dc, gx) in wx.iter().enumerate() {
                grid[base + dc] += gy * gx / norm;
            }
        }
    }

    let data = grid.into_iter().map(|v| v as f32).collect();
    DensityMap::from_vec(height, width, data)
}

/// Truncated 1-D Gaussian weights along one axis: returns the first cell index
/// and the weights of the cells in the window. The cell containing the head is
/// always part of the window and always carries weight.
fn axis_weights(center: f64, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let own = (center.floor() as usize).min(len - 1);
    let reach = TRUNCATE_SIGMAS * sigma;
    let lo = ((center - 0.5 - reach).ceil().max(0.0) as usize).min(own);
    let hi = ((center - 0.5 + reach).floor().min(len as f64 - 1.0).max(0.0) as usize).max(own);
    let two_var = 2.0 * sigma * sigma;
    let mut weights: Vec<f64> = (lo..=hi)
        .map(|c| {
            let d = c as f64 + 0.5 - center;
            (-d * d / two_var).exp()
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights[own - lo] = 1.0;
    }
    (lo, weights)
}
