//! Head points, Gaussian density rendering and peak-based head proposals.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Kernel used for ground-truth density maps.
pub const DEFAULT_KERNEL_SIGMA: f64 = 4.0;
pub const DEFAULT_KERNEL_WINDOW: usize = 15;
/// Default proposal noise level in pixels.
pub const DEFAULT_NOISE_LEVEL: f64 = 2.0;
pub const DEFAULT_NMS_RADIUS: f64 = 4.0;
/// Peak threshold as a fraction of the map maximum.
pub const DEFAULT_PEAK_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPoint {
    pub row: f64,
    pub col: f64,
    pub identity: Option<u64>,
}

impl HeadPoint {
    pub fn new(row: f64, col: f64) -> Self {
        Self {
            row,
            col,
            identity: None,
        }
    }

    pub fn with_identity(row: f64, col: f64, identity: u64) -> Self {
        Self {
            row,
            col,
            identity: Some(identity),
        }
    }

    pub fn distance(&self, other: &HeadPoint) -> f64 {
        ((self.row - other.row).powi(2) + (self.col - other.col).powi(2)).sqrt()
    }
}

/// Head points of one frame. Coordinates lie in `[0, height-1] x [0, width-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub frame_index: usize,
    pub height: usize,
    pub width: usize,
    points: Vec<HeadPoint>,
}

impl PointSet {
    pub fn new(
        frame_index: usize,
        height: usize,
        width: usize,
        points: Vec<HeadPoint>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("frame dimensions must be positive"));
        }
        let set = Self {
            frame_index,
            height,
            width,
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(frame_index: usize, height: usize, width: usize) -> Self {
        Self {
            frame_index,
            height,
            width,
            points: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            if !self.contains(p.row, p.col) {
                return Err(Error::PointOutOfBounds {
                    index,
                    row: p.row,
                    col: p.col,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        let mut ids: Vec<u64> = self.points.iter().filter_map(|p| p.identity).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!(
                "identity {} appears twice in frame {}",
                w[0], self.frame_index
            )));
        }
        Ok(())
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row.is_finite()
            && col.is_finite()
            && (0.0..=(self.height - 1) as f64).contains(&row)
            && (0.0..=(self.width - 1) as f64).contains(&col)
    }

    pub fn clamp(&self, row: f64, col: f64) -> (f64, f64) {
        (
            row.clamp(0.0, (self.height - 1) as f64),
            col.clamp(0.0, (self.width - 1) as f64),
        )
    }

    pub fn points(&self) -> &[HeadPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn identities(&self) -> Vec<Option<u64>> {
        self.points.iter().map(|p| p.identity).collect()
    }

    /// Same frame geometry with a different point list.
    pub fn with_points(&self, points: Vec<HeadPoint>) -> Result<Self> {
        Self::new(self.frame_index, self.height, self.width, points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Array2<f64>,
    pub kernel_sigma: f64,
    pub window: usize,
}

impl DensityMap {
    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Renders each point as a window-truncated Gaussian renormalized to unit
/// mass over the in-frame part of its window.
pub fn render_density(points: &PointSet, sigma: f64, window: usize) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!(
            "kernel sigma must be positive, got {sigma}"
        )));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(invalid(format!(
            "kernel window must be odd and >= 3, got {window}"
        )));
    }
    points.validate()?;
    let (h, w) = (points.height, points.width);
    let mut values = Array2::zeros((h, w));
    let half = (window / 2) as isize;
    let two_var = 2.0 * sigma * sigma;
    let mut patch = Vec::with_capacity(window * window);

    for p in points.points() {
        let (cr, cc) = (p.row.round() as isize, p.col.round() as isize);
        patch.clear();
        let mut mass = 0.0;
        for r in (cr - half).max(0)..=(cr + half).min(h as isize - 1) {
            for c in (cc - half).max(0)..=(cc + half).min(w as isize - 1) {
                let d2 = (r as f64 - p.row).powi(2) + (c as f64 - p.col).powi(2);
                let k = (-d2 / two_var).exp();
                mass += k;
                patch.push((r as usize, c as usize, k));
            }
        }
        for &(r, c, k) in &patch {
            values[[r, c]] += k / mass;
        }
    }
    Ok(DensityMap {
        values,
        kernel_sigma: sigma,
        window,
    })
}

/// Local maxima of the map above `min_peak` (default `0.1 * max`), greedily
/// suppressed so no two proposals lie within `nms_radius` pixels.
///
/// A pixel is a peak when it is at least every 8-neighbour and strictly above
/// the neighbours that precede it in raster order, so a flat two-pixel top
/// yields one peak instead of none.
pub fn extract_head_proposals(
    map: &DensityMap,
    min_peak: Option<f64>,
    nms_radius: f64,
) -> Result<PointSet> {
    if nms_radius < 1.0 {
        return Err(invalid(format!(
            "nms radius must be >= 1, got {nms_radius}"
        )));
    }
    let (h, w) = map.values.dim();
    let max = map.max();
    let threshold = min_peak.unwrap_or(DEFAULT_PEAK_FRACTION * max);
    if max <= 0.0 {
        return Ok(PointSet::empty(0, h, w));
    }

    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map.values[[r, c]];
            if v <= 0.0 || v < threshold {
                continue;
            }
            let mut is_peak = true;
            'nbhd: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let nv = map.values[[nr as usize, nc as usize]];
                    let precedes = dr < 0 || (dr == 0 && dc < 0);
                    if nv > v || (precedes && nv == v) {
                        is_peak = false;
                        break 'nbhd;
                    }
                }
            }
            if is_peak {
                peaks.push((v, r, c));
            }
        }
    }

    // Strongest first; raster order breaks ties.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<HeadPoint> = Vec::new();
    for (_, r, c) in peaks {
        let cand = HeadPoint::new(r as f64, c as f64);
        if kept.iter().all(|k| k.distance(&cand) > nms_radius) {
            kept.push(cand);
        }
    }
    kept.sort_by(|a, b| a.row.total_cmp(&b.row).then(a.col.total_cmp(&b.col)));
    PointSet::new(0, h, w, kept)
}

/// Perturbs every coordinate by independent `N(0, noise_level^2)` noise and
/// clamps the result into the frame.
pub fn augment_proposals(points: &PointSet, noise_level: f64, seed: u64) -> Result<PointSet> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(invalid(format!(
            "noise level must be >= 0, got {noise_level}"
        )));
    }
    if noise_level == 0.0 {
        return Ok(points.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_level).map_err(|e| invalid(e.to_string()))?;
    let moved = points
        .points()
        .iter()
        .map(|p| {
            let (row, col) = points.clamp(
                p.row + normal.sample(&mut rng),
                p.col + normal.sample(&mut rng),
            );
            HeadPoint { row, col, ..*p }
        })
        .collect();
    points.with_points(moved)
}
