//! Intersection-over-union reporting: thresholded masks, distance-band
//! annuli, visibility filtering and dataset-level aggregation.

use crate::geometry::BevGrid;
use crate::nn::{BevSegModel, Forward, ParamStore};
use crate::scene::Dataset;
use crate::tensor::Tape;
use crate::train::{self, Targets, CENTERNESS_SIGMA};

/// Binarization threshold for predicted probabilities. A probability exactly
/// at the threshold counts as background.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Concentric evaluation annuli by cell-center distance from the ego origin.
/// Cells at 50 m and beyond belong to no band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceBand {
    /// `[0, 20)` m.
    Near,
    /// `[20, 35)` m.
    Mid,
    /// `[35, 50)` m.
    Far,
}

impl DistanceBand {
    pub const ALL: [DistanceBand; 3] = [DistanceBand::Near, DistanceBand::Mid, DistanceBand::Far];

    pub fn range(self) -> (f64, f64) {
        match self {
            DistanceBand::Near => (0.0, 20.0),
            DistanceBand::Mid => (20.0, 35.0),
            DistanceBand::Far => (35.0, 50.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DistanceBand::Near => "band_0_20m",
            DistanceBand::Mid => "band_20_35m",
            DistanceBand::Far => "band_35_50m",
        }
    }
}

/// Cell membership mask of one annulus.
pub fn band_mask(grid: &BevGrid, band: DistanceBand) -> Vec<bool> {
    let (lo, hi) = band.range();
    let mut mask = vec![false; grid.nz * grid.nx];
    for j in 0..grid.nz {
        for i in 0..grid.nx {
            let d = grid.cell_distance(i, j);
            mask[j * grid.nx + i] = d >= lo && d < hi;
        }
    }
    mask
}

/// IoU of `pred_prob > threshold` against `target > 0.5`, optionally
/// restricted to a region mask. Both masks empty in the region → 1.0.
pub fn compute_iou(
    pred_prob: &[f64],
    target: &[f64],
    threshold: f64,
    region: Option<&[bool]>,
) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for idx in 0..pred_prob.len() {
        if let Some(r) = region {
            if !r[idx] {
                continue;
            }
        }
        let p = pred_prob[idx] > threshold;
        let t = target[idx] > 0.5;
        inter += u64::from(p && t);
        union += u64::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Removes instances flagged invisible from every target plane. Segmentation,
/// offsets and instance ids are cleared cell-wise; the centerness heatmap is
/// rebuilt as the max over the remaining instances' Gaussians (their centers
/// are recovered exactly from the stored offsets).
pub fn visibility_filter(t: &Targets, flags: &[bool]) -> Targets {
    let plane = t.nz * t.nx;
    let mut out = t.clone();
    out.visibility = flags.to_vec();
    for cell in 0..plane {
        let id = t.instance_ids[cell];
        if id >= 0 && !flags.get(id as usize).copied().unwrap_or(true) {
            out.seg[cell] = 0.0;
            out.offset[cell] = 0.0;
            out.offset[plane + cell] = 0.0;
            out.instance_ids[cell] = -1;
        }
    }
    // Continuous center (in cell coordinates) of each surviving instance.
    let mut centers: Vec<Option<(f64, f64)>> = vec![None; flags.len()];
    for cell in 0..plane {
        let id = t.instance_ids[cell];
        if id >= 0 && centers[id as usize].is_none() {
            let (j, i) = (cell / t.nx, cell % t.nx);
            centers[id as usize] = Some((
                j as f64 + 0.5 + t.offset[cell],
                i as f64 + 0.5 + t.offset[plane + cell],
            ));
        }
    }
    out.centerness = vec![0.0; plane];
    for (id, center) in centers.iter().enumerate() {
        if !flags[id] {
            continue;
        }
        let Some((cz, cx)) = center else { continue };
        let (cj, ci) = (cz.floor(), cx.floor());
        if cj < 0.0 || cj >= t.nz as f64 || ci < 0.0 || ci >= t.nx as f64 {
            continue;
        }
        for j in 0..t.nz {
            for i in 0..t.nx {
                let di = j as f64 - cj;
                let dj = i as f64 - ci;
                let g = (-(di * di + dj * dj) / (2.0 * CENTERNESS_SIGMA * CENTERNESS_SIGMA))
                    .exp();
                let cell = j * t.nx + i;
                if g > out.centerness[cell] {
                    out.centerness[cell] = g;
                }
            }
        }
    }
    out
}

/// One IoU figure per region: the full grid plus the three annuli.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandedIou {
    pub overall: f64,
    pub near: f64,
    pub mid: f64,
    pub far: f64,
}

/// Aggregate IoU over a dataset, with and without visibility filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub filtered: BandedIou,
    pub unfiltered: BandedIou,
    pub scenes: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,overall,band_0_20m,band_20_35m,band_35_50m,scenes\n");
        for (name, b) in [("filtered", &self.filtered), ("unfiltered", &self.unfiltered)] {
            s.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{:.6},{}\n",
                b.overall, b.near, b.mid, b.far, self.scenes
            ));
        }
        s
    }
}

/// Accumulates intersections and unions across scenes; the final ratios are
/// aggregate `ΣI/ΣU`, not means of per-scene IoUs.
pub struct MetricsAccumulator {
    bands: [Vec<bool>; 3],
    /// `[variant][region]` with variant 0 = filtered, 1 = unfiltered and
    /// regions overall, near, mid, far.
    inter: [[u64; 4]; 2],
    union: [[u64; 4]; 2],
    scenes: usize,
}

impl MetricsAccumulator {
    pub fn new(grid: &BevGrid) -> Self {
        let bands = [
            band_mask(grid, DistanceBand::Near),
            band_mask(grid, DistanceBand::Mid),
            band_mask(grid, DistanceBand::Far),
        ];
        Self {
            bands,
            inter: [[0; 4]; 2],
            union: [[0; 4]; 2],
            scenes: 0,
        }
    }

    pub fn add(&mut self, pred_prob: &[f64], targets: &Targets) {
        let filtered = visibility_filter(targets, &targets.visibility);
        for (variant, t) in [&filtered, targets].into_iter().enumerate() {
            for idx in 0..pred_prob.len() {
                let p = pred_prob[idx] > IOU_THRESHOLD;
                let g = t.seg[idx] > 0.5;
                let i = u64::from(p && g);
                let u = u64::from(p || g);
                self.inter[variant][0] += i;
                self.union[variant][0] += u;
                for (b, mask) in self.bands.iter().enumerate() {
                    if mask[idx] {
                        self.inter[variant][b + 1] += i;
                        self.union[variant][b + 1] += u;
                    }
                }
            }
        }
        self.scenes += 1;
    }

    pub fn report(&self) -> MetricsReport {
        let ratio = |v: usize, r: usize| {
            if self.union[v][r] == 0 {
                1.0
            } else {
                self.inter[v][r] as f64 / self.union[v][r] as f64
            }
        };
        let banded = |v: usize| BandedIou {
            overall: ratio(v, 0),
            near: ratio(v, 1),
            mid: ratio(v, 2),
            far: ratio(v, 3),
        };
        MetricsReport {
            filtered: banded(0),
            unfiltered: banded(1),
            scenes: self.scenes,
        }
    }
}

/// Sigmoid of the raw head output, as a plain vector.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

/// Runs the model over every sample of `data` and aggregates the report.
pub fn evaluate(
    store: &ParamStore,
    model: &BevSegModel,
    data: &Dataset,
) -> train::Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(&data.grid);
    for sample in data.iter() {
        let sample = sample?;
        let fw = Forward::new(Tape::new(), store);
        let out = train::forward_sample(&fw, model, &sample, &data.grid)?;
        let prob = probabilities(&out.seg_logits.value());
        acc.add(&prob, &sample.targets);
    }
    Ok(acc.report())
}
