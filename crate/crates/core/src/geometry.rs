//! Metric grid geometry, pinhole cameras, the parameter-free camera-to-BEV
//! lift, Y-collapse and point-cloud rasterization.
//!
//! Coordinate conventions (right-handed, OpenCV-style):
//!
//! * Ego frame: `x` right, `y` down, `z` forward. The ground plane is `y = 0`;
//!   points above the ground have negative `y`.
//! * A camera maps an ego point `p` to `p_cam = R·p + t`; with positive depth
//!   `Z`, the pixel is `u = fx·X/Z + cx`, `v = fy·Y/Z + cy` at feature-map
//!   resolution.
//! * The BEV plane indexes `x` with `i` (columns) and `z` with `j` (rows);
//!   rasters and targets are laid out `(channels, nz, nx)`.

use std::sync::Arc;

use crate::tensor::{CamTap, LiftTaps, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("camera {index}: degenerate intrinsics (fx = {fx}, fy = {fy})")]
    DegenerateIntrinsics { index: usize, fx: f64, fy: f64 },
    #[error("camera {index}: rotation is not orthonormal with det +1 ({detail})")]
    BadRotation { index: usize, detail: String },
    #[error("feature maps must be (1, {d}, {h}, {w}) for every camera, got {got:?}")]
    FeatureShape {
        d: usize,
        h: usize,
        w: usize,
        got: Vec<usize>,
    },
    #[error("need one feature map per camera ({cams} cameras, {feats} maps)")]
    FeatureCount { cams: usize, feats: usize },
    #[error("grid extents/dims are degenerate: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// The metric ↔ cell contract for the BEV volume.
///
/// Defaults: 100 m × 100 m (x and z in `[−50, +50]`), `y ∈ [−5, +5]`,
/// 200 × 200 × 8 cells → 0.5 m × 0.5 m × 1.25 m per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub nz: usize,
    pub ny: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x_min: -50.0,
            x_max: 50.0,
            z_min: -50.0,
            z_max: 50.0,
            y_min: -5.0,
            y_max: 5.0,
            nx: 200,
            nz: 200,
            ny: 8,
        }
    }
}

impl BevGrid {
    /// The default 100 m extents with custom cell counts.
    pub fn with_dims(nx: usize, nz: usize, ny: usize) -> Self {
        Self {
            nx,
            nz,
            ny,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 || self.ny == 0 {
            return Err(GeometryError::BadGrid(format!(
                "cell counts must be positive, got {}x{}x{}",
                self.nx, self.nz, self.ny
            )));
        }
        if self.x_max <= self.x_min || self.z_max <= self.z_min || self.y_max <= self.y_min {
            return Err(GeometryError::BadGrid("empty metric extent".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / self.nz as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    /// Metric center of cell `(i, j)` on the BEV plane.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.dx(),
            self.z_min + (j as f64 + 0.5) * self.dz(),
        )
    }

    /// Metric center of voxel `(i, iy, j)`.
    pub fn voxel_center(&self, i: usize, iy: usize, j: usize) -> [f64; 3] {
        let (x, z) = self.cell_center(i, j);
        [x, self.y_min + (iy as f64 + 0.5) * self.dy(), z]
    }

    /// Cell containing the metric point, if inside the x/z extents
    /// (half-open on the far edges).
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fi = (x - self.x_min) / self.dx();
        let fj = (z - self.z_min) / self.dz();
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        if i < self.nx && j < self.nz {
            Some((i, j))
        } else {
            None
        }
    }

    /// Euclidean ground distance of a cell center from the ego origin.
    pub fn cell_distance(&self, i: usize, j: usize) -> f64 {
        let (x, z) = self.cell_center(i, j);
        (x * x + z * z).sqrt()
    }
}

/// One pinhole camera: intrinsics at feature-map resolution plus the rigid
/// camera-from-ego transform.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation part of the camera-from-ego transform.
    pub rot: [[f64; 3]; 3],
    /// Translation part of the camera-from-ego transform.
    pub t: [f64; 3],
}

impl Camera {
    /// Transforms an ego-frame point into the camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    /// Projects an ego point to continuous pixel coordinates; `None` when the
    /// point is at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc[2] <= 1e-9 {
            return None;
        }
        Some((
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
            pc[2],
        ))
    }

    /// The same camera observing a world rigidly transformed by
    /// `p' = R_t·p + t_t`; projecting the transformed points through the
    /// returned camera matches projecting the originals through `self`.
    pub fn after_world_transform(&self, r_t: [[f64; 3]; 3], t_t: [f64; 3]) -> Camera {
        // cam'(R_t·p + t_t) = cam(p): R' = R·R_tᵀ, t' = t − R'·t_t.
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = (0..3).map(|k| self.rot[i][k] * r_t[j][k]).sum();
            }
        }
        let mut t = self.t;
        for i in 0..3 {
            t[i] -= (0..3).map(|k| rot[i][k] * t_t[k]).sum::<f64>();
        }
        Camera { rot, t, ..*self }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.fx == 0.0 || self.fy == 0.0 {
            return Err(GeometryError::DegenerateIntrinsics {
                index,
                fx: self.fx,
                fy: self.fy,
            });
        }
        let r = &self.rot;
        // RᵀR = I within 1e-9.
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(GeometryError::BadRotation {
                        index,
                        detail: format!("RᵀR[{i}][{j}] = {dot}"),
                    });
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadRotation {
                index,
                detail: format!("det = {det}"),
            });
        }
        Ok(())
    }
}

/// A set of cameras sharing one feature-map geometry `(d, h, w)`.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    /// Feature channels per camera.
    pub d: usize,
    /// Feature-map height.
    pub h: usize,
    /// Feature-map width.
    pub w: usize,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate(i)?;
        }
        if self.h < 2 || self.w < 2 {
            return Err(GeometryError::BadGrid(format!(
                "feature maps must be at least 2x2, got {}x{}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Projects every voxel center into every camera once and records the valid
/// bilinear taps, weights pre-divided by the valid-camera count. Voxels seen
/// by no camera get no taps and therefore lift to zeros.
pub fn build_lift_taps(rig: &CameraRig, grid: &BevGrid) -> Result<Arc<LiftTaps>> {
    rig.validate()?;
    grid.validate()?;
    let (h, w) = (rig.h, rig.w);
    let n_vox = grid.ny * grid.nz * grid.nx;
    let mut voxel_offsets = Vec::with_capacity(n_vox + 1);
    voxel_offsets.push(0u32);
    let mut taps = Vec::new();
    let mut scratch: Vec<CamTap> = Vec::with_capacity(rig.cameras.len());
    for iy in 0..grid.ny {
        for j in 0..grid.nz {
            for i in 0..grid.nx {
                let p = grid.voxel_center(i, iy, j);
                scratch.clear();
                for (ci, cam) in rig.cameras.iter().enumerate() {
                    let Some((u, v, _)) = cam.project(p) else {
                        continue;
                    };
                    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
                        continue;
                    }
                    let x0 = (u.floor() as usize).min(w - 2);
                    let y0 = (v.floor() as usize).min(h - 2);
                    let fu = u - x0 as f64;
                    let fv = v - y0 as f64;
                    scratch.push(CamTap {
                        cam: ci as u16,
                        base: (y0 * w + x0) as u32,
                        w: [
                            (1.0 - fv) * (1.0 - fu),
                            (1.0 - fv) * fu,
                            fv * (1.0 - fu),
                            fv * fu,
                        ],
                    });
                }
                if !scratch.is_empty() {
                    let inv = 1.0 / scratch.len() as f64;
                    for tap in &mut scratch {
                        for wv in &mut tap.w {
                            *wv *= inv;
                        }
                    }
                    taps.extend_from_slice(&scratch);
                }
                voxel_offsets.push(taps.len() as u32);
            }
        }
    }
    Ok(Arc::new(LiftTaps {
        d: rig.d,
        hw: h * w,
        row: w,
        out_shape: vec![rig.d, grid.ny, grid.nz, grid.nx],
        voxel_offsets,
        taps,
    }))
}

/// The parameter-free lift: per-voxel bilinear sampling of each valid camera's
/// feature map, averaged over valid cameras. `feats[k]` must be `(1, d, h, w)`.
pub fn lift(rig: &CameraRig, feats: &[&Tensor], grid: &BevGrid) -> Result<Tensor> {
    let taps = build_lift_taps(rig, grid)?;
    lift_with(&taps, feats, rig)
}

/// Lift with a precomputed sampling plan (the plan only depends on the rig and
/// grid, so callers on a training loop build it once).
pub fn lift_with(taps: &Arc<LiftTaps>, feats: &[&Tensor], rig: &CameraRig) -> Result<Tensor> {
    if feats.len() != rig.cameras.len() {
        return Err(GeometryError::FeatureCount {
            cams: rig.cameras.len(),
            feats: feats.len(),
        });
    }
    for f in feats {
        if f.shape() != [1, rig.d, rig.h, rig.w] {
            return Err(GeometryError::FeatureShape {
                d: rig.d,
                h: rig.h,
                w: rig.w,
                got: f.shape().to_vec(),
            });
        }
    }
    Ok(Tensor::lift_cams(feats, Arc::clone(taps))?)
}

/// Element map realizing [`collapse_y`]: output channel `iy·d + f` at `(j, i)`
/// reads voxel `(f, iy, j, i)`.
pub fn collapse_map(d: usize, ny: usize, nz: usize, nx: usize) -> Arc<Vec<u32>> {
    let plane = nz * nx;
    let mut map = Vec::with_capacity(d * ny * plane);
    for iy in 0..ny {
        for f in 0..d {
            let src = (f * ny + iy) * plane;
            for p in 0..plane {
                map.push((src + p) as u32);
            }
        }
    }
    Arc::new(map)
}

/// Collapses the Y axis into channels: `(d, ny, nz, nx)` → `(d·ny, nz, nx)`,
/// Y levels concatenated in ascending index order (each level keeps its `d`
/// feature channels together). Lossless.
pub fn collapse_y(vox: &Tensor) -> Result<Tensor> {
    let s = vox.shape();
    if s.len() != 4 {
        return Err(GeometryError::Tensor(TensorError::BadShape {
            op: "collapse_y",
            expected: "rank-4 (d, ny, nz, nx)".into(),
            got: s.to_vec(),
        }));
    }
    let (d, ny, nz, nx) = (s[0], s[1], s[2], s[3]);
    let map = collapse_map(d, ny, nz, nx);
    Ok(vox.gather_flat(map, &[d * ny, nz, nx])?)
}

/// A grid-aligned raster of a point cloud: channel 0 counts points per cell,
/// channel 1 is the mean `y` of the points in the cell (0 where empty).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudRaster {
    pub nz: usize,
    pub nx: usize,
    /// `(2, nz, nx)` row-major.
    pub data: Vec<f64>,
}

impl PointCloudRaster {
    pub const CHANNELS: usize = 2;

    pub fn zeros(grid: &BevGrid) -> Self {
        Self {
            nz: grid.nz,
            nx: grid.nx,
            data: vec![0.0; Self::CHANNELS * grid.nz * grid.nx],
        }
    }

    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    pub fn mean_y(&self, i: usize, j: usize) -> f64 {
        self.data[self.nz * self.nx + j * self.nx + i]
    }
}

/// Rasterizes a point cloud onto the BEV grid. Points outside the x/z extents
/// are dropped. The result is independent of the input point order: per-cell
/// sums are accumulated over points sorted by their coordinate bits.
pub fn rasterize_points(points: &[[f64; 3]], grid: &BevGrid) -> PointCloudRaster {
    let mut raster = PointCloudRaster::zeros(grid);
    let plane = grid.nz * grid.nx;
    // Bucket in-bounds points by cell, then sort each bucket so floating-point
    // accumulation order is canonical.
    let mut binned: Vec<(u32, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if let Some((i, j)) = grid.cell_of(p[0], p[2]) {
            binned.push(((j * grid.nx + i) as u32, p[1]));
        }
    }
    binned.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut k = 0;
    while k < binned.len() {
        let cell = binned[k].0 as usize;
        let mut count = 0.0;
        let mut sum_y = 0.0;
        while k < binned.len() && binned[k].0 as usize == cell {
            count += 1.0;
            sum_y += binned[k].1;
            k += 1;
        }
        raster.data[cell] = count;
        raster.data[plane + cell] = sum_y / count;
    }
    raster
}

/// Concatenates camera BEV channels with the raster channels: `(d·ny, nz, nx)`
/// + `(N, nz, nx)` → `(d·ny + N, nz, nx)`, camera channels first. The learned
/// 1×1 compression that follows lives in the model.
pub fn fuse(f_b: &Tensor, f_p: &Tensor) -> Result<Tensor> {
    let (sb, sp) = (f_b.shape(), f_p.shape());
    if sb.len() != 3 || sp.len() != 3 || sb[1] != sp[1] || sb[2] != sp[2] {
        return Err(GeometryError::Tensor(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: sb.to_vec(),
            rhs: sp.to_vec(),
        }));
    }
    Ok(Tensor::concat(&[f_b, f_p], 0)?)
}
