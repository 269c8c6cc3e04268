//! Procedural desk-scale scenes: vehicle layouts, a six-camera surround rig,
//! a small ray-cast renderer and simulated LiDAR / radar sweeps.
//!
//! Everything is seeded and bit-reproducible: the same seed always yields the
//! same scene, the same images and the same point cloud, so datasets never
//! need to touch disk.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{BevGrid, Camera, CameraRig, PointCloudRaster};
use crate::train::{make_targets, Targets};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("empty vehicle-count range {lo}..={hi}")]
    EmptyRange { lo: usize, hi: usize },
    #[error("unknown modality {0:?} (expected camera, camera+radar or camera+lidar)")]
    UnknownModality(String),
    #[error("dataset size must be positive")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Cameras sit this far above the ground (ego y points down, so the mounting
/// height is a negative y).
pub const CAMERA_HEIGHT: f64 = 1.6;
/// The simulated LiDAR sits above every vehicle roof so box tops are sampled.
pub const LIDAR_HEIGHT: f64 = 2.4;
/// Horizontal field of view of each camera, degrees.
pub const CAMERA_HFOV_DEG: f64 = 70.0;
/// An instance counts as visible when some view renders it with more pixels
/// than this.
pub const VISIBILITY_MIN_PIXELS: usize = 10;
/// Default desk-scale image height / width (both divisible by 16).
pub const DESK_IMG_H: usize = 64;
pub const DESK_IMG_W: usize = 112;

/// One upright box on the ground plane: footprint center `(x, z)` in meters,
/// heading `yaw` about +y, metric length (along heading), width and height.
#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Vehicle {
    /// True when the ground point `(x, z)` lies inside the footprint.
    pub fn contains_xz(&self, x: f64, z: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.x;
        let dz = z - self.z;
        // Vehicle frame: local z along the heading, local x to the side.
        let lx = dx * c - dz * s;
        let lz = dx * s + dz * c;
        lx.abs() <= self.width / 2.0 && lz.abs() <= self.length / 2.0
    }

    /// True when the footprint rectangle and the axis-aligned cell box
    /// `[x_lo, x_hi] × [z_lo, z_hi]` share interior area (touching edges do
    /// not count, so an aligned box spanning whole cells claims exactly them).
    pub fn overlaps_aabb(&self, x_lo: f64, x_hi: f64, z_lo: f64, z_hi: f64) -> bool {
        let corners = self.corners();
        let (mut fx_lo, mut fx_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut fz_lo, mut fz_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &corners {
            fx_lo = fx_lo.min(c[0]);
            fx_hi = fx_hi.max(c[0]);
            fz_lo = fz_lo.min(c[1]);
            fz_hi = fz_hi.max(c[1]);
        }
        if fx_hi <= x_lo || fx_lo >= x_hi || fz_hi <= z_lo || fz_lo >= z_hi {
            return false;
        }
        let (s, c) = self.yaw.sin_cos();
        // Vehicle edge normals: local x = (c, −s), local z = (s, c) in ego.
        for (ax, az, half) in [
            (c, -s, self.width / 2.0),
            (s, c, self.length / 2.0),
        ] {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &px in &[x_lo, x_hi] {
                for &pz in &[z_lo, z_hi] {
                    let d = (px - self.x) * ax + (pz - self.z) * az;
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
            if hi <= -half || lo >= half {
                return false;
            }
        }
        true
    }

    /// Footprint corners in ego coordinates, counter-ordered but consistent.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hw = self.width / 2.0;
        let hl = self.length / 2.0;
        let mut out = [[0.0; 2]; 4];
        for (k, (lx, lz)) in [(hw, hl), (hw, -hl), (-hw, -hl), (-hw, hl)]
            .into_iter()
            .enumerate()
        {
            // ego = R_y(yaw) · local, with R_y(θ): x' = x c + z s, z' = −x s + z c.
            out[k] = [self.x + lx * c + lz * s, self.z - lx * s + lz * c];
        }
        out
    }
}

/// Separating-axis test for two footprint rectangles.
pub fn footprints_overlap(a: &Vehicle, b: &Vehicle) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        [a.yaw.cos(), -a.yaw.sin()],
        [a.yaw.sin(), a.yaw.cos()],
        [b.yaw.cos(), -b.yaw.sin()],
        [b.yaw.sin(), b.yaw.cos()],
    ];
    for ax in axes {
        let proj = |cs: &[[f64; 2]; 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in cs {
                let d = p[0] * ax[0] + p[1] * ax[1];
                lo = lo.min(d);
                hi = hi.max(d);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// A full scene: layout plus the rig it will be rendered with.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub vehicles: Vec<Vehicle>,
    pub rig: CameraRig,
}

/// Six outward-facing pinhole cameras at 60° azimuth spacing, mounted at
/// [`CAMERA_HEIGHT`] with zero pitch and a [`CAMERA_HFOV_DEG`] field of view.
pub fn make_rig(img_h: usize, img_w: usize) -> CameraRig {
    let fx = (img_w as f64 / 2.0) / (CAMERA_HFOV_DEG / 2.0).to_radians().tan();
    let cameras = (0..6)
        .map(|k| {
            let yaw = k as f64 * PI / 3.0;
            let (s, c) = yaw.sin_cos();
            // camera-from-ego rotation = transpose of the ego-from-camera yaw.
            let rot = [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]];
            let pos = [0.0, -CAMERA_HEIGHT, 0.0];
            let mut t = [0.0; 3];
            for i in 0..3 {
                t[i] = -(rot[i][0] * pos[0] + rot[i][1] * pos[1] + rot[i][2] * pos[2]);
            }
            Camera {
                fx,
                fy: fx,
                cx: (img_w as f64 - 1.0) / 2.0,
                cy: (img_h as f64 - 1.0) / 2.0,
                rot,
                t,
            }
        })
        .collect();
    CameraRig {
        cameras,
        d: 3,
        h: img_h,
        w: img_w,
    }
}

/// Vehicles keep at least this center distance from the ego origin, which
/// together with the largest half-diagonal guarantees the ego cell stays free.
const MIN_CENTER_RADIUS: f64 = 6.0;
/// And stay inside the grid footprint with margin for their own extent.
const MAX_CENTER_RADIUS: f64 = 48.0;

/// Deterministic scene layout at the default desk image resolution.
pub fn generate_scene(seed: u64, n_vehicles: (usize, usize)) -> Result<SceneSpec> {
    generate_scene_with(seed, n_vehicles, DESK_IMG_H, DESK_IMG_W)
}

/// Deterministic scene layout: the vehicle count is uniform in the inclusive
/// range, positions are rejection-sampled so no two footprints overlap and
/// none comes near the ego origin.
pub fn generate_scene_with(
    seed: u64,
    n_vehicles: (usize, usize),
    img_h: usize,
    img_w: usize,
) -> Result<SceneSpec> {
    let (lo, hi) = n_vehicles;
    if lo > hi {
        return Err(SceneError::EmptyRange { lo, hi });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(lo..=hi);
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while vehicles.len() < target && attempts < 10_000 {
        attempts += 1;
        let x = rng.gen_range(-MAX_CENTER_RADIUS..MAX_CENTER_RADIUS);
        let z = rng.gen_range(-MAX_CENTER_RADIUS..MAX_CENTER_RADIUS);
        let candidate = Vehicle {
            x,
            z,
            yaw: rng.gen_range(0.0..TAU),
            length: rng.gen_range(4.0..5.0),
            width: rng.gen_range(1.8..2.2),
            height: rng.gen_range(1.4..1.8),
        };
        let r = (x * x + z * z).sqrt();
        if !(MIN_CENTER_RADIUS..=MAX_CENTER_RADIUS).contains(&r) {
            continue;
        }
        if vehicles.iter().any(|v| footprints_overlap(v, &candidate)) {
            continue;
        }
        vehicles.push(candidate);
    }
    Ok(SceneSpec {
        seed,
        vehicles,
        rig: make_rig(img_h, img_w),
    })
}

// ---------------------------------------------------------------------------
// Ray-cast renderer.
// ---------------------------------------------------------------------------

/// What a ray hit first.
#[derive(Clone, Copy, PartialEq)]
enum Hit {
    Sky,
    Ground,
    /// `(vehicle index, entry axis 0=x 1=y 2=z)`.
    Vehicle(usize, usize),
}

/// Slab intersection of a ray with one vehicle box; `t` is measured in units
/// of the (unnormalized) direction. Returns `(t_entry, entry_axis)`.
fn intersect_box(o: [f64; 3], d: [f64; 3], v: &Vehicle, t_min: f64) -> Option<(f64, usize)> {
    let (s, c) = v.yaw.sin_cos();
    // Transform into the vehicle frame (rotate by −yaw after translating).
    let px = o[0] - v.x;
    let pz = o[2] - v.z;
    let ol = [px * c - pz * s, o[1], px * s + pz * c];
    let dl = [d[0] * c - d[2] * s, d[1], d[0] * s + d[2] * c];
    let lo = [-v.width / 2.0, -v.height, -v.length / 2.0];
    let hi = [v.width / 2.0, 0.0, v.length / 2.0];
    let mut t_enter = t_min;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for k in 0..3 {
        if dl[k].abs() < 1e-12 {
            if ol[k] < lo[k] || ol[k] > hi[k] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[k] - ol[k]) / dl[k];
        let mut t1 = (hi[k] - ol[k]) / dl[k];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = k;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_exit < t_enter || t_enter <= t_min {
        return None;
    }
    Some((t_enter, axis))
}

/// Flat color for a vehicle instance, deterministic in `(scene seed, index)`.
fn instance_color(seed: u64, idx: usize) -> [f64; 3] {
    let mut h = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(idx as u64 + 1);
    let mut next = || {
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 29;
        0.25 + 0.65 * ((h >> 11) as f64 / (1u64 << 53) as f64)
    };
    [next(), next(), next()]
}

fn ground_color(x: f64, z: f64) -> [f64; 3] {
    let checker = (x / 2.0).floor() as i64 + (z / 2.0).floor() as i64;
    let base = if checker.rem_euclid(2) == 0 { 0.32 } else { 0.48 };
    [base, base, base]
}

const SKY_COLOR: [f64; 3] = [0.60, 0.72, 0.85];
const NEAR_CLIP: f64 = 0.5;

/// Cast one ray from `o` along unnormalized `d` and report the nearest hit.
fn cast(o: [f64; 3], d: [f64; 3], vehicles: &[Vehicle]) -> (Hit, f64) {
    let mut best_t = f64::INFINITY;
    let mut hit = Hit::Sky;
    // Ground plane y = 0 (y points down, the camera is above at negative y).
    if d[1].abs() > 1e-12 {
        let t = -o[1] / d[1];
        if t > NEAR_CLIP {
            best_t = t;
            hit = Hit::Ground;
        }
    }
    for (i, v) in vehicles.iter().enumerate() {
        if let Some((t, axis)) = intersect_box(o, d, v, NEAR_CLIP) {
            if t < best_t {
                best_t = t;
                hit = Hit::Vehicle(i, axis);
            }
        }
    }
    (hit, best_t)
}

/// A rendered scene: images, per-view instance pixel counts, visibility flags
/// and (for the point modalities) a simulated sweep.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    /// `(K, 3, H, W)` flat RGB in `[0, 1]`.
    pub images: Vec<f64>,
    pub views: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// `pixel_counts[view][vehicle]`.
    pub pixel_counts: Vec<Vec<usize>>,
    /// True when any view renders ≥ [`VISIBILITY_MIN_PIXELS`] of the instance.
    pub visibility: Vec<bool>,
    /// Ego-frame points; empty in camera-only mode.
    pub points: Vec<[f64; 3]>,
}

/// Render all six views with exact per-pixel depth ordering.
pub fn render(scene: &SceneSpec) -> RenderedSample {
    let (h, w) = (scene.rig.h, scene.rig.w);
    let views = scene.rig.cameras.len();
    let n_veh = scene.vehicles.len();
    let colors: Vec<[f64; 3]> = (0..n_veh)
        .map(|i| instance_color(scene.seed, i))
        .collect();
    let mut images = vec![0.0; views * 3 * h * w];
    let mut pixel_counts = vec![vec![0usize; n_veh]; views];
    for (k, cam) in scene.rig.cameras.iter().enumerate() {
        // Camera center in ego coordinates: p_cam = R p + t ⇒ c = −Rᵀ t.
        let mut o = [0.0; 3];
        for i in 0..3 {
            o[i] = -(cam.rot[0][i] * cam.t[0] + cam.rot[1][i] * cam.t[1] + cam.rot[2][i] * cam.t[2]);
        }
        for v in 0..h {
            for u in 0..w {
                let dc = [
                    (u as f64 - cam.cx) / cam.fx,
                    (v as f64 - cam.cy) / cam.fy,
                    1.0,
                ];
                // Ego direction = Rᵀ d_cam; t then measures camera-frame depth.
                let mut d = [0.0; 3];
                for i in 0..3 {
                    d[i] = cam.rot[0][i] * dc[0] + cam.rot[1][i] * dc[1] + cam.rot[2][i] * dc[2];
                }
                let (hit, t) = cast(o, d, &scene.vehicles);
                let rgb = match hit {
                    Hit::Sky => SKY_COLOR,
                    Hit::Ground => {
                        let gx = o[0] + t * d[0];
                        let gz = o[2] + t * d[2];
                        ground_color(gx, gz)
                    }
                    Hit::Vehicle(i, axis) => {
                        pixel_counts[k][i] += 1;
                        let shade = match axis {
                            1 => 1.0,  // top face
                            0 => 0.80, // side
                            _ => 0.65, // front/rear
                        };
                        let c = colors[i];
                        [c[0] * shade, c[1] * shade, c[2] * shade]
                    }
                };
                for ch in 0..3 {
                    images[((k * 3 + ch) * h + v) * w + u] = rgb[ch];
                }
            }
        }
    }
    let visibility = (0..n_veh)
        .map(|i| pixel_counts.iter().any(|pc| pc[i] > VISIBILITY_MIN_PIXELS))
        .collect();
    RenderedSample {
        images,
        views,
        img_h: h,
        img_w: w,
        pixel_counts,
        visibility,
        points: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Simulated sweeps.
// ---------------------------------------------------------------------------

const SWEEP_AZIMUTHS: usize = 720;
const SWEEP_RINGS: usize = 200;
/// Ground radii the rings aim at when nothing blocks them. The far radii give
/// the shallow rays that sample box tops: a ray aimed at ground radius `r`
/// crosses roof height `h` at distance `r·(H−h)/H`, so covering roofs out to
/// the 50 m grid edge for the tallest vehicles needs `r` up to ~220 m.
const SWEEP_R_MIN: f64 = 2.0;
const SWEEP_R_MAX: f64 = 220.0;

fn sweep(scene: &SceneSpec, seed: u64, keep: f64, sigma: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = [0.0, -LIDAR_HEIGHT, 0.0];
    let mut points = Vec::new();
    for ring in 0..SWEEP_RINGS {
        let r = SWEEP_R_MIN
            + (SWEEP_R_MAX - SWEEP_R_MIN) * ring as f64 / (SWEEP_RINGS - 1) as f64;
        for az in 0..SWEEP_AZIMUTHS {
            // Keep the rng stream identical regardless of hits: draw first.
            let keep_draw: f64 = rng.gen_range(0.0..1.0);
            let noise = gauss(&mut rng) * sigma;
            if keep_draw >= keep {
                continue;
            }
            let phi = az as f64 / SWEEP_AZIMUTHS as f64 * TAU;
            // Aim at the ground point (r sin φ, 0, r cos φ).
            let d = [r * phi.sin() - o[0], -o[1], r * phi.cos() - o[2]];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let dn = [d[0] / norm, d[1] / norm, d[2] / norm];
            let (hit, t) = cast(o, dn, &scene.vehicles);
            if hit == Hit::Sky {
                continue;
            }
            let range = t + noise;
            points.push([
                o[0] + range * dn[0],
                o[1] + range * dn[1],
                o[2] + range * dn[2],
            ]);
        }
    }
    points
}

/// Dense sweep with 3 cm range noise.
pub fn lidar_sweep(scene: &SceneSpec, seed: u64) -> Vec<[f64; 3]> {
    sweep(scene, seed, 1.0, 0.03)
}

/// The dense sweep subsampled to 2 % with 0.5 m range noise.
pub fn radar_sweep(scene: &SceneSpec, seed: u64) -> Vec<[f64; 3]> {
    sweep(scene, seed, 0.02, 0.5)
}

/// Model-ready raster features from a sweep: `(2, nz, nx)` with a `log1p`
/// point count and the per-cell mean height.
pub fn raster_input(points: &[[f64; 3]], grid: &BevGrid) -> Vec<f64> {
    let raster = crate::geometry::rasterize_points(points, grid);
    let plane = grid.nz * grid.nx;
    let mut data = raster.data;
    for c in data[..plane].iter_mut() {
        *c = c.ln_1p();
    }
    data
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

/// Input sensors available to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Camera,
    CameraRadar,
    CameraLidar,
}

impl Modality {
    /// Fusion channels the model must be configured with.
    pub fn raster_channels(self) -> usize {
        match self {
            Modality::Camera => 0,
            _ => PointCloudRaster::CHANNELS,
        }
    }
}

impl FromStr for Modality {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera" => Ok(Modality::Camera),
            "camera+radar" => Ok(Modality::CameraRadar),
            "camera+lidar" => Ok(Modality::CameraLidar),
            other => Err(SceneError::UnknownModality(other.to_owned())),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Camera => "camera",
            Modality::CameraRadar => "camera+radar",
            Modality::CameraLidar => "camera+lidar",
        })
    }
}

/// Dataset splits draw from disjoint seed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn base_seed(self) -> u64 {
        match self {
            Split::Train => 0x0100_0000,
            Split::Val => 0x0200_0000,
            Split::Test => 0x0300_0000,
        }
    }
}

impl FromStr for Split {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SceneError::UnknownModality(other.to_owned())),
        }
    }
}

/// One dataset element: the layout, its rendering and the training targets
/// (with visibility flags taken from the renderer).
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: SceneSpec,
    pub rendered: RenderedSample,
    pub targets: Targets,
}

/// A reproducible virtual dataset; samples are generated on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub size: usize,
    pub modality: Modality,
    pub n_vehicles: (usize, usize),
    pub grid: BevGrid,
    pub img_h: usize,
    pub img_w: usize,
}

impl Dataset {
    pub fn new(
        split: Split,
        size: usize,
        modality: Modality,
        n_vehicles: (usize, usize),
        grid: BevGrid,
        img_h: usize,
        img_w: usize,
    ) -> Result<Self> {
        if size == 0 {
            return Err(SceneError::EmptyDataset);
        }
        if n_vehicles.0 > n_vehicles.1 {
            return Err(SceneError::EmptyRange {
                lo: n_vehicles.0,
                hi: n_vehicles.1,
            });
        }
        Ok(Self {
            split,
            size,
            modality,
            n_vehicles,
            grid,
            img_h,
            img_w,
        })
    }

    /// Scene seed of element `i`; disjoint across splits by construction.
    pub fn sample_seed(&self, i: usize) -> u64 {
        self.split.base_seed() + i as u64
    }

    pub fn get(&self, i: usize) -> Result<Sample> {
        let seed = self.sample_seed(i);
        let scene = generate_scene_with(seed, self.n_vehicles, self.img_h, self.img_w)?;
        let mut rendered = render(&scene);
        rendered.points = match self.modality {
            Modality::Camera => Vec::new(),
            // Offset the sweep seed so it never reuses the layout stream.
            Modality::CameraLidar => lidar_sweep(&scene, seed ^ 0x51DE_CA5E),
            Modality::CameraRadar => radar_sweep(&scene, seed ^ 0x51DE_CA5E),
        };
        let mut targets = make_targets(&scene, &self.grid);
        targets.visibility = rendered.visibility.clone();
        Ok(Sample {
            scene,
            rendered,
            targets,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.size).map(|i| self.get(i))
    }
}
