//! Geometry oracles: exact principal-point recovery, per-voxel lift
//! reference, linearity, frame consistency, and rasterization counts.

use bevscan_core::geometry::{
    build_lift_taps, lift, rasterize_points, BevGrid, Camera, CameraRig,
};
use bevscan_core::tensor::{Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Builds a camera from a yaw (about +Y, turning toward +X) and a downward
/// pitch, positioned at `pos` in the ego frame.
fn yaw_pitch_camera(
    yaw: f64,
    pitch: f64,
    pos: [f64; 3],
    (fx, fy, cx, cy): (f64, f64, f64, f64),
) -> Camera {
    let (sy, cy_) = (yaw.sin(), yaw.cos());
    let (sp, cp) = (pitch.sin(), pitch.cos());
    // ego-from-camera = R_yaw · R_pitch (camera z = forward, y = down).
    let r_yaw = [[cy_, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy_]];
    let r_pitch = [[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]];
    let mut e_from_c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            e_from_c[i][j] = (0..3).map(|k| r_yaw[i][k] * r_pitch[k][j]).sum();
        }
    }
    // camera-from-ego is the inverse rigid transform.
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = e_from_c[j][i];
        }
    }
    let mut t = [0.0; 3];
    for i in 0..3 {
        t[i] = -(0..3).map(|k| rot[i][k] * pos[k]).sum::<f64>();
    }
    Camera {
        fx,
        fy,
        cx,
        cy,
        rot,
        t,
    }
}

fn random_rig(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> CameraRig {
    let cameras = (0..6)
        .map(|k| {
            let yaw = k as f64 * std::f64::consts::FRAC_PI_3 + rng.gen_range(-0.1..0.1);
            let pitch = rng.gen_range(-0.05..0.15);
            let pos = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-2.0..-1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let fx = rng.gen_range(0.6..1.2) * w as f64;
            let fy = rng.gen_range(0.6..1.2) * w as f64;
            let cx = (w as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0);
            let cy = (h as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0);
            yaw_pitch_camera(yaw, pitch, pos, (fx, fy, cx, cy))
        })
        .collect();
    CameraRig { cameras, d, h, w }
}

fn random_feats(rng: &mut ChaCha8Rng, tape: &Tape, rig: &CameraRig) -> Vec<Tensor> {
    (0..rig.cameras.len())
        .map(|_| {
            let data = (0..rig.d * rig.h * rig.w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            tape.constant(data, &[1, rig.d, rig.h, rig.w]).unwrap()
        })
        .collect()
}

/// Straightforward per-voxel lift reference: project, bilinear-sample, average
/// — no tap precomputation, no batching.
fn lift_oracle(rig: &CameraRig, feats: &[Vec<f64>], grid: &BevGrid) -> Vec<f64> {
    let (d, h, w) = (rig.d, rig.h, rig.w);
    let n_vox = grid.ny * grid.nz * grid.nx;
    let mut out = vec![0.0; d * n_vox];
    let mut v = 0;
    for iy in 0..grid.ny {
        for j in 0..grid.nz {
            for i in 0..grid.nx {
                let p = grid.voxel_center(i, iy, j);
                let mut acc = vec![0.0; d];
                let mut valid = 0usize;
                for (ci, cam) in rig.cameras.iter().enumerate() {
                    let pc = cam.to_camera(p);
                    if pc[2] <= 1e-9 {
                        continue;
                    }
                    let u = cam.fx * pc[0] / pc[2] + cam.cx;
                    let vpix = cam.fy * pc[1] / pc[2] + cam.cy;
                    if u < 0.0 || vpix < 0.0 || u > (w - 1) as f64 || vpix > (h - 1) as f64 {
                        continue;
                    }
                    valid += 1;
                    let x0 = (u.floor() as usize).min(w - 2);
                    let y0 = (vpix.floor() as usize).min(h - 2);
                    let (fu, fv) = (u - x0 as f64, vpix - y0 as f64);
                    for (c, a) in acc.iter_mut().enumerate() {
                        let at = |yy: usize, xx: usize| feats[ci][(c * h + yy) * w + xx];
                        *a += (1.0 - fv) * ((1.0 - fu) * at(y0, x0) + fu * at(y0, x0 + 1))
                            + fv * ((1.0 - fu) * at(y0 + 1, x0) + fu * at(y0 + 1, x0 + 1));
                    }
                }
                if valid > 0 {
                    for (c, a) in acc.iter().enumerate() {
                        out[c * n_vox + v] = a / valid as f64;
                    }
                }
                v += 1;
            }
        }
    }
    out
}

#[test]
fn principal_point_voxel_samples_exact_pixel() {
    // One camera at the ego origin looking along +Z; the grid is arranged so
    // one voxel center sits exactly on the optical axis at 10 m depth.
    let grid = BevGrid {
        z_min: 0.0,
        z_max: 20.0,
        nx: 5,
        nz: 1,
        ny: 1,
        ..BevGrid::default()
    };
    let (h, w) = (12, 16);
    let cam = Camera {
        fx: 50.0,
        fy: 50.0,
        cx: 8.0,
        cy: 6.0,
        rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        t: [0.0; 3],
    };
    let rig = CameraRig {
        cameras: vec![cam],
        d: 3,
        h,
        w,
    };
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats = random_feats(&mut rng, &tape, &rig);
    let out = lift(&rig, &[&feats[0]], &grid).unwrap();
    assert_eq!(out.shape(), &[3, 1, 1, 5]);
    let v = out.value();
    let f = feats[0].value();
    for c in 0..3 {
        let want = f[(c * h + 6) * w + 8]; // pixel (cx, cy) = (8, 6)
        let got = v[c * 5 + 2]; // voxel at x = 0, z = 10
        assert!(
            (got - want).abs() <= 1e-10,
            "channel {c}: {got} vs {want}"
        );
    }
    // Off-axis voxels at x = ±20, ±40 project far outside the map → zeros.
    for c in 0..3 {
        for i in [0usize, 1, 3, 4] {
            assert_eq!(v[c * 5 + i], 0.0);
        }
    }
}

#[test]
fn voxels_behind_all_cameras_lift_to_zero() {
    // Grid entirely at z > 0 and a single camera looking along −Z.
    let grid = BevGrid {
        z_min: 5.0,
        z_max: 45.0,
        nx: 4,
        nz: 4,
        ny: 2,
        ..BevGrid::default()
    };
    let cam = yaw_pitch_camera(std::f64::consts::PI, 0.0, [0.0, -1.5, 0.0], (20.0, 20.0, 7.5, 5.5));
    let rig = CameraRig {
        cameras: vec![cam],
        d: 2,
        h: 12,
        w: 16,
    };
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = random_feats(&mut rng, &tape, &rig);
    let out = lift(&rig, &[&feats[0]], &grid).unwrap();
    assert!(out.value().iter().all(|&x| x == 0.0));
}

#[test]
fn lift_matches_per_voxel_oracle_on_random_rig() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = BevGrid::with_dims(20, 20, 4);
    let rig = random_rig(&mut rng, 5, 10, 14);
    let tape = Tape::new();
    let feats = random_feats(&mut rng, &tape, &rig);
    let refs: Vec<&Tensor> = feats.iter().collect();
    let got = lift(&rig, &refs, &grid).unwrap();
    let raw: Vec<Vec<f64>> = feats.iter().map(|f| f.value()).collect();
    let want = lift_oracle(&rig, &raw, &grid);
    for (k, (&g, &w)) in got.value().iter().zip(want.iter()).enumerate() {
        assert!((g - w).abs() <= 1e-10, "element {k}: {g} vs {w}");
    }
}

#[test]
fn lift_is_linear_in_the_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = BevGrid::with_dims(10, 10, 2);
    let rig = random_rig(&mut rng, 3, 8, 12);
    let taps = build_lift_taps(&rig, &grid).unwrap();
    let tape = Tape::new();
    let feats = random_feats(&mut rng, &tape, &rig);
    let alpha = 2.6875; // exactly representable
    let scaled: Vec<Tensor> = feats.iter().map(|f| f.scale(alpha)).collect();
    let refs: Vec<&Tensor> = feats.iter().collect();
    let scaled_refs: Vec<&Tensor> = scaled.iter().collect();
    let base = bevscan_core::geometry::lift_with(&taps, &refs, &rig).unwrap();
    let lifted_scaled = bevscan_core::geometry::lift_with(&taps, &scaled_refs, &rig).unwrap();
    for (&a, &b) in lifted_scaled.value().iter().zip(base.value().iter()) {
        assert!((a - alpha * b).abs() <= 1e-12);
    }
}

#[test]
fn projection_is_invariant_under_a_common_rigid_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let cam = yaw_pitch_camera(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-0.3..0.3),
            [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..0.0),
                rng.gen_range(-2.0..2.0),
            ],
            (30.0, 28.0, 8.0, 6.0),
        );
        // A random rigid world transform, built from the same rotation helper.
        let xform = yaw_pitch_camera(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-0.5..0.5),
            [0.0; 3],
            (1.0, 1.0, 0.0, 0.0),
        );
        let (r_t, t_t) = (
            xform.rot,
            [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ],
        );
        let moved_cam = cam.after_world_transform(r_t, t_t);
        for _ in 0..20 {
            let p = [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-3.0..1.0),
                rng.gen_range(-20.0..20.0),
            ];
            let moved_p = [
                r_t[0][0] * p[0] + r_t[0][1] * p[1] + r_t[0][2] * p[2] + t_t[0],
                r_t[1][0] * p[0] + r_t[1][1] * p[1] + r_t[1][2] * p[2] + t_t[1],
                r_t[2][0] * p[0] + r_t[2][1] * p[1] + r_t[2][2] * p[2] + t_t[2],
            ];
            match (cam.project(p), moved_cam.project(moved_p)) {
                (Some((u1, v1, d1)), Some((u2, v2, d2))) => {
                    assert!((u1 - u2).abs() < 1e-8, "{u1} vs {u2}");
                    assert!((v1 - v2).abs() < 1e-8);
                    assert!((d1 - d2).abs() < 1e-8);
                }
                (None, None) => {}
                other => panic!("validity must agree, got {other:?}"),
            }
        }
    }
}

#[test]
fn raster_total_count_matches_filter_oracle_and_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = BevGrid::default();
    let mut points: Vec<[f64; 3]> = (0..10_000)
        .map(|_| {
            [
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-3.0..1.0),
                rng.gen_range(-60.0..60.0),
            ]
        })
        .collect();
    let raster = rasterize_points(&points, &grid);
    let in_bounds = points
        .iter()
        .filter(|p| p[0] >= -50.0 && p[0] < 50.0 && p[2] >= -50.0 && p[2] < 50.0)
        .count();
    let total: f64 = raster.data[..grid.nz * grid.nx].iter().sum();
    assert_eq!(total as usize, in_bounds);

    points.shuffle(&mut rng);
    let shuffled = rasterize_points(&points, &grid);
    assert_eq!(raster, shuffled, "raster must not depend on point order");
}
