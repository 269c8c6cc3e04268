//! Environment-aware BEV compressor.
//!
//! The BEV plane is cut into 2×2 patches, each patch projected to a token, and
//! the token sequence is compressed by a selective state-space scan run in
//! three serialization orders: plain raster order, a near→far clockwise
//! "surround" order over three distance bands, and its exact reversal. The
//! gated sum of the three scans is projected back and added to the input as a
//! residual.

use std::sync::Arc;

use rand::Rng;

use crate::geometry::BevGrid;
use crate::nn::{Conv1dLayer, Forward, Init, LayerNorm, Linear, NnError, Param, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EbcError {
    #[error("spatial dims ({nz}, {nx}) must be even for 2x2 patching")]
    OddDims { nz: usize, nx: usize },
    #[error("EBC block needs at least one scan branch")]
    NoBranches,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EbcError>;

/// Distance band of a patch, by its metric center's distance from the ego
/// origin: A = [0, 20) m, B = [20, 35) m, C = [35, ∞) m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Band {
    A,
    B,
    C,
}

impl Band {
    pub fn of(dist: f64) -> Band {
        if dist < 20.0 {
            Band::A
        } else if dist < 35.0 {
            Band::B
        } else {
            Band::C
        }
    }

    fn rank(self) -> u8 {
        match self {
            Band::A => 0,
            Band::B => 1,
            Band::C => 2,
        }
    }
}

/// Metric centers `(x, z)` of every 2×2 patch in raster (row-major) order.
pub fn patch_centers(grid: &BevGrid) -> Vec<(f64, f64)> {
    let (dx, dz) = (grid.dx(), grid.dz());
    let mut centers = Vec::with_capacity((grid.nz / 2) * (grid.nx / 2));
    for pz in 0..grid.nz / 2 {
        let z = grid.z_min + (2 * pz + 1) as f64 * dz;
        for px in 0..grid.nx / 2 {
            let x = grid.x_min + (2 * px + 1) as f64 * dx;
            centers.push((x, z));
        }
    }
    centers
}

/// Assignment of every patch to its distance band.
pub struct BandPartition {
    /// Band per patch, raster order.
    pub bands: Vec<Band>,
    /// Patch counts for bands A, B, C.
    pub counts: [usize; 3],
}

impl BandPartition {
    pub fn build(grid: &BevGrid) -> Result<Self> {
        if grid.nz % 2 != 0 || grid.nx % 2 != 0 {
            return Err(EbcError::OddDims {
                nz: grid.nz,
                nx: grid.nx,
            });
        }
        let mut counts = [0usize; 3];
        let bands: Vec<Band> = patch_centers(grid)
            .iter()
            .map(|&(x, z)| {
                let b = Band::of(x.hypot(z));
                counts[b.rank() as usize] += 1;
                b
            })
            .collect();
        Ok(Self { bands, counts })
    }
}

/// Serialization order for the patch-token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    /// Plain raster order.
    Forward,
    /// Near→far over bands A, B, C; clockwise within each band.
    ForwardSurround,
    /// Exact reversal of [`ScanKind::ForwardSurround`]: far→near,
    /// counter-clockwise.
    BackwardSurround,
}

impl ScanKind {
    pub fn tag(self) -> &'static str {
        match self {
            ScanKind::Forward => "f",
            ScanKind::ForwardSurround => "fs",
            ScanKind::BackwardSurround => "bs",
        }
    }
}

/// A bijection over patch indices defining one branch's visit order.
pub struct PatchPermutation {
    pub kind: ScanKind,
    /// `order[i]` = raster patch index visited at sequence position `i`.
    pub order: Vec<u32>,
    /// `inverse[j]` = sequence position at which raster patch `j` is visited.
    pub inverse: Vec<u32>,
}

impl PatchPermutation {
    /// Gather maps moving `(L, d)` token rows into branch order and back.
    fn token_maps(&self, d: usize) -> (Arc<Vec<u32>>, Arc<Vec<u32>>) {
        let expand = |perm: &[u32]| {
            let mut map = Vec::with_capacity(perm.len() * d);
            for &row in perm {
                let base = row as usize * d;
                for j in 0..d {
                    map.push((base + j) as u32);
                }
            }
            Arc::new(map)
        };
        (expand(&self.order), expand(&self.inverse))
    }
}

/// Clockwise angle from the +Z (forward) axis, in `[0, 2π)`; +X (right) sits
/// at π/2 when looking down on the grid.
fn clockwise_angle(x: f64, z: f64) -> f64 {
    let theta = x.atan2(z);
    if theta < 0.0 {
        theta + std::f64::consts::TAU
    } else {
        theta
    }
}

/// Builds the visit order for one scan branch.
pub fn build_permutation(grid: &BevGrid, kind: ScanKind) -> Result<PatchPermutation> {
    let partition = BandPartition::build(grid)?;
    let centers = patch_centers(grid);
    let l = centers.len();
    let order: Vec<u32> = match kind {
        ScanKind::Forward => (0..l as u32).collect(),
        ScanKind::ForwardSurround | ScanKind::BackwardSurround => {
            let mut idx: Vec<u32> = (0..l as u32).collect();
            idx.sort_by(|&p, &q| {
                let (pi, qi) = (p as usize, q as usize);
                let (px, pz) = centers[pi];
                let (qx, qz) = centers[qi];
                partition.bands[pi]
                    .cmp(&partition.bands[qi])
                    .then(clockwise_angle(px, pz).total_cmp(&clockwise_angle(qx, qz)))
                    .then(px.hypot(pz).total_cmp(&qx.hypot(qz)))
                    .then(p.cmp(&q))
            });
            if kind == ScanKind::BackwardSurround {
                idx.reverse();
            }
            idx
        }
    };
    let mut inverse = vec![0u32; l];
    for (i, &p) in order.iter().enumerate() {
        inverse[p as usize] = i as u32;
    }
    Ok(PatchPermutation {
        kind,
        order,
        inverse,
    })
}

/// Zero-order-hold style discretization of one scalar SSM lane:
/// `Ā = exp(Δ·A)` exactly, `B̄ = Δ·B` (the Euler simplification used by the
/// block). Requires `Δ > 0`; `A < 0` makes the recurrence stable.
pub fn discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    ((delta * a).exp(), delta * b)
}

/// Exact zero-order-hold input coefficient `(∫₀^Δ exp(Aτ)dτ)·B =
/// ((Ā−1)/A)·B`, for diagnostics against the Euler simplification.
pub fn zoh_exact_input(a: f64, b: f64, delta: f64) -> f64 {
    if a == 0.0 {
        delta * b
    } else {
        (((delta * a).exp() - 1.0) / a) * b
    }
}

/// 2×2 patch embedding: gathers each patch into a `4·C` row, projects rows to
/// `token_dim` tokens, and back.
pub struct Patchify {
    pub proj_in: Param,
    pub proj_out: Param,
    gather: Arc<Vec<u32>>,
    scatter: Arc<Vec<u32>>,
    pub channels: usize,
    pub token_dim: usize,
    pub l: usize,
    nz: usize,
    nx: usize,
}

impl Patchify {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        token_dim: usize,
        nz: usize,
        nx: usize,
    ) -> Result<Self> {
        if nz % 2 != 0 || nx % 2 != 0 {
            return Err(EbcError::OddDims { nz, nx });
        }
        let (pz_n, px_n) = (nz / 2, nx / 2);
        let l = pz_n * px_n;
        let plane = nz * nx;
        // Row layout per patch: slot (dz·2 + dx)·C + c.
        let mut gather = Vec::with_capacity(l * 4 * channels);
        for pz in 0..pz_n {
            for px in 0..px_n {
                for dz in 0..2 {
                    for dx in 0..2 {
                        for c in 0..channels {
                            gather
                                .push((c * plane + (2 * pz + dz) * nx + (2 * px + dx)) as u32);
                        }
                    }
                }
            }
        }
        let mut scatter = Vec::with_capacity(channels * plane);
        for c in 0..channels {
            for iz in 0..nz {
                for ix in 0..nx {
                    let token = (iz / 2) * px_n + ix / 2;
                    let slot = ((iz % 2) * 2 + ix % 2) * channels + c;
                    scatter.push((token * 4 * channels + slot) as u32);
                }
            }
        }
        let proj_in = store.add(
            &format!("{name}.in.w"),
            &[4 * channels, token_dim],
            Init::XavierUniform(4 * channels, token_dim),
        )?;
        let proj_out = store.add(
            &format!("{name}.out.w"),
            &[token_dim, 4 * channels],
            Init::XavierUniform(token_dim, 4 * channels),
        )?;
        Ok(Self {
            proj_in,
            proj_out,
            gather: Arc::new(gather),
            scatter: Arc::new(scatter),
            channels,
            token_dim,
            l,
            nz,
            nx,
        })
    }

    fn check_spatial(&self, shape: &[usize]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != self.channels * self.nz * self.nx {
            return Err(TensorError::BadShape {
                op: "patchify",
                expected: format!("{} x {} x {} feature", self.channels, self.nz, self.nx),
                got: shape.to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// `(C, nz, nx)` feature (a leading batch dim of 1 is fine) → `(L, token_dim)`.
    pub fn tokens(&self, fw: &Forward, f: &Tensor) -> Result<Tensor> {
        self.check_spatial(&f.shape())?;
        let rows = f.gather_flat(Arc::clone(&self.gather), &[self.l, 4 * self.channels])?;
        Ok(rows.matmul(&fw.param(self.proj_in))?)
    }

    /// `(L, token_dim)` tokens → spatial feature with the requested shape.
    pub fn to_spatial(&self, fw: &Forward, tokens: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
        self.check_spatial(out_shape)?;
        let rows = tokens.matmul(&fw.param(self.proj_out))?;
        Ok(rows.gather_flat(Arc::clone(&self.scatter), out_shape)?)
    }
}

/// One scan branch: serialization order plus the per-branch selective-SSM
/// parameterization (A, B, C, Δ, D and the causal mixing conv).
pub struct SsmBranchParams {
    pub kind: ScanKind,
    pub perm: PatchPermutation,
    /// `(d_in, n)`; `A = −exp(a_log) < 0`.
    pub a_log: Param,
    /// `(d_in,)` skip coefficient D.
    pub d_skip: Param,
    pub lin_b: Linear,
    pub lin_c: Linear,
    pub lin_dt: Linear,
    /// `(d_in,)` learned additive bias inside `Δ = softplus(bias + Linear_Δ(x))`.
    pub dt_bias: Param,
    pub conv: Conv1dLayer,
    pub d_in: usize,
    pub n: usize,
    fwd_map: Arc<Vec<u32>>,
    inv_map: Arc<Vec<u32>>,
}

impl SsmBranchParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        perm: PatchPermutation,
        d_in: usize,
        n: usize,
        conv_k: usize,
    ) -> Result<Self> {
        let mut a_init = Vec::with_capacity(d_in * n);
        for _ in 0..d_in {
            for j in 0..n {
                a_init.push(((j + 1) as f64).ln());
            }
        }
        let a_log = store.add(&format!("{name}.a_log"), &[d_in, n], Init::Data(a_init))?;
        let d_skip = store.add(&format!("{name}.d"), &[d_in], Init::Const(1.0))?;
        let lin_b = Linear::new(store, &format!("{name}.b"), d_in, n, false)?;
        let lin_c = Linear::new(store, &format!("{name}.c"), d_in, n, false)?;
        let lin_dt = Linear::new(store, &format!("{name}.dt"), d_in, d_in, false)?;
        // Bias set so Δ starts log-uniform in [0.01, 0.1]: softplus(bias) = dt.
        let dt_init: Vec<f64> = (0..d_in)
            .map(|_| {
                let ln_dt = store
                    .rng_mut()
                    .gen_range(0.01f64.ln()..0.1f64.ln());
                ln_dt.exp().exp_m1().ln()
            })
            .collect();
        let dt_bias = store.add(&format!("{name}.dt_bias"), &[d_in], Init::Data(dt_init))?;
        let conv = Conv1dLayer::new(store, &format!("{name}.conv"), d_in, conv_k)?;
        let (fwd_map, inv_map) = perm.token_maps(d_in);
        Ok(Self {
            kind: perm.kind,
            perm,
            a_log,
            d_skip,
            lin_b,
            lin_c,
            lin_dt,
            dt_bias,
            conv,
            d_in,
            n,
            fwd_map,
            inv_map,
        })
    }

    /// Runs the branch on a sequence already in branch order; output stays in
    /// branch order and is pre-gating. `x_perm` is `(L, d_in)`.
    pub fn scan_permuted(&self, fw: &Forward, x_perm: &Tensor) -> Result<Tensor> {
        let l = x_perm.shape()[0];
        let seq = x_perm.transpose2d()?.reshape(&[1, self.d_in, l])?;
        let xs = self
            .conv
            .fwd(fw, &seq)?
            .reshape(&[self.d_in, l])?
            .transpose2d()?
            .silu();
        let b = self.lin_b.fwd(fw, x_perm)?;
        let c = self.lin_c.fwd(fw, x_perm)?;
        let delta = self
            .lin_dt
            .fwd(fw, x_perm)?
            .add_row_bias(&fw.param(self.dt_bias))?
            .softplus();
        let a = fw.param(self.a_log).exp().neg();
        Ok(Tensor::selective_scan(
            &xs,
            &delta,
            &a,
            &b,
            &c,
            &fw.param(self.d_skip),
        )?)
    }

    /// Full branch: permute raster tokens into branch order, scan, permute
    /// back. `x` is `(L, d_in)` in raster order; so is the output.
    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let l = x.shape()[0];
        let x_perm = x.gather_flat(Arc::clone(&self.fwd_map), &[l, self.d_in])?;
        let y_perm = self.scan_permuted(fw, &x_perm)?;
        Ok(y_perm.gather_flat(Arc::clone(&self.inv_map), &[l, self.d_in])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EbcConfig {
    /// Token/channel width D the block sees and returns.
    pub d_model: usize,
    /// Inner scan width (2·D by default).
    pub d_inner: usize,
    /// SSM state size n.
    pub n_state: usize,
    /// Causal depthwise conv width.
    pub conv_k: usize,
}

impl EbcConfig {
    pub fn for_width(d_model: usize, n_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            n_state,
            conv_k: 4,
        }
    }
}

/// The full compressor block: patchify → norm → x/z projections → three scan
/// branches → gated sum → output projection → spatial residual.
pub struct EbcBlock {
    pub patchify: Patchify,
    pub norm: LayerNorm,
    pub lin_x: Linear,
    pub lin_z: Linear,
    pub lin_eb: Linear,
    pub branches: Vec<SsmBranchParams>,
    pub cfg: EbcConfig,
}

impl EbcBlock {
    /// Standard three-branch block (forward, forward-surround,
    /// backward-surround).
    pub fn new(store: &mut ParamStore, name: &str, cfg: EbcConfig, grid: &BevGrid) -> Result<Self> {
        Self::with_kinds(
            store,
            name,
            cfg,
            grid,
            &[
                ScanKind::Forward,
                ScanKind::ForwardSurround,
                ScanKind::BackwardSurround,
            ],
        )
    }

    pub fn with_kinds(
        store: &mut ParamStore,
        name: &str,
        cfg: EbcConfig,
        grid: &BevGrid,
        kinds: &[ScanKind],
    ) -> Result<Self> {
        if kinds.is_empty() {
            return Err(EbcError::NoBranches);
        }
        let patchify = Patchify::new(
            store,
            &format!("{name}.patch"),
            cfg.d_model,
            cfg.d_model,
            grid.nz,
            grid.nx,
        )?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model)?;
        let lin_x = Linear::new(store, &format!("{name}.x"), cfg.d_model, cfg.d_inner, false)?;
        let lin_z = Linear::new(store, &format!("{name}.z"), cfg.d_model, cfg.d_inner, false)?;
        let lin_eb = Linear::new(store, &format!("{name}.eb"), cfg.d_inner, cfg.d_model, false)?;
        let mut branches = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let perm = build_permutation(grid, *kind)?;
            branches.push(SsmBranchParams::new(
                store,
                &format!("{name}.{}", kind.tag()),
                perm,
                cfg.d_inner,
                cfg.n_state,
                cfg.conv_k,
            )?);
        }
        Ok(Self {
            patchify,
            norm,
            lin_x,
            lin_z,
            lin_eb,
            branches,
            cfg,
        })
    }

    /// `(D, nz, nx)` (or `(1, D, nz, nx)`) in, same shape out.
    pub fn fwd(&self, fw: &Forward, f: &Tensor) -> Result<Tensor> {
        let tokens = self.patchify.tokens(fw, f)?;
        let normed = self.norm.fwd(fw, &tokens)?;
        let x = self.lin_x.fwd(fw, &normed)?;
        let gate = self.lin_z.fwd(fw, &normed)?.silu();
        let mut acc: Option<Tensor> = None;
        for branch in &self.branches {
            let gated = branch.fwd(fw, &x)?.mul(&gate)?;
            acc = Some(match acc {
                Some(prev) => prev.add(&gated)?,
                None => gated,
            });
        }
        let proj = self.lin_eb.fwd(fw, &acc.expect("at least one branch"))?;
        let spatial = self.patchify.to_spatial(fw, &proj, &f.shape())?;
        Ok(spatial.add(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, half: f64) -> BevGrid {
        BevGrid {
            x_min: -half,
            x_max: half,
            z_min: -half,
            z_max: half,
            nx: n,
            nz: n,
            ny: 1,
            ..BevGrid::default()
        }
    }

    #[test]
    fn band_boundaries() {
        assert_eq!(Band::of(0.0), Band::A);
        assert_eq!(Band::of(19.999), Band::A);
        assert_eq!(Band::of(20.0), Band::B);
        assert_eq!(Band::of(34.999), Band::B);
        assert_eq!(Band::of(35.0), Band::C);
        assert_eq!(Band::of(70.7), Band::C);
    }

    #[test]
    fn four_by_four_single_band_clockwise_cycle() {
        // Patch centers at (±1, ±1): all in band A. Clockwise from +Z:
        // front-right (idx 3), back-right (1), back-left (0), front-left (2).
        let g = grid(4, 2.0);
        let fs = build_permutation(&g, ScanKind::ForwardSurround).unwrap();
        assert_eq!(fs.order, vec![3, 1, 0, 2]);
        let bs = build_permutation(&g, ScanKind::BackwardSurround).unwrap();
        assert_eq!(bs.order, vec![2, 0, 1, 3]);
    }

    #[test]
    fn odd_dims_rejected() {
        let g = BevGrid::with_dims(5, 4, 1);
        assert!(matches!(
            BandPartition::build(&g),
            Err(EbcError::OddDims { .. })
        ));
    }

    #[test]
    fn discretize_fixed_points() {
        let (abar, bbar) = discretize(0.0, 3.0, 0.7);
        assert_eq!(abar, 1.0);
        assert!((bbar - 2.1).abs() < 1e-15);
        let (abar, _) = discretize(-1.0, 0.0, std::f64::consts::LN_2);
        assert!((abar - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_exact_matches_simpson_quadrature() {
        // ∫₀^Δ exp(aτ)dτ by composite Simpson, against the closed form.
        let (a, b, delta) = (-1.7, 0.9, 0.31);
        let steps = 1000;
        let h = delta / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let t0 = i as f64 * h;
            integral += h / 6.0
                * ((a * t0).exp() + 4.0 * (a * (t0 + h / 2.0)).exp() + (a * (t0 + h)).exp());
        }
        let exact = zoh_exact_input(a, b, delta) / b;
        assert!((integral - exact).abs() < 1e-12, "{integral} vs {exact}");
    }
}
