//! The full BEV vehicle-segmentation network.
//!
//! Pipeline: per-view encoder (stem + OSA stages + FPN-style neck) → bilinear
//! lift into the voxel volume → Y collapse → optional point-cloud fusion →
//! 1×1 compression → selective-scan BEV compressor → BEV trunk with a
//! summative skip decoder → centerness-informed enhancement (spatial center
//! mask + centerness-query cross-attention over PV tokens) → three task heads
//! (segmentation logits, centerness, center offsets).

use std::sync::Arc;

use crate::ebc::{EbcBlock, EbcConfig, ScanKind};
use crate::geometry::{build_lift_taps, collapse_y, fuse, lift_with, BevGrid, Camera, CameraRig};
use crate::nn::{Conv2dLayer, Ese, Forward, Init, Linear, NnError, Param, ParamStore, Result};
use crate::tensor::{LiftTaps, Tensor};

/// One encoder stage: an optional stride for the transition conv, the output
/// width, the width of each aggregated conv layer, conv layers per block, and
/// the block count.
#[derive(Debug, Clone, Copy)]
pub struct OsaStageConfig {
    pub out_width: usize,
    pub layer_width: usize,
    pub layers: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub grid: BevGrid,
    pub img_h: usize,
    pub img_w: usize,
    pub stem_width: usize,
    pub stages: [OsaStageConfig; 3],
    /// Per-view feature channels `d` produced by the neck at 1/4 scale.
    pub d_feat: usize,
    /// BEV channel width `D` after the post-fusion 1×1 compression.
    pub d_model: usize,
    /// SSM state size for the compressor.
    pub n_state: usize,
    /// Point-cloud raster channels `N`; 0 = camera-only.
    pub raster_channels: usize,
    pub dec_width: usize,
    pub head_width: usize,
    pub attn_dim: usize,
    pub pos_dim: usize,
    pub use_ebc: bool,
    /// Scan branches instantiated inside the compressor (ablation axis).
    pub scan_kinds: Vec<ScanKind>,
    /// Residual centerness-query attention over PV tokens.
    pub enhance_pv: bool,
    /// Spatial gating of the segmentation input by the center mask.
    pub enhance_bev: bool,
}

fn all_scan_kinds() -> Vec<ScanKind> {
    vec![
        ScanKind::Forward,
        ScanKind::ForwardSurround,
        ScanKind::BackwardSurround,
    ]
}

impl ModelConfig {
    /// Laptop-scale defaults: 64×112 views, 32 BEV channels.
    pub fn desk(grid: BevGrid, raster_channels: usize) -> Self {
        let stage = |w: usize| OsaStageConfig {
            out_width: w,
            layer_width: w,
            layers: 2,
            blocks: 1,
        };
        Self {
            grid,
            img_h: 64,
            img_w: 112,
            stem_width: 16,
            stages: [stage(32), stage(64), stage(96)],
            d_feat: 32,
            d_model: 32,
            n_state: 8,
            raster_channels,
            dec_width: 32,
            head_width: 16,
            attn_dim: 16,
            pos_dim: 8,
            use_ebc: true,
            scan_kinds: all_scan_kinds(),
            enhance_pv: true,
            enhance_bev: true,
        }
    }

    /// Full-scale reference shapes (constructible; not trained here).
    pub fn full(raster_channels: usize) -> Self {
        let stage = |out: usize, layer: usize, blocks: usize| OsaStageConfig {
            out_width: out,
            layer_width: layer,
            layers: 5,
            blocks,
        };
        Self {
            grid: BevGrid::default(),
            img_h: 448,
            img_w: 800,
            stem_width: 64,
            stages: [stage(256, 128, 1), stage(512, 160, 3), stage(768, 192, 9)],
            d_feat: 128,
            d_model: 128,
            n_state: 16,
            raster_channels,
            dec_width: 128,
            head_width: 64,
            attn_dim: 64,
            pos_dim: 16,
            use_ebc: true,
            scan_kinds: all_scan_kinds(),
            enhance_pv: true,
            enhance_bev: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_h % 16 != 0 || self.img_w % 16 != 0 {
            return Err(NnError::Model(format!(
                "image dims {}x{} must be divisible by 16",
                self.img_h, self.img_w
            )));
        }
        if self.grid.nz % 4 != 0 || self.grid.nx % 4 != 0 {
            return Err(NnError::Model(format!(
                "grid dims {}x{} must be divisible by 4",
                self.grid.nz, self.grid.nx
            )));
        }
        if self.use_ebc && self.scan_kinds.is_empty() {
            return Err(NnError::Model(
                "compressor enabled with no scan branches".into(),
            ));
        }
        Ok(())
    }
}

/// One forward pass worth of sensor data.
pub struct ModelInputs<'a> {
    /// `(K, 3, img_h, img_w)` camera images (or image-like features).
    pub images: &'a Tensor,
    /// `(N, nz, nx)` rasterized point cloud; `None` in camera-only mode.
    pub raster: Option<&'a Tensor>,
}

pub struct HeadOutputs {
    /// `(1, nz, nx)` segmentation logits.
    pub seg_logits: Tensor,
    /// `(1, nz, nx)` centerness in `[0, 1]`.
    pub centerness: Tensor,
    /// `(2, nz, nx)` offsets pointing at instance centers, in cells.
    pub offset: Tensor,
}

/// One-shot-aggregation block: a chain of 3×3 convs whose outputs (plus the
/// block input) are concatenated once at the end, projected by a 1×1 conv and
/// gated through eSE with a residual back to the input.
pub struct OsaBlock {
    pub convs: Vec<Conv2dLayer>,
    pub proj: Conv2dLayer,
    pub ese: Ese,
}

impl OsaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        layer_width: usize,
        layers: usize,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        let mut in_ch = channels;
        for i in 0..layers {
            convs.push(Conv2dLayer::new(
                store,
                &format!("{name}.c{i}"),
                in_ch,
                layer_width,
                3,
                1,
                1,
                true,
            )?);
            in_ch = layer_width;
        }
        let concat_width = channels + layers * layer_width;
        let proj = Conv2dLayer::new(
            store,
            &format!("{name}.proj"),
            concat_width,
            channels,
            1,
            1,
            0,
            true,
        )?;
        let ese = Ese::new(store, &format!("{name}.ese"), channels)?;
        Ok(Self { convs, proj, ese })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = conv.fwd(fw, &cur)?.relu();
            feats.push(cur.clone());
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let cat = Tensor::concat(&refs, 1)?;
        let projected = self.proj.fwd(fw, &cat)?;
        self.ese.fwd(fw, x, &projected)
    }
}

/// Transition conv (stride 2 between stages) followed by the stage's blocks.
pub struct OsaStage {
    pub transition: Conv2dLayer,
    pub blocks: Vec<OsaBlock>,
}

impl OsaStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        cfg: OsaStageConfig,
        stride: usize,
    ) -> Result<Self> {
        let transition = Conv2dLayer::new(
            store,
            &format!("{name}.t"),
            in_ch,
            cfg.out_width,
            3,
            stride,
            1,
            true,
        )?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            blocks.push(OsaBlock::new(
                store,
                &format!("{name}.b{b}"),
                cfg.out_width,
                cfg.layer_width,
                cfg.layers,
            )?);
        }
        Ok(Self { transition, blocks })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let mut f = self.transition.fwd(fw, x)?.relu();
        for block in &self.blocks {
            f = block.fwd(fw, &f)?;
        }
        Ok(f)
    }
}

/// Layer-by-layer summative skip decoder: starting from the deepest level,
/// upsample ×2 and add the next-shallower skip.
pub fn skip_decoder(levels: &[Tensor]) -> Result<Tensor> {
    let mut up = levels
        .last()
        .ok_or_else(|| NnError::Model("decoder needs at least one level".into()))?
        .clone();
    for skip in levels.iter().rev().skip(1) {
        up = up.bilinear_up2()?.add(skip)?;
    }
    Ok(up)
}

/// Spatial center mask: channel max and mean of the pre-center-head feature,
/// a 7×7 conv down to one channel, then sigmoid.
pub fn center_mask(fw: &Forward, conv: &Conv2dLayer, c_f: &Tensor) -> Result<Tensor> {
    let cat = Tensor::concat(&[&c_f.channel_max()?, &c_f.channel_mean()?], 1)?;
    Ok(conv.fwd(fw, &cat)?.sigmoid())
}

/// Centerness-query cross-attention: queries are per-BEV-cell
/// `[centerness, positional embedding]` rows, keys/values are the flattened
/// multi-view PV tokens.
pub struct Cioe {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub proj: Linear,
    /// `(L_q, pos_dim)` learned positional embeddings, zero-initialized.
    pub pos: Param,
    pub mask_conv: Conv2dLayer,
    kv_map: Arc<Vec<u32>>,
    t_tokens: usize,
    kv_dim: usize,
    l_q: usize,
    attn_dim: usize,
    out_width: usize,
    nz: usize,
    nx: usize,
}

impl Cioe {
    /// `kv_shape` is the `(K, C, h, w)` shape of the PV feature the attention
    /// reads; queries cover an `nz × nx` BEV plane.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kv_shape: [usize; 4],
        nz: usize,
        nx: usize,
        attn_dim: usize,
        pos_dim: usize,
        out_width: usize,
    ) -> Result<Self> {
        let [views, kv_dim, h, w] = kv_shape;
        let t_tokens = views * h * w;
        let l_q = nz * nx;
        let w_q = Linear::new(store, &format!("{name}.wq"), 1 + pos_dim, attn_dim, false)?;
        let w_k = Linear::new(store, &format!("{name}.wk"), kv_dim, attn_dim, false)?;
        let w_v = Linear::new(store, &format!("{name}.wv"), kv_dim, attn_dim, false)?;
        let proj = Linear::new(store, &format!("{name}.proj"), attn_dim, out_width, true)?;
        let pos = store.add(&format!("{name}.pos"), &[l_q, pos_dim], Init::Zeros)?;
        let mask_conv = Conv2dLayer::new(store, &format!("{name}.mask"), 2, 1, 7, 1, 3, true)?;
        // Token t = (view, pixel); row t gathers that pixel across channels.
        let hw = h * w;
        let mut kv_map = Vec::with_capacity(t_tokens * kv_dim);
        for view in 0..views {
            for pix in 0..hw {
                for c in 0..kv_dim {
                    kv_map.push(((view * kv_dim + c) * hw + pix) as u32);
                }
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            proj,
            pos,
            mask_conv,
            kv_map: Arc::new(kv_map),
            t_tokens,
            kv_dim,
            l_q,
            attn_dim,
            out_width,
            nz,
            nx,
        })
    }

    /// `centerness` is `(1, 1, nz, nx)`; `pv` is the `(K, C, h, w)` feature
    /// declared at construction. Returns a `(1, out_width, nz, nx)` residual.
    pub fn attend(&self, fw: &Forward, centerness: &Tensor, pv: &Tensor) -> Result<Tensor> {
        let q_flat = centerness.reshape(&[self.l_q, 1])?;
        let q_cat = Tensor::concat(&[&q_flat, &fw.param(self.pos)], 1)?;
        let q = self.w_q.fwd(fw, &q_cat)?;
        let tokens = pv.gather_flat(Arc::clone(&self.kv_map), &[self.t_tokens, self.kv_dim])?;
        let keys = self.w_k.fwd(fw, &tokens)?;
        let values = self.w_v.fwd(fw, &tokens)?;
        let scores = q
            .matmul(&keys.transpose2d()?)?
            .scale(1.0 / (self.attn_dim as f64).sqrt());
        let attn = scores.softmax_lastdim()?;
        let mixed = self.proj.fwd(fw, &attn.matmul(&values)?)?;
        Ok(mixed
            .transpose2d()?
            .reshape(&[1, self.out_width, self.nz, self.nx])?)
    }
}

pub struct BevSegModel {
    pub cfg: ModelConfig,
    feat_rig: CameraRig,
    taps: Arc<LiftTaps>,
    split_maps: Vec<Arc<Vec<u32>>>,
    stem: Vec<Conv2dLayer>,
    pub stages: Vec<OsaStage>,
    laterals: Vec<Conv2dLayer>,
    neck: Conv2dLayer,
    compress: Conv2dLayer,
    pub ebc: Option<EbcBlock>,
    trunk: Vec<Conv2dLayer>,
    dec_conv: Conv2dLayer,
    center_head: (Conv2dLayer, Conv2dLayer),
    seg_head: (Conv2dLayer, Conv2dLayer),
    offset_head: (Conv2dLayer, Conv2dLayer),
    pub cioe: Option<Cioe>,
}

impl BevSegModel {
    /// Builds the network and precomputes the lift plan for `rig`, whose
    /// intrinsics are expressed at full image resolution.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, rig: &CameraRig) -> Result<Self> {
        cfg.validate()?;
        let (h4, w4) = (cfg.img_h / 4, cfg.img_w / 4);
        let feat_rig = CameraRig {
            cameras: rig
                .cameras
                .iter()
                .map(|c| Camera {
                    fx: c.fx / 4.0,
                    fy: c.fy / 4.0,
                    cx: c.cx / 4.0,
                    cy: c.cy / 4.0,
                    rot: c.rot,
                    t: c.t,
                })
                .collect(),
            d: cfg.d_feat,
            h: h4,
            w: w4,
        };
        let taps = build_lift_taps(&feat_rig, &cfg.grid)?;
        let cam_numel = cfg.d_feat * h4 * w4;
        let split_maps: Vec<Arc<Vec<u32>>> = (0..rig.cameras.len())
            .map(|k| {
                Arc::new(
                    (k * cam_numel..(k + 1) * cam_numel)
                        .map(|i| i as u32)
                        .collect(),
                )
            })
            .collect();

        let stem = vec![
            Conv2dLayer::new(store, "enc.stem.0", 3, cfg.stem_width, 3, 2, 1, true)?,
            Conv2dLayer::new(store, "enc.stem.1", cfg.stem_width, cfg.stem_width, 3, 1, 1, true)?,
            Conv2dLayer::new(store, "enc.stem.2", cfg.stem_width, cfg.stem_width, 3, 2, 1, true)?,
        ];
        let mut stages = Vec::with_capacity(3);
        let mut in_ch = cfg.stem_width;
        for (i, sc) in cfg.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(OsaStage::new(
                store,
                &format!("enc.s{i}"),
                in_ch,
                *sc,
                stride,
            )?);
            in_ch = sc.out_width;
        }
        let laterals = (0..3)
            .map(|i| {
                Conv2dLayer::new(
                    store,
                    &format!("enc.lat.{i}"),
                    cfg.stages[i].out_width,
                    cfg.d_feat,
                    1,
                    1,
                    0,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let neck = Conv2dLayer::new(store, "enc.neck", cfg.d_feat, cfg.d_feat, 3, 1, 1, true)?;
        let fused_ch = cfg.d_feat * cfg.grid.ny + cfg.raster_channels;
        let compress = Conv2dLayer::new(store, "enc.compress", fused_ch, cfg.d_model, 1, 1, 0, true)?;

        let ebc = if cfg.use_ebc {
            Some(EbcBlock::with_kinds(
                store,
                "ebc",
                EbcConfig::for_width(cfg.d_model, cfg.n_state),
                &cfg.grid,
                &cfg.scan_kinds,
            )?)
        } else {
            None
        };

        let trunk = vec![
            Conv2dLayer::new(store, "dec.s0", cfg.d_model, cfg.dec_width, 3, 1, 1, true)?,
            Conv2dLayer::new(store, "dec.s1", cfg.dec_width, cfg.dec_width, 3, 2, 1, true)?,
            Conv2dLayer::new(store, "dec.s2", cfg.dec_width, cfg.dec_width, 3, 2, 1, true)?,
        ];
        let dec_conv = Conv2dLayer::new(store, "dec.conv", cfg.dec_width, cfg.dec_width, 3, 1, 1, true)?;

        let head = |store: &mut ParamStore, name: &str, out: usize| -> Result<_> {
            Ok((
                Conv2dLayer::new(
                    store,
                    &format!("{name}.0"),
                    cfg.dec_width,
                    cfg.head_width,
                    3,
                    1,
                    1,
                    true,
                )?,
                Conv2dLayer::new(store, &format!("{name}.1"), cfg.head_width, out, 1, 1, 0, true)?,
            ))
        };
        let center_head = head(store, "heads.center", 1)?;
        let seg_head = head(store, "heads.seg", 1)?;
        let offset_head = head(store, "heads.off", 2)?;
        // Vehicles cover ~1–2 % of BEV cells; starting the occupancy logits
        // at the class prior skips the long collapse-to-base-rate phase that
        // a zero bias forces under BCE.
        if let Some(b) = seg_head.1.b {
            store.set_value(b, vec![-4.0]);
        }

        let cioe = if cfg.enhance_pv || cfg.enhance_bev {
            Some(Cioe::new(
                store,
                "cioe",
                [
                    rig.cameras.len(),
                    cfg.stages[2].out_width,
                    cfg.img_h / 16,
                    cfg.img_w / 16,
                ],
                cfg.grid.nz,
                cfg.grid.nx,
                cfg.attn_dim,
                cfg.pos_dim,
                cfg.dec_width,
            )?)
        } else {
            None
        };

        Ok(Self {
            cfg,
            feat_rig,
            taps,
            split_maps,
            stem,
            stages,
            laterals,
            neck,
            compress,
            ebc,
            trunk,
            dec_conv,
            center_head,
            seg_head,
            offset_head,
            cioe,
        })
    }

    /// Per-view PV encoding: stem (strides 2, 1, 2), OSA stages, FPN-style
    /// top-down neck. Returns the fused `(K, d, h/4, w/4)` feature and the
    /// deepest stage output (attention keys/values).
    fn encode(&self, fw: &Forward, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut f = images.clone();
        for conv in &self.stem {
            f = conv.fwd(fw, &f)?.relu();
        }
        let mut stage_outs = Vec::with_capacity(3);
        for stage in &self.stages {
            f = stage.fwd(fw, &f)?;
            stage_outs.push(f.clone());
        }
        let mut top = self.laterals[2].fwd(fw, &stage_outs[2])?;
        for i in (0..2).rev() {
            top = self.laterals[i]
                .fwd(fw, &stage_outs[i])?
                .add(&top.bilinear_up2()?)?;
        }
        let feat = self.neck.fwd(fw, &top)?.relu();
        Ok((feat, stage_outs.pop().expect("three stages")))
    }

    pub fn fwd(&self, fw: &Forward, inputs: &ModelInputs) -> Result<HeadOutputs> {
        let k = self.feat_rig.cameras.len();
        let (nz, nx) = (self.cfg.grid.nz, self.cfg.grid.nx);
        if inputs.images.shape() != [k, 3, self.cfg.img_h, self.cfg.img_w] {
            return Err(NnError::Model(format!(
                "expected images ({k}, 3, {}, {}), got {:?}",
                self.cfg.img_h,
                self.cfg.img_w,
                inputs.images.shape()
            )));
        }
        match (inputs.raster, self.cfg.raster_channels) {
            (None, 0) => {}
            (Some(r), n) if n > 0 && r.shape() == [n, nz, nx] => {}
            (r, n) => {
                return Err(NnError::Model(format!(
                    "raster/config mismatch: N = {n}, raster = {:?}",
                    r.map(|t| t.shape())
                )))
            }
        }

        // Perspective encoding and lift to BEV.
        let (feat, pv_deep) = self.encode(fw, inputs.images)?;
        let (h4, w4) = (self.cfg.img_h / 4, self.cfg.img_w / 4);
        let per_cam: Vec<Tensor> = self
            .split_maps
            .iter()
            .map(|m| feat.gather_flat(Arc::clone(m), &[1, self.cfg.d_feat, h4, w4]))
            .collect::<std::result::Result<_, _>>()?;
        let cam_refs: Vec<&Tensor> = per_cam.iter().collect();
        let vox = lift_with(&self.taps, &cam_refs, &self.feat_rig)?;
        let bev_cam = collapse_y(&vox)?;
        let fused = match inputs.raster {
            Some(raster) => fuse(&bev_cam, raster)?,
            None => bev_cam,
        };
        let c_f = self.cfg.d_feat * self.cfg.grid.ny + self.cfg.raster_channels;
        let bev_in = fused.reshape(&[1, c_f, nz, nx])?;
        let mut bev = self.compress.fwd(fw, &bev_in)?;
        if let Some(ebc) = &self.ebc {
            bev = ebc.fwd(fw, &bev)?;
        }

        // BEV trunk at strides 1, 2, 4 and the summative skip decoder.
        let s0 = self.trunk[0].fwd(fw, &bev)?.relu();
        let s1 = self.trunk[1].fwd(fw, &s0)?.relu();
        let s2 = self.trunk[2].fwd(fw, &s1)?.relu();
        let u0 = skip_decoder(&[s0, s1, s2])?;
        let cf = self.dec_conv.fwd(fw, &u0)?.relu();

        // Center head runs on C_F; its heatmap drives the enhancement.
        let centerness = self
            .center_head
            .1
            .fwd(fw, &self.center_head.0.fwd(fw, &cf)?.relu())?
            .sigmoid();

        let (cf_prime, seg_in) = if let Some(cioe) = &self.cioe {
            let enhanced = if self.cfg.enhance_pv {
                cf.add(&cioe.attend(fw, &centerness, &pv_deep)?)?
            } else {
                cf.clone()
            };
            let seg_in = if self.cfg.enhance_bev {
                let mask = center_mask(fw, &cioe.mask_conv, &cf)?;
                enhanced.scale_spatial(&mask)?
            } else {
                enhanced.clone()
            };
            (enhanced, seg_in)
        } else {
            (cf.clone(), cf)
        };

        let seg = self
            .seg_head
            .1
            .fwd(fw, &self.seg_head.0.fwd(fw, &seg_in)?.relu())?;
        let offset = self
            .offset_head
            .1
            .fwd(fw, &self.offset_head.0.fwd(fw, &cf_prime)?.relu())?;

        Ok(HeadOutputs {
            seg_logits: seg.reshape(&[1, nz, nx])?,
            centerness: centerness.reshape(&[1, nz, nx])?,
            offset: offset.reshape(&[2, nz, nx])?,
        })
    }
}
