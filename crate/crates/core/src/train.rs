//! Ground-truth targets, the three task losses with learned uncertainty
//! weighting, decoupled-decay Adam, the one-cycle schedule and the training
//! loop with gradient accumulation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{BevGrid, GeometryError};
use crate::nn::{BevSegModel, Forward, Init, ModelInputs, NnError, Param, ParamStore};
use crate::scene::{raster_input, Dataset, Sample, SceneError, SceneSpec};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule step {step} out of range (total {total})")]
    Schedule { step: usize, total: usize },
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Targets.
// ---------------------------------------------------------------------------

/// Spread (in cells) of the centerness Gaussians.
pub const CENTERNESS_SIGMA: f64 = 3.0;

/// Per-cell supervision rasters plus instance bookkeeping. All planes use the
/// `(row = z index, col = x index)` layout of the model heads.
#[derive(Debug, Clone)]
pub struct Targets {
    pub nz: usize,
    pub nx: usize,
    /// `(nz·nx)` binary vehicle footprint union.
    pub seg: Vec<f64>,
    /// `(nz·nx)` in `[0, 1]`, exactly 1 at each instance center cell.
    pub centerness: Vec<f64>,
    /// `(2·nz·nx)`: plane 0 is Δrow, plane 1 is Δcol, both in cell units,
    /// pointing from the cell center to the instance center; 0 outside.
    pub offset: Vec<f64>,
    /// `(nz·nx)` instance index per cell, −1 for background.
    pub instance_ids: Vec<i32>,
    /// Per-instance flags; defaults to all-true until a renderer fills it.
    pub visibility: Vec<bool>,
}

/// Rasterizes a scene layout into supervision targets on `grid`. A cell
/// belongs to a footprint when the two share interior area, which keeps the
/// mask consistent with where surface points of the box can actually land.
pub fn make_targets(scene: &SceneSpec, grid: &BevGrid) -> Targets {
    let (nz, nx) = (grid.nz, grid.nx);
    let plane = nz * nx;
    let (hx, hz) = (grid.dx() / 2.0, grid.dz() / 2.0);
    let mut seg = vec![0.0; plane];
    let mut centerness = vec![0.0; plane];
    let mut offset = vec![0.0; 2 * plane];
    let mut instance_ids = vec![-1i32; plane];
    for (idx, v) in scene.vehicles.iter().enumerate() {
        let center_cell = grid.cell_of(v.x, v.z);
        // Continuous center position in cell coordinates.
        let cx = (v.x - grid.x_min) / grid.dx();
        let cz = (v.z - grid.z_min) / grid.dz();
        for j in 0..nz {
            for i in 0..nx {
                let cell = j * nx + i;
                let (x, z) = grid.cell_center(i, j);
                if v.overlaps_aabb(x - hx, x + hx, z - hz, z + hz) {
                    seg[cell] = 1.0;
                    instance_ids[cell] = idx as i32;
                    offset[cell] = cz - (j as f64 + 0.5);
                    offset[plane + cell] = cx - (i as f64 + 0.5);
                }
                if let Some((ci, cj)) = center_cell {
                    let di = j as f64 - cj as f64;
                    let dj = i as f64 - ci as f64;
                    let g = (-(di * di + dj * dj)
                        / (2.0 * CENTERNESS_SIGMA * CENTERNESS_SIGMA))
                        .exp();
                    if g > centerness[cell] {
                        centerness[cell] = g;
                    }
                }
            }
        }
    }
    Targets {
        nz,
        nx,
        seg,
        centerness,
        offset,
        instance_ids,
        visibility: vec![true; scene.vehicles.len()],
    }
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy with logits: `mean(softplus(x) − y·x)`, which is
/// `−[y ln σ(x) + (1−y) ln(1−σ(x))]` without ever forming a log of zero.
pub fn seg_loss(logits: &Tensor, seg: &[f64]) -> Result<Tensor> {
    let y = logits.tape().constant(seg.to_vec(), logits.shape())?;
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean())
}

/// Mean squared error on the centerness heatmap.
pub fn center_loss(pred: &Tensor, target: &[f64]) -> Result<Tensor> {
    let t = pred.tape().constant(target.to_vec(), pred.shape())?;
    let diff = pred.sub(&t)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Mean absolute error over in-instance cells only; exactly zero (constant)
/// when no cell is masked.
pub fn offset_loss(pred: &Tensor, target: &[f64], instance_ids: &[i32]) -> Result<Tensor> {
    let plane = instance_ids.len();
    let masked = instance_ids.iter().filter(|&&id| id >= 0).count();
    if masked == 0 {
        return Ok(pred.tape().constant(vec![0.0], &[1])?);
    }
    let mut mask = vec![0.0; 2 * plane];
    for (cell, &id) in instance_ids.iter().enumerate() {
        if id >= 0 {
            mask[cell] = 1.0;
            mask[plane + cell] = 1.0;
        }
    }
    let t = pred.tape().constant(target.to_vec(), pred.shape())?;
    let m = pred.tape().constant(mask, pred.shape())?;
    Ok(pred
        .sub(&t)?
        .abs()
        .mul(&m)?
        .sum()
        .scale(1.0 / (2 * masked) as f64))
}

/// Learned log-variances, one per task.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyWeights {
    pub s_seg: Param,
    pub s_cen: Param,
    pub s_off: Param,
}

impl UncertaintyWeights {
    pub fn new(store: &mut ParamStore) -> std::result::Result<Self, NnError> {
        Ok(Self {
            s_seg: store.add("uncert.s_seg", &[1], Init::Zeros)?,
            s_cen: store.add("uncert.s_cen", &[1], Init::Zeros)?,
            s_off: store.add("uncert.s_off", &[1], Init::Zeros)?,
        })
    }
}

/// How the three losses combine: learned `Σ exp(−s_k)·L_k + s_k`, or plain
/// fixed weights for ablations.
#[derive(Debug, Clone, Copy)]
pub enum LossWeighting {
    Uncertainty(UncertaintyWeights),
    Fixed { seg: f64, cen: f64, off: f64 },
}

pub fn total_loss(
    fw: &Forward,
    weighting: &LossWeighting,
    l_seg: &Tensor,
    l_cen: &Tensor,
    l_off: &Tensor,
) -> Result<Tensor> {
    match weighting {
        LossWeighting::Uncertainty(w) => {
            let term = |s: Param, l: &Tensor| -> Result<Tensor> {
                let s = fw.param(s);
                Ok(s.neg().exp().mul(l)?.add(&s)?)
            };
            Ok(term(w.s_seg, l_seg)?
                .add(&term(w.s_cen, l_cen)?)?
                .add(&term(w.s_off, l_off)?)?)
        }
        LossWeighting::Fixed { seg, cen, off } => Ok(l_seg
            .scale(*seg)
            .add(&l_cen.scale(*cen))?
            .add(&l_off.scale(*off))?),
    }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Decay is applied only to parameters of
/// rank ≥ 2 (weights), never to biases, gains or scalar log-variances.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store
            .params()
            .map(|p| vec![0.0; store.value(p).len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        let decay = store.params().map(|p| store.shape(p).len() >= 2).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            decay,
            t: 0,
        }
    }

    /// One update over every parameter that received a gradient this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = store.params().nth(idx).expect("grad index within store");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let theta = store.value_mut(p);
            let shrink = if self.decay[idx] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            for k in 0..theta.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] = theta[k] * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One-cycle schedule: linear warmup from `lr_max/25` over the first 30 % of
/// steps, then cosine decay to `lr_max/1e4` at the final step.
pub fn one_cycle_lr(step: usize, total: usize, lr_max: f64) -> Result<f64> {
    if step >= total {
        return Err(TrainError::Schedule { step, total });
    }
    let start = lr_max / 25.0;
    let end = lr_max / 1e4;
    let warm = ((0.3 * total as f64).round() as usize).max(1);
    if step < warm {
        Ok(start + (lr_max - start) * step as f64 / warm as f64)
    } else {
        let span = (total - 1 - warm).max(1) as f64;
        let p = (step - warm) as f64 / span;
        Ok(end + (lr_max - end) * (1.0 + (PI * p).cos()) / 2.0)
    }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Optimizer steps; each consumes `accum · batch` samples.
    pub steps: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Micro-batches accumulated before each optimizer step.
    pub accum: usize,
    /// Samples summed per micro-batch.
    pub batch: usize,
    pub log_every: usize,
    /// Checkpoint interval in optimizer steps; 0 writes only the final one.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr_max: 5e-4,
            weight_decay: 0.01,
            accum: 5,
            batch: 1,
            log_every: 10,
            ckpt_every: 0,
        }
    }
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_cen: f64,
    pub l_off: f64,
    pub total: f64,
}

/// Runs the model on one sample, building image and raster tensors from its
/// rendering.
pub fn forward_sample(
    fw: &Forward,
    model: &BevSegModel,
    sample: &Sample,
    grid: &BevGrid,
) -> Result<crate::nn::HeadOutputs> {
    let r = &sample.rendered;
    let images = fw.tape().constant(
        r.images.clone(),
        &[r.views, 3, r.img_h, r.img_w],
    )?;
    let raster = if r.points.is_empty() {
        None
    } else {
        Some(fw.tape().constant(
            raster_input(&r.points, grid),
            &[crate::geometry::PointCloudRaster::CHANNELS, grid.nz, grid.nx],
        )?)
    };
    Ok(model.fwd(
        fw,
        &ModelInputs {
            images: &images,
            raster: raster.as_ref(),
        },
    )?)
}

/// The three per-task losses of one sample.
pub fn sample_losses(
    fw: &Forward,
    model: &BevSegModel,
    sample: &Sample,
    grid: &BevGrid,
) -> Result<(Tensor, Tensor, Tensor)> {
    let out = forward_sample(fw, model, sample, grid)?;
    let t = &sample.targets;
    let l_seg = seg_loss(&out.seg_logits, &t.seg)?;
    let l_cen = center_loss(&out.centerness, &t.centerness)?;
    let l_off = offset_loss(&out.offset, &t.offset, &t.instance_ids)?;
    Ok((l_seg, l_cen, l_off))
}

fn add_grads(acc: &mut Vec<Option<Vec<f64>>>, new: &[Option<Vec<f64>>]) {
    if acc.len() < new.len() {
        acc.resize(new.len(), None);
    }
    for (slot, g) in acc.iter_mut().zip(new.iter()) {
        let Some(g) = g else { continue };
        match slot {
            Some(a) => a.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.clone()),
        }
    }
}

fn scale_grads(acc: &mut [Option<Vec<f64>>], c: f64) {
    for slot in acc.iter_mut().flatten() {
        slot.iter_mut().for_each(|g| *g *= c);
    }
}

/// Full training run: gradient accumulation over `cfg.accum` micro-batches,
/// one AdamW step per cycle, CSV log plus periodic checkpoints in `out_dir`.
pub fn train(
    store: &mut ParamStore,
    model: &BevSegModel,
    weighting: &LossWeighting,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StepLog>> {
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.steps);
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join("train_log.csv"))?;
            writeln!(f, "step,lr,l_seg,l_cen,l_off,total")?;
            Some(f)
        }
        None => None,
    };
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        let lr = one_cycle_lr(step, cfg.steps, cfg.lr_max)?;
        let mut acc: Vec<Option<Vec<f64>>> = Vec::new();
        let mut sums = [0.0; 4];
        for _ in 0..cfg.accum {
            let fw = Forward::new(Tape::new(), store);
            let mut micro: Option<Tensor> = None;
            let mut parts = [0.0; 3];
            for _ in 0..cfg.batch {
                let sample = data.get(cursor % data.size)?;
                cursor += 1;
                let (l_seg, l_cen, l_off) = sample_losses(&fw, model, &sample, &data.grid)?;
                parts[0] += l_seg.value()[0];
                parts[1] += l_cen.value()[0];
                parts[2] += l_off.value()[0];
                let total = total_loss(&fw, weighting, &l_seg, &l_cen, &l_off)?;
                micro = Some(match micro {
                    Some(m) => m.add(&total)?,
                    None => total,
                });
            }
            let micro = micro.expect("batch ≥ 1").scale(1.0 / cfg.batch as f64);
            let value = micro.value()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            micro.backward()?;
            add_grads(&mut acc, &fw.grads());
            for (s, p) in sums.iter_mut().zip(parts.iter()) {
                *s += p / cfg.batch as f64;
            }
            sums[3] += value;
        }
        scale_grads(&mut acc, 1.0 / cfg.accum as f64);
        opt.step(store, &acc, lr);
        let log = StepLog {
            step,
            lr,
            l_seg: sums[0] / cfg.accum as f64,
            l_cen: sums[1] / cfg.accum as f64,
            l_off: sums[2] / cfg.accum as f64,
            total: sums[3] / cfg.accum as f64,
        };
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{:.8},{:.6},{:.6},{:.6},{:.6}",
                log.step, log.lr, log.l_seg, log.l_cen, log.l_off, log.total
            )?;
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            logs.push(log);
        }
        if let Some(dir) = out_dir {
            if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 {
                checkpoint::save(&dir.join(format!("ckpt_{:06}.bvt", step + 1)), &store.to_map())?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("ckpt_final.bvt"), &store.to_map())?;
    }
    Ok(logs)
}
