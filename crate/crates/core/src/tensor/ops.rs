//! The op catalog: forward builders and the backward dispatch.
//!
//! Each builder validates shapes, computes the forward value eagerly, and
//! records an [`Op`] so [`super::Tensor::backward`] can replay it. Heavy
//! kernels (convolutions, upsampling, the selective scan) live in sibling
//! modules; everything else is implemented inline.

use std::sync::Arc;

use super::conv;
use super::sskernel;
use super::{Node, Result, Tensor, TensorError};

/// Per-voxel sampling plan for the camera-to-BEV lift.
///
/// The geometry module projects every voxel center into every camera once and
/// stores, per voxel, the cameras that see it together with the four bilinear
/// taps (top-left flat index + weights, already divided by the valid-camera
/// count). The lift op then only gathers: it is linear in the feature maps.
pub struct LiftTaps {
    /// Channels per input feature map.
    pub d: usize,
    /// Flattened spatial size (h·w) of each input feature map.
    pub hw: usize,
    /// Row stride (w) of each input feature map.
    pub row: usize,
    /// Output shape, `[d, ny, nz, nx]`.
    pub out_shape: Vec<usize>,
    /// `voxel_offsets[v]..voxel_offsets[v+1]` indexes `taps` for voxel `v`,
    /// where `v = (iy·nz + iz)·nx + ix` matches the output spatial layout.
    pub voxel_offsets: Vec<u32>,
    pub taps: Vec<CamTap>,
}

/// One camera's bilinear contribution to one voxel.
#[derive(Clone, Copy)]
pub struct CamTap {
    pub cam: u16,
    /// Flat index of the top-left pixel within one channel plane.
    pub base: u32,
    /// Weights for (top-left, top-right, bottom-left, bottom-right); they sum
    /// to 1 / (number of valid cameras for this voxel).
    pub w: [f64; 4],
}

/// A sparse linear map kept for completeness of the public surface: `out[r] =
/// Σ_t weight·input[index]` over the terms of row `r`.
pub struct SparseMap {
    pub out_shape: Vec<usize>,
    /// `offsets[r]..offsets[r+1]` index `terms` for output element `r`.
    pub offsets: Vec<u32>,
    pub terms: Vec<BlendTerm>,
}

#[derive(Clone, Copy)]
pub struct BlendTerm {
    pub index: u32,
    pub weight: f64,
}

pub(crate) enum Op {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Silu { a: usize },
    Softplus { a: usize },
    Hsigmoid { a: usize },
    Exp { a: usize },
    Abs { a: usize },
    Sqrt { a: usize },
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Conv1dCausal { x: usize, w: usize },
    BilinearUp2 { x: usize },
    GlobalAvg { x: usize },
    ChanMax { x: usize },
    ChanMean { x: usize },
    ScaleChan { x: usize, s: usize },
    ScaleSpatial { x: usize, m: usize },
    AddChan { x: usize, b: usize },
    AddRow { x: usize, b: usize },
    SoftmaxLastDim { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape { x: usize },
    GatherFlat { x: usize, map: Arc<Vec<u32>> },
    SparseBlend { x: usize, map: Arc<SparseMap> },
    LiftCams { inputs: Vec<usize>, taps: Arc<LiftTaps> },
    Sum { x: usize },
    Mean { x: usize },
    SelectiveScan(Box<ScanRecord>),
}

pub(crate) struct ScanRecord {
    pub x: usize,
    pub delta: usize,
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub l: usize,
    pub dim: usize,
    pub n: usize,
    /// Hidden states h_t, shape (L, dim, n), saved for backward.
    pub h: Vec<f64>,
    /// Discretized Ā_t = exp(Δ_t·A), shape (L, dim, n), saved for backward.
    pub abar: Vec<f64>,
}

impl Tensor {
    fn node_needs_grad(&self, id: usize) -> bool {
        self.tape().inner.borrow().nodes[id].needs_grad
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_same_tape(rhs, name)?;
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let needs = self.node_needs_grad(self.id()) || rhs.node_needs_grad(rhs.id());
        Ok(self
            .tape()
            .push_op(data, self.shape().to_vec(), needs, op(self.id(), rhs.id())))
    }

    fn unary_elementwise(
        &self,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let needs = self.node_needs_grad(self.id());
        self.tape()
            .push_op(data, self.shape().to_vec(), needs, op(self.id()))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "div", |a, b| a / b, |a, b| Op::Div { a, b })
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary_elementwise(|x| c * x, |a| Op::Scale { a, c })
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        // The constant does not affect the gradient, so it is not recorded.
        self.unary_elementwise(|x| x + c, |a| Op::AddScalar { a })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary_elementwise(|x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_elementwise(sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn silu(&self) -> Tensor {
        self.unary_elementwise(|x| x * sigmoid(x), |a| Op::Silu { a })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary_elementwise(softplus, |a| Op::Softplus { a })
    }

    /// `min(max(x + 3, 0), 6) / 6` (the ReLU6 form of the hard sigmoid).
    pub fn hsigmoid(&self) -> Tensor {
        self.unary_elementwise(
            |x| ((x + 3.0).max(0.0)).min(6.0) / 6.0,
            |a| Op::Hsigmoid { a },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary_elementwise(f64::exp, |a| Op::Exp { a })
    }

    pub fn abs(&self) -> Tensor {
        self.unary_elementwise(f64::abs, |a| Op::Abs { a })
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary_elementwise(f64::sqrt, |a| Op::Sqrt { a })
    }

    /// Matrix product of a `(m, k)` by a `(k, n)` tensor.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_tape(rhs, "matmul")?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let a = self.data();
            let b = rhs.data();
            matmul_kernel(&a, &b, m, k, n)
        };
        let needs = self.node_needs_grad(self.id()) || rhs.node_needs_grad(rhs.id());
        Ok(self.tape().push_op(
            data,
            vec![m, n],
            needs,
            Op::Matmul {
                a: self.id(),
                b: rhs.id(),
            },
        ))
    }

    /// 2-D cross-correlation with zero padding over a `(B, C, H, W)` input and
    /// a `(OC, C, KH, KW)` kernel.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.check_same_tape(w, "conv2d")?;
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, wid) = (sx[2], sx[3]);
        let (kh, kw) = (sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wid + 2 * pad {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    wid + 2 * pad
                ),
            });
        }
        let (out, oh, ow) = {
            let x = self.data();
            let wd = w.data();
            conv::conv2d_forward(&x, sx, &wd, sw, stride, pad)
        };
        let needs = self.node_needs_grad(self.id()) || w.node_needs_grad(w.id());
        Ok(self.tape().push_op(
            out,
            vec![sx[0], sw[0], oh, ow],
            needs,
            Op::Conv2d {
                x: self.id(),
                w: w.id(),
                stride,
                pad,
            },
        ))
    }

    /// Depthwise causal 1-D convolution over a `(B, C, L)` input with a
    /// `(C, K)` kernel: `out[t] = Σ_k w[k]·x[t−k]` (positions before the start
    /// read zero), so no output position sees future inputs.
    pub fn conv1d_causal(&self, w: &Tensor) -> Result<Tensor> {
        self.check_same_tape(w, "conv1d_causal")?;
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_causal",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sw[1] < 1 {
            return Err(TensorError::Invalid {
                op: "conv1d_causal",
                msg: "kernel width must be at least 1".into(),
            });
        }
        let out = {
            let x = self.data();
            let wd = w.data();
            conv::conv1d_causal_forward(&x, sx, &wd, sw[1])
        };
        let needs = self.node_needs_grad(self.id()) || w.node_needs_grad(w.id());
        Ok(self.tape().push_op(
            out,
            sx.to_vec(),
            needs,
            Op::Conv1dCausal {
                x: self.id(),
                w: w.id(),
            },
        ))
    }

    /// Doubles H and W of a `(B, C, H, W)` tensor with bilinear interpolation
    /// (align-corners = false, edges clamped).
    pub fn bilinear_up2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::BadShape {
                op: "bilinear_up2",
                expected: "rank-4 (B, C, H, W)".into(),
                got: s.to_vec(),
            });
        }
        let out = conv::up2_forward(&self.data(), s);
        let needs = self.node_needs_grad(self.id());
        Ok(self.tape().push_op(
            out,
            vec![s[0], s[1], 2 * s[2], 2 * s[3]],
            needs,
            Op::BilinearUp2 { x: self.id() },
        ))
    }

    /// Mean over H and W: `(B, C, H, W)` → `(B, C)`.
    pub fn global_avg(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::BadShape {
                op: "global_avg",
                expected: "rank-4 (B, C, H, W)".into(),
                got: s.to_vec(),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = {
            let x = self.data();
            let mut out = vec![0.0; b * c];
            for (i, o) in out.iter_mut().enumerate() {
                let plane = &x[i * hw..(i + 1) * hw];
                *o = plane.iter().sum::<f64>() / hw as f64;
            }
            out
        };
        let needs = self.node_needs_grad(self.id());
        Ok(self
            .tape()
            .push_op(data, vec![b, c], needs, Op::GlobalAvg { x: self.id() }))
    }

    /// Max over the channel axis: `(B, C, H, W)` → `(B, 1, H, W)`. Ties route
    /// the gradient to the lowest channel index.
    pub fn channel_max(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::BadShape {
                op: "channel_max",
                expected: "rank-4 (B, C, H, W)".into(),
                got: s.to_vec(),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = {
            let x = self.data();
            let mut out = vec![f64::NEG_INFINITY; b * hw];
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let o = &mut out[bi * hw..(bi + 1) * hw];
                    for (ov, &xv) in o.iter_mut().zip(plane.iter()) {
                        if xv > *ov {
                            *ov = xv;
                        }
                    }
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id());
        Ok(self
            .tape()
            .push_op(data, vec![b, 1, h, w], needs, Op::ChanMax { x: self.id() }))
    }

    /// Mean over the channel axis: `(B, C, H, W)` → `(B, 1, H, W)`.
    pub fn channel_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::BadShape {
                op: "channel_mean",
                expected: "rank-4 (B, C, H, W)".into(),
                got: s.to_vec(),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = {
            let x = self.data();
            let mut out = vec![0.0; b * hw];
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let o = &mut out[bi * hw..(bi + 1) * hw];
                    for (ov, &xv) in o.iter_mut().zip(plane.iter()) {
                        *ov += xv;
                    }
                }
            }
            for ov in &mut out {
                *ov /= c as f64;
            }
            out
        };
        let needs = self.node_needs_grad(self.id());
        Ok(self
            .tape()
            .push_op(data, vec![b, 1, h, w], needs, Op::ChanMean { x: self.id() }))
    }

    /// Per-channel gating: `(B, C, H, W)` scaled by `(B, C)`.
    pub fn scale_channels(&self, s: &Tensor) -> Result<Tensor> {
        self.check_same_tape(s, "scale_channels")?;
        let (sx, ss) = (self.shape(), s.shape());
        if sx.len() != 4 || ss.len() != 2 || sx[0] != ss[0] || sx[1] != ss[1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                lhs: sx.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let hw = sx[2] * sx[3];
        let data = {
            let x = self.data();
            let sv = s.data();
            let mut out = vec![0.0; x.len()];
            for (i, &g) in sv.iter().enumerate() {
                let src = &x[i * hw..(i + 1) * hw];
                let dst = &mut out[i * hw..(i + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d = g * v;
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id()) || s.node_needs_grad(s.id());
        Ok(self.tape().push_op(
            data,
            sx.to_vec(),
            needs,
            Op::ScaleChan {
                x: self.id(),
                s: s.id(),
            },
        ))
    }

    /// Spatial gating: `(B, C, H, W)` scaled elementwise by a `(B, 1, H, W)`
    /// mask broadcast over channels.
    pub fn scale_spatial(&self, m: &Tensor) -> Result<Tensor> {
        self.check_same_tape(m, "scale_spatial")?;
        let (sx, sm) = (self.shape(), m.shape());
        if sx.len() != 4
            || sm.len() != 4
            || sm[1] != 1
            || sx[0] != sm[0]
            || sx[2] != sm[2]
            || sx[3] != sm[3]
        {
            return Err(TensorError::ShapeMismatch {
                op: "scale_spatial",
                lhs: sx.to_vec(),
                rhs: sm.to_vec(),
            });
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let data = {
            let x = self.data();
            let mv = m.data();
            let mut out = vec![0.0; x.len()];
            for bi in 0..b {
                let mask = &mv[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    let src = &x[off..off + hw];
                    let dst = &mut out[off..off + hw];
                    for ((d, &v), &g) in dst.iter_mut().zip(src.iter()).zip(mask.iter()) {
                        *d = g * v;
                    }
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id()) || m.node_needs_grad(m.id());
        Ok(self.tape().push_op(
            data,
            sx.to_vec(),
            needs,
            Op::ScaleSpatial {
                x: self.id(),
                m: m.id(),
            },
        ))
    }

    /// Adds a per-channel bias `(C,)` to a `(B, C, ...)` tensor (rank 3 or 4).
    pub fn add_channel_bias(&self, b: &Tensor) -> Result<Tensor> {
        self.check_same_tape(b, "add_channel_bias")?;
        let (sx, sb) = (self.shape(), b.shape());
        if (sx.len() != 3 && sx.len() != 4) || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let data = {
            let x = self.data();
            let bv = b.data();
            let mut out = x.to_vec();
            for chunk in out.chunks_mut(inner * c) {
                for (ci, plane) in chunk.chunks_mut(inner).enumerate() {
                    let bias = bv[ci];
                    for v in plane.iter_mut() {
                        *v += bias;
                    }
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id()) || b.node_needs_grad(b.id());
        Ok(self.tape().push_op(
            data,
            sx.to_vec(),
            needs,
            Op::AddChan {
                x: self.id(),
                b: b.id(),
            },
        ))
    }

    /// Adds a row vector `(D,)` to every row of a `(L, D)` tensor.
    pub fn add_row_bias(&self, b: &Tensor) -> Result<Tensor> {
        self.check_same_tape(b, "add_row_bias")?;
        let (sx, sb) = (self.shape(), b.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = {
            let x = self.data();
            let bv = b.data();
            let mut out = x.to_vec();
            for row in out.chunks_mut(sb[0]) {
                for (v, &bias) in row.iter_mut().zip(bv.iter()) {
                    *v += bias;
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id()) || b.node_needs_grad(b.id());
        Ok(self.tape().push_op(
            data,
            sx.to_vec(),
            needs,
            Op::AddRow {
                x: self.id(),
                b: b.id(),
            },
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let s = self.shape();
        let n = *s.last().expect("shape is never empty");
        if n == 0 {
            return Err(TensorError::BadShape {
                op: "softmax_lastdim",
                expected: "non-empty last axis".into(),
                got: s.to_vec(),
            });
        }
        let data = {
            let x = self.data();
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o = (v - m).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id());
        Ok(self
            .tape()
            .push_op(data, s.to_vec(), needs, Op::SoftmaxLastDim { x: self.id() }))
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "needs at least one input".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            first.check_same_tape(p, "concat")?;
            if p.rank() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let seg = p.shape()[axis] * inner;
                let src = p.data();
                data.extend_from_slice(&src[o * seg..(o + 1) * seg]);
            }
        }
        let needs = parts.iter().any(|p| p.node_needs_grad(p.id()));
        Ok(first.tape().push_op(
            data,
            out_shape,
            needs,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id()).collect(),
                axis,
            },
        ))
    }

    /// Reinterprets the data with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.numel()),
                got: shape.to_vec(),
            });
        }
        let needs = self.node_needs_grad(self.id());
        Ok(self
            .tape()
            .push_op(self.value(), shape.to_vec(), needs, Op::Reshape { x: self.id() }))
    }

    /// Arbitrary element rearrangement (with repetition allowed): `out[i] =
    /// x[map[i]]`. Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_flat(&self, map: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Tensor> {
        let out_numel: usize = out_shape.iter().product();
        if out_shape.is_empty() || out_numel != map.len() {
            return Err(TensorError::BadShape {
                op: "gather_flat",
                expected: format!("shape with {} elements to match map", map.len()),
                got: out_shape.to_vec(),
            });
        }
        let n = self.numel() as u32;
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_flat",
                msg: format!("map index {bad} out of range for {n} elements"),
            });
        }
        let data = {
            let x = self.data();
            map.iter().map(|&i| x[i as usize]).collect()
        };
        let needs = self.node_needs_grad(self.id());
        Ok(self.tape().push_op(
            data,
            out_shape.to_vec(),
            needs,
            Op::GatherFlat {
                x: self.id(),
                map,
            },
        ))
    }

    /// Transposes a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose2d",
                expected: "rank-2".into(),
                got: s.to_vec(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut map = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                map.push((i * c + j) as u32);
            }
        }
        self.gather_flat(Arc::new(map), &[c, r])
    }

    /// Sparse linear combination of one input: `out[r] = Σ w·x[idx]`.
    pub fn sparse_blend(&self, map: Arc<SparseMap>) -> Result<Tensor> {
        let out_numel: usize = map.out_shape.iter().product();
        if map.offsets.len() != out_numel + 1 {
            return Err(TensorError::Invalid {
                op: "sparse_blend",
                msg: "offsets must have out_numel + 1 entries".into(),
            });
        }
        let n = self.numel() as u32;
        if let Some(bad) = map.terms.iter().find(|t| t.index >= n) {
            return Err(TensorError::Invalid {
                op: "sparse_blend",
                msg: format!("term index {} out of range for {n} elements", bad.index),
            });
        }
        let data = {
            let x = self.data();
            let mut out = vec![0.0; out_numel];
            for (r, o) in out.iter_mut().enumerate() {
                let lo = map.offsets[r] as usize;
                let hi = map.offsets[r + 1] as usize;
                for t in &map.terms[lo..hi] {
                    *o += t.weight * x[t.index as usize];
                }
            }
            out
        };
        let needs = self.node_needs_grad(self.id());
        let shape = map.out_shape.clone();
        Ok(self
            .tape()
            .push_op(data, shape, needs, Op::SparseBlend { x: self.id(), map }))
    }

    /// The camera-to-BEV lift: blends bilinear taps from several per-camera
    /// feature maps (each `(1, d, h, w)`) into a `(d, ny, nz, nx)` volume
    /// according to a precomputed sampling plan.
    pub fn lift_cams(feats: &[&Tensor], taps: Arc<LiftTaps>) -> Result<Tensor> {
        let first = feats.first().ok_or_else(|| TensorError::Invalid {
            op: "lift_cams",
            msg: "needs at least one camera".into(),
        })?;
        let want = [1, taps.d, taps.hw / taps.row, taps.row];
        for f in feats {
            first.check_same_tape(f, "lift_cams")?;
            if f.shape() != want {
                return Err(TensorError::BadShape {
                    op: "lift_cams",
                    expected: format!("{want:?} per camera feature map"),
                    got: f.shape().to_vec(),
                });
            }
        }
        let n_vox: usize = taps.out_shape[1..].iter().product();
        if taps.voxel_offsets.len() != n_vox + 1 || taps.out_shape[0] != taps.d {
            return Err(TensorError::Invalid {
                op: "lift_cams",
                msg: "inconsistent sampling plan".into(),
            });
        }
        let data = {
            let borrowed: Vec<_> = feats.iter().map(|f| f.data()).collect();
            let planes: Vec<&[f64]> = borrowed.iter().map(|d| &**d).collect();
            lift_forward(&taps, &planes, n_vox)
        };
        let needs = feats.iter().any(|f| f.node_needs_grad(f.id()));
        let shape = taps.out_shape.clone();
        Ok(first.tape().push_op(
            data,
            shape,
            needs,
            Op::LiftCams {
                inputs: feats.iter().map(|f| f.id()).collect(),
                taps,
            },
        ))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let needs = self.node_needs_grad(self.id());
        self.tape()
            .push_op(vec![total], vec![1], needs, Op::Sum { x: self.id() })
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        let needs = self.node_needs_grad(self.id());
        self.tape()
            .push_op(vec![total / n], vec![1], needs, Op::Mean { x: self.id() })
    }

    /// The selective-scan recurrence over a length-`L` sequence:
    ///
    /// `h_t = exp(Δ_t·A) ⊙ h_{t−1} + (Δ_t·B_t)·x_t`, `y_t = ⟨C_t, h_t⟩ + D ⊙ x_t`
    ///
    /// with shapes `x, Δ: (L, d)`, `B, C: (L, n)`, `A: (d, n)`, `D: (d,)`.
    /// The recurrence runs independently per channel with an `n`-dimensional
    /// state; hidden states are saved so backward is a single reverse sweep.
    pub fn selective_scan(
        x: &Tensor,
        delta: &Tensor,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        d: &Tensor,
    ) -> Result<Tensor> {
        for other in [delta, a, b, c, d] {
            x.check_same_tape(other, "selective_scan")?;
        }
        let (sx, sd) = (x.shape(), delta.shape());
        if sx.len() != 2 || sd != sx {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: sx.to_vec(),
                rhs: sd.to_vec(),
            });
        }
        let (l, dim) = (sx[0], sx[1]);
        let sa = a.shape();
        if sa.len() != 2 || sa[0] != dim {
            return Err(TensorError::BadShape {
                op: "selective_scan",
                expected: format!("A of shape [{dim}, n]"),
                got: sa.to_vec(),
            });
        }
        let n = sa[1];
        for (name, t, want) in [("B", b, [l, n]), ("C", c, [l, n])] {
            if t.shape() != want {
                return Err(TensorError::BadShape {
                    op: "selective_scan",
                    expected: format!("{name} of shape {want:?}"),
                    got: t.shape().to_vec(),
                });
            }
        }
        if d.shape() != [dim] {
            return Err(TensorError::BadShape {
                op: "selective_scan",
                expected: format!("D of shape [{dim}]"),
                got: d.shape().to_vec(),
            });
        }
        let (y, h, abar) = {
            let xd = x.data();
            let dd = delta.data();
            let ad = a.data();
            let bd = b.data();
            let cd = c.data();
            let dskip = d.data();
            sskernel::scan_forward(l, dim, n, &xd, &dd, &ad, &bd, &cd, &dskip)
        };
        let needs = [x, delta, a, b, c, d]
            .iter()
            .any(|t| t.node_needs_grad(t.id()));
        Ok(x.tape().push_op(
            y,
            vec![l, dim],
            needs,
            Op::SelectiveScan(Box::new(ScanRecord {
                x: x.id(),
                delta: delta.id(),
                a: a.id(),
                b: b.id(),
                c: c.id(),
                d: d.id(),
                l,
                dim,
                n,
                h,
                abar,
            })),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn lift_forward(taps: &LiftTaps, planes: &[&[f64]], n_vox: usize) -> Vec<f64> {
    let (d, hw, row) = (taps.d, taps.hw, taps.row);
    let mut out = vec![0.0; d * n_vox];
    for v in 0..n_vox {
        let lo = taps.voxel_offsets[v] as usize;
        let hi = taps.voxel_offsets[v + 1] as usize;
        for t in &taps.taps[lo..hi] {
            let f = planes[t.cam as usize];
            let base = t.base as usize;
            let [w00, w01, w10, w11] = t.w;
            for ci in 0..d {
                let p = ci * hw + base;
                out[ci * n_vox + v] +=
                    w00 * f[p] + w01 * f[p + 1] + w10 * f[p + row] + w11 * f[p + row + 1];
            }
        }
    }
    out
}

/// Lazily allocates and returns the gradient buffer for node `id`.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].needs_grad
}

/// Accumulates this op's input gradients given the output gradient `gout`.
pub(crate) fn backward_op(nodes: &[Node], op: &Op, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Add { a, b } => {
            for &id in [a, b] {
                if wants(nodes, id) {
                    let g = slot(grads, id, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if wants(nodes, *a) {
                let g = slot(grads, *a, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            }
            if wants(nodes, *b) {
                let g = slot(grads, *b, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi -= go;
                }
            }
        }
        Op::Mul { a, b } => {
            if wants(nodes, *a) {
                let bd = &nodes[*b].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &bv) in g.iter_mut().zip(gout.iter()).zip(bd.iter()) {
                    *gi += go * bv;
                }
            }
            if wants(nodes, *b) {
                let ad = &nodes[*a].data;
                let g = slot(grads, *b, gout.len());
                for ((gi, &go), &av) in g.iter_mut().zip(gout.iter()).zip(ad.iter()) {
                    *gi += go * av;
                }
            }
        }
        Op::Div { a, b } => {
            if wants(nodes, *a) {
                let bd = &nodes[*b].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &bv) in g.iter_mut().zip(gout.iter()).zip(bd.iter()) {
                    *gi += go / bv;
                }
            }
            if wants(nodes, *b) {
                let ad = &nodes[*a].data;
                let bd = &nodes[*b].data;
                let g = slot(grads, *b, gout.len());
                for (i, (gi, &go)) in g.iter_mut().zip(gout.iter()).enumerate() {
                    *gi -= go * ad[i] / (bd[i] * bd[i]);
                }
            }
        }
        Op::Scale { a, c } => {
            if wants(nodes, *a) {
                let g = slot(grads, *a, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += c * go;
                }
            }
        }
        Op::AddScalar { a } => {
            if wants(nodes, *a) {
                let g = slot(grads, *a, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            }
        }
        Op::Relu { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    if x > 0.0 {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    let s = sigmoid(x);
                    *gi += go * s * (1.0 - s);
                }
            }
        }
        Op::Silu { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    let s = sigmoid(x);
                    *gi += go * s * (1.0 + x * (1.0 - s));
                }
            }
        }
        Op::Softplus { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    *gi += go * sigmoid(x);
                }
            }
        }
        Op::Hsigmoid { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    // Subgradient 0 at the kinks x = ±3.
                    if x > -3.0 && x < 3.0 {
                        *gi += go / 6.0;
                    }
                }
            }
        }
        Op::Exp { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    *gi += go * x.exp();
                }
            }
        }
        Op::Abs { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    // Subgradient 0 at x = 0.
                    *gi += go * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                }
            }
        }
        Op::Sqrt { a } => {
            if wants(nodes, *a) {
                let xd = &nodes[*a].data;
                let g = slot(grads, *a, gout.len());
                for ((gi, &go), &x) in g.iter_mut().zip(gout.iter()).zip(xd.iter()) {
                    *gi += go * 0.5 / x.sqrt();
                }
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if wants(nodes, *a) {
                // dA = dY · Bᵀ : dA[i,l] = Σ_j gout[i,j]·B[l,j]
                let bd = &nodes[*b].data;
                let g = slot(grads, *a, m * k);
                for i in 0..m {
                    let gr = &gout[i * n..(i + 1) * n];
                    for l in 0..k {
                        let br = &bd[l * n..(l + 1) * n];
                        let mut acc = 0.0;
                        for (&go, &bv) in gr.iter().zip(br.iter()) {
                            acc += go * bv;
                        }
                        g[i * k + l] += acc;
                    }
                }
            }
            if wants(nodes, *b) {
                // dB = Aᵀ · dY : dB[l,j] = Σ_i A[i,l]·gout[i,j]
                let ad = &nodes[*a].data;
                let g = slot(grads, *b, k * n);
                for i in 0..m {
                    let gr = &gout[i * n..(i + 1) * n];
                    for l in 0..k {
                        let av = ad[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &mut g[l * n..(l + 1) * n];
                        for (gv, &go) in grow.iter_mut().zip(gr.iter()) {
                            *gv += av * go;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let sx = &nodes[*x].shape;
            let sw = &nodes[*w].shape;
            if wants(nodes, *x) {
                let wd = &nodes[*w].data;
                let g = slot(grads, *x, nodes[*x].data.len());
                conv::conv2d_backward_x(gout, sx, wd, sw, *stride, *pad, g);
            }
            if wants(nodes, *w) {
                let xd = &nodes[*x].data;
                let g = slot(grads, *w, nodes[*w].data.len());
                conv::conv2d_backward_w(gout, xd, sx, sw, *stride, *pad, g);
            }
        }
        Op::Conv1dCausal { x, w } => {
            let sx = &nodes[*x].shape;
            let k = nodes[*w].shape[1];
            if wants(nodes, *x) {
                let wd = &nodes[*w].data;
                let g = slot(grads, *x, nodes[*x].data.len());
                conv::conv1d_causal_backward_x(gout, sx, wd, k, g);
            }
            if wants(nodes, *w) {
                let xd = &nodes[*x].data;
                let g = slot(grads, *w, nodes[*w].data.len());
                conv::conv1d_causal_backward_w(gout, xd, sx, k, g);
            }
        }
        Op::BilinearUp2 { x } => {
            if wants(nodes, *x) {
                let sx = &nodes[*x].shape;
                let g = slot(grads, *x, nodes[*x].data.len());
                conv::up2_backward(gout, sx, g);
            }
        }
        Op::GlobalAvg { x } => {
            if wants(nodes, *x) {
                let sx = &nodes[*x].shape;
                let hw = sx[2] * sx[3];
                let g = slot(grads, *x, nodes[*x].data.len());
                for (i, &go) in gout.iter().enumerate() {
                    let gv = go / hw as f64;
                    for v in &mut g[i * hw..(i + 1) * hw] {
                        *v += gv;
                    }
                }
            }
        }
        Op::ChanMax { x } => {
            if wants(nodes, *x) {
                let sx = &nodes[*x].shape;
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let xd = &nodes[*x].data;
                let g = slot(grads, *x, xd.len());
                for bi in 0..b {
                    for p in 0..hw {
                        // Ties go to the lowest channel index.
                        let mut best = 0;
                        let mut bestv = xd[bi * c * hw + p];
                        for ci in 1..c {
                            let v = xd[(bi * c + ci) * hw + p];
                            if v > bestv {
                                bestv = v;
                                best = ci;
                            }
                        }
                        g[(bi * c + best) * hw + p] += gout[bi * hw + p];
                    }
                }
            }
        }
        Op::ChanMean { x } => {
            if wants(nodes, *x) {
                let sx = &nodes[*x].shape;
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let g = slot(grads, *x, nodes[*x].data.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            g[off + p] += gout[bi * hw + p] / c as f64;
                        }
                    }
                }
            }
        }
        Op::ScaleChan { x, s } => {
            let sx = &nodes[*x].shape;
            let hw = sx[2] * sx[3];
            if wants(nodes, *x) {
                let sv = &nodes[*s].data;
                let g = slot(grads, *x, nodes[*x].data.len());
                for (i, &gain) in sv.iter().enumerate() {
                    for (gi, &go) in g[i * hw..(i + 1) * hw]
                        .iter_mut()
                        .zip(gout[i * hw..(i + 1) * hw].iter())
                    {
                        *gi += gain * go;
                    }
                }
            }
            if wants(nodes, *s) {
                let xd = &nodes[*x].data;
                let g = slot(grads, *s, nodes[*s].data.len());
                for (i, gi) in g.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (&xv, &go) in xd[i * hw..(i + 1) * hw]
                        .iter()
                        .zip(gout[i * hw..(i + 1) * hw].iter())
                    {
                        acc += xv * go;
                    }
                    *gi += acc;
                }
            }
        }
        Op::ScaleSpatial { x, m } => {
            let sx = &nodes[*x].shape;
            let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
            if wants(nodes, *x) {
                let mv = &nodes[*m].data;
                let g = slot(grads, *x, nodes[*x].data.len());
                for bi in 0..b {
                    let mask = &mv[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for ((gi, &go), &gm) in g[off..off + hw]
                            .iter_mut()
                            .zip(gout[off..off + hw].iter())
                            .zip(mask.iter())
                        {
                            *gi += gm * go;
                        }
                    }
                }
            }
            if wants(nodes, *m) {
                let xd = &nodes[*x].data;
                let g = slot(grads, *m, nodes[*m].data.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for (p, gi) in g[bi * hw..(bi + 1) * hw].iter_mut().enumerate() {
                            *gi += xd[off + p] * gout[off + p];
                        }
                    }
                }
            }
        }
        Op::AddChan { x, b } => {
            let sx = &nodes[*x].shape;
            let c = sx[1];
            let inner: usize = sx[2..].iter().product();
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            }
            if wants(nodes, *b) {
                let g = slot(grads, *b, c);
                for chunk in gout.chunks(inner * c) {
                    for (ci, plane) in chunk.chunks(inner).enumerate() {
                        g[ci] += plane.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::AddRow { x, b } => {
            let d = nodes[*b].shape[0];
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            }
            if wants(nodes, *b) {
                let g = slot(grads, *b, d);
                for row in gout.chunks(d) {
                    for (gi, &go) in g.iter_mut().zip(row.iter()) {
                        *gi += go;
                    }
                }
            }
        }
        Op::SoftmaxLastDim { x } => {
            if wants(nodes, *x) {
                let n = *nodes[*x].shape.last().expect("non-empty shape");
                // Recompute y from the saved output? The output node's data is
                // exactly the softmax value; find it via the gradient length.
                // We recompute from x instead to stay self-contained.
                let xd = &nodes[*x].data;
                let g = slot(grads, *x, xd.len());
                let mut y = vec![0.0; n];
                for ((xrow, grow), gorow) in
                    xd.chunks(n).zip(g.chunks_mut(n)).zip(gout.chunks(n))
                {
                    let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (yi, &xv) in y.iter_mut().zip(xrow.iter()) {
                        *yi = (xv - m).exp();
                        z += *yi;
                    }
                    let mut dot = 0.0;
                    for (yi, &go) in y.iter_mut().zip(gorow.iter()) {
                        *yi /= z;
                        dot += *yi * go;
                    }
                    for ((gi, &yi), &go) in grow.iter_mut().zip(y.iter()).zip(gorow.iter()) {
                        *gi += yi * (go - dot);
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let rank = nodes[inputs[0]].shape.len();
            let outer: usize = nodes[inputs[0]].shape[..*axis].iter().product();
            let inner: usize = nodes[inputs[0]].shape[*axis + 1..].iter().product();
            let _ = rank;
            let segs: Vec<usize> = inputs
                .iter()
                .map(|&id| nodes[id].shape[*axis] * inner)
                .collect();
            let total: usize = segs.iter().sum();
            for (pi, &id) in inputs.iter().enumerate() {
                if !wants(nodes, id) {
                    continue;
                }
                let seg = segs[pi];
                let before: usize = segs[..pi].iter().sum();
                let g = slot(grads, id, nodes[id].data.len());
                for o in 0..outer {
                    let src = &gout[o * total + before..o * total + before + seg];
                    let dst = &mut g[o * seg..(o + 1) * seg];
                    for (gi, &go) in dst.iter_mut().zip(src.iter()) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                for (gi, &go) in g.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            }
        }
        Op::GatherFlat { x, map } => {
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                for (&idx, &go) in map.iter().zip(gout.iter()) {
                    g[idx as usize] += go;
                }
            }
        }
        Op::SparseBlend { x, map } => {
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                for (r, &go) in gout.iter().enumerate() {
                    let lo = map.offsets[r] as usize;
                    let hi = map.offsets[r + 1] as usize;
                    for t in &map.terms[lo..hi] {
                        g[t.index as usize] += t.weight * go;
                    }
                }
            }
        }
        Op::LiftCams { inputs, taps } => {
            let (d, hw, row) = (taps.d, taps.hw, taps.row);
            let n_vox: usize = taps.out_shape[1..].iter().product();
            for v in 0..n_vox {
                let lo = taps.voxel_offsets[v] as usize;
                let hi = taps.voxel_offsets[v + 1] as usize;
                for t in &taps.taps[lo..hi] {
                    let id = inputs[t.cam as usize];
                    if !wants(nodes, id) {
                        continue;
                    }
                    let g = slot(grads, id, nodes[id].data.len());
                    let base = t.base as usize;
                    let [w00, w01, w10, w11] = t.w;
                    for ci in 0..d {
                        let go = gout[ci * n_vox + v];
                        let p = ci * hw + base;
                        g[p] += w00 * go;
                        g[p + 1] += w01 * go;
                        g[p + row] += w10 * go;
                        g[p + row + 1] += w11 * go;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if wants(nodes, *x) {
                let g = slot(grads, *x, nodes[*x].data.len());
                let go = gout[0];
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::Mean { x } => {
            if wants(nodes, *x) {
                let n = nodes[*x].data.len();
                let g = slot(grads, *x, n);
                let go = gout[0] / n as f64;
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::SelectiveScan(rec) => {
            sskernel::scan_backward(nodes, rec, gout, grads);
        }
    }
}
