//! Reusable layers: linear, convolutions, layer norm and the eSE gate.

use std::sync::Arc;

use super::{Forward, Init, Param, ParamStore, Result};
use crate::tensor::Tensor;

/// Fully connected layer on row-token tensors: `(L, in) → (L, out)`.
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            &[in_dim, out_dim],
            Init::XavierUniform(in_dim, out_dim),
        )?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&fw.param(self.w))?;
        if let Some(b) = self.b {
            y = y.add_row_bias(&fw.param(b))?;
        }
        Ok(y)
    }
}

/// 2-D convolution layer over `(B, C, H, W)`.
pub struct Conv2dLayer {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            &[out_ch, in_ch, k, k],
            Init::HeNormal(in_ch * k * k),
        )?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, stride, pad })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let mut y = x.conv2d(&fw.param(self.w), self.stride, self.pad)?;
        if let Some(b) = self.b {
            y = y.add_channel_bias(&fw.param(b))?;
        }
        Ok(y)
    }
}

/// Depthwise causal 1-D convolution layer over `(B, C, L)`.
pub struct Conv1dLayer {
    pub w: Param,
    pub b: Param,
}

impl Conv1dLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[channels, k], Init::HeNormal(k))?;
        let b = store.add(&format!("{name}.b"), &[channels], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .conv1d_causal(&fw.param(self.w))?
            .add_channel_bias(&fw.param(self.b))?)
    }
}

/// Expansion map replicating a `(L, 1)` column over `d` columns.
fn row_expand_map(l: usize, d: usize) -> Arc<Vec<u32>> {
    let mut map = Vec::with_capacity(l * d);
    for r in 0..l {
        for _ in 0..d {
            map.push(r as u32);
        }
    }
    Arc::new(map)
}

/// Expansion map replicating a `(d,)` vector over `l` rows.
fn col_expand_map(l: usize, d: usize) -> Arc<Vec<u32>> {
    let mut map = Vec::with_capacity(l * d);
    for _ in 0..l {
        for c in 0..d {
            map.push(c as u32);
        }
    }
    Arc::new(map)
}

/// Per-token layer normalization over the last axis of `(L, D)` tokens, with
/// learned scale and shift.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?;
        let beta = store.add(&format!("{name}.beta"), &[dim], Init::Zeros)?;
        Ok(Self {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        })
    }

    pub fn fwd(&self, fw: &Forward, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (l, d) = (s[0], s[1]);
        let tape = fw.tape();
        let mean_w = tape.constant(vec![1.0 / d as f64; d], &[d, 1])?;
        let row_map = row_expand_map(l, d);
        let mu = x.matmul(&mean_w)?; // (L, 1)
        let centered = x.sub(&mu.gather_flat(Arc::clone(&row_map), &[l, d])?)?;
        let var = centered.mul(&centered)?.matmul(&mean_w)?; // (L, 1)
        let std = var.add_scalar(self.eps).sqrt();
        let normed = centered.div(&std.gather_flat(row_map, &[l, d])?)?;
        let gamma = fw
            .param(self.gamma)
            .gather_flat(col_expand_map(l, d), &[l, d])?;
        Ok(normed.mul(&gamma)?.add_row_bias(&fw.param(self.beta))?)
    }
}

/// Effective squeeze-excitation: `F_out = F_in + hsigmoid(FC(avg(x))) ⊗ x`.
///
/// `F_in` carries the residual; `x` is the feature being gated. Both share the
/// `(B, C, H, W)` shape.
pub struct Ese {
    pub fc: Linear,
}

impl Ese {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, &format!("{name}.fc"), channels, channels, true)?,
        })
    }

    pub fn fwd(&self, fw: &Forward, f_in: &Tensor, x: &Tensor) -> Result<Tensor> {
        let pooled = x.global_avg()?; // (B, C)
        let w_c = self.fc.fwd(fw, &pooled)?.hsigmoid();
        Ok(f_in.add(&x.scale_channels(&w_c)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        ParamStore::new(ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn ese_with_zero_fc_gates_at_one_half() {
        let mut s = store();
        let ese = Ese::new(&mut s, "ese", 3).unwrap();
        s.zero_all();
        let fw = Forward::new(Tape::new(), &s);
        let f_in = fw.tape().constant(vec![1.0; 3 * 4], &[1, 3, 2, 2]).unwrap();
        let x = fw.tape().constant(vec![2.0; 3 * 4], &[1, 3, 2, 2]).unwrap();
        let out = ese.fwd(&fw, &f_in, &x).unwrap();
        // hsigmoid(0) = 0.5, so out = F_in + 0.5·x = 1 + 1 = 2 everywhere.
        assert!(out.value().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn ese_with_zero_excitation_input_passes_residual_through() {
        let mut s = store();
        let ese = Ese::new(&mut s, "ese", 4).unwrap();
        let fw = Forward::new(Tape::new(), &s);
        let f_in = fw
            .tape()
            .constant((0..16).map(f64::from).collect(), &[1, 4, 2, 2])
            .unwrap();
        let x = fw.tape().constant(vec![0.0; 16], &[1, 4, 2, 2]).unwrap();
        let out = ese.fwd(&fw, &f_in, &x).unwrap();
        assert_eq!(out.value(), f_in.value());
    }

    #[test]
    fn ese_matches_direct_formula() {
        let mut s = store();
        let ese = Ese::new(&mut s, "ese", 3).unwrap();
        let fw = Forward::new(Tape::new(), &s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fd: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xd: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f_in = fw.tape().constant(fd.clone(), &[1, 3, 2, 2]).unwrap();
        let x = fw.tape().constant(xd.clone(), &[1, 3, 2, 2]).unwrap();
        let got = ese.fwd(&fw, &f_in, &x).unwrap().value();

        // Direct formula with raw weight access.
        let wv = s.value(ese.fc.w);
        let bv = s.value(ese.fc.b.unwrap());
        let pooled: Vec<f64> = (0..3)
            .map(|c| xd[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0)
            .collect();
        for c_out in 0..3 {
            let z: f64 =
                (0..3).map(|ci| pooled[ci] * wv[ci * 3 + c_out]).sum::<f64>() + bv[c_out];
            let gate = ((z + 3.0).clamp(0.0, 6.0)) / 6.0;
            for p in 0..4 {
                let want = fd[c_out * 4 + p] + gate * xd[c_out * 4 + p];
                let diff = (got[c_out * 4 + p] - want).abs();
                assert!(diff <= 1e-12, "c={c_out} p={p}: {diff}");
            }
        }
    }

    #[test]
    fn layer_norm_produces_zero_mean_unit_variance_rows() {
        let mut s = store();
        let ln = LayerNorm::new(&mut s, "ln", 6).unwrap();
        let fw = Forward::new(Tape::new(), &s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xd: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = fw.tape().constant(xd, &[4, 6]).unwrap();
        let y = ln.fwd(&fw, &x).unwrap().value();
        for row in y.chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn linear_and_conv_layers_have_gradients_for_all_params() {
        let mut s = store();
        let lin = Linear::new(&mut s, "lin", 3, 2, true).unwrap();
        let conv = Conv2dLayer::new(&mut s, "conv", 2, 2, 3, 1, 1, true).unwrap();
        let fw = Forward::new(Tape::new(), &s);
        let x = fw.tape().constant(vec![0.5; 4 * 3], &[4, 3]).unwrap();
        let img = fw.tape().constant(vec![0.5; 2 * 16], &[1, 2, 4, 4]).unwrap();
        let loss = lin
            .fwd(&fw, &x)
            .unwrap()
            .sum()
            .add(&conv.fwd(&fw, &img).unwrap().sum())
            .unwrap();
        loss.backward().unwrap();
        let grads = fw.grads();
        for p in [lin.w, lin.b.unwrap(), conv.w, conv.b.unwrap()] {
            assert!(grads[p.index()].is_some(), "missing grad for {}", s.name(p));
        }
    }
}
