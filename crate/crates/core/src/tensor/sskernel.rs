//! The selective-scan recurrence kernel and its reverse sweep.
//!
//! Forward, per channel `i` and state index `j`:
//!
//! ```text
//! Ā_t[i,j] = exp(Δ_t[i]·A[i,j])            (zero-order hold)
//! h_t[i,j] = Ā_t[i,j]·h_{t−1}[i,j] + Δ_t[i]·B_t[j]·x_t[i]
//! y_t[i]   = Σ_j C_t[j]·h_t[i,j] + D[i]·x_t[i]
//! ```
//!
//! The hidden states `h_t` and the discretized factors `Ā_t` are saved; the
//! backward pass is then one reverse sweep using
//! `∂h_t/∂h_{t−1} = Ā_t` and the product rule on each term above.

use super::ops::ScanRecord;
use super::Node;

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    l: usize,
    d: usize,
    n: usize,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dskip: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; l * d];
    let mut h_all = vec![0.0; l * d * n];
    let mut abar_all = vec![0.0; l * d * n];
    let mut h = vec![0.0; d * n];
    for t in 0..l {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for i in 0..d {
            let dt = delta[t * d + i];
            let xt = x[t * d + i];
            let dx = dt * xt;
            let arow = &a[i * n..(i + 1) * n];
            let hrow = &mut h[i * n..(i + 1) * n];
            let habs = &mut h_all[(t * d + i) * n..(t * d + i + 1) * n];
            let aabs = &mut abar_all[(t * d + i) * n..(t * d + i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                let abar = (dt * arow[j]).exp();
                let hv = abar * hrow[j] + dx * bt[j];
                hrow[j] = hv;
                habs[j] = hv;
                aabs[j] = abar;
                acc += ct[j] * hv;
            }
            y[t * d + i] = acc + dskip[i] * xt;
        }
    }
    (y, h_all, abar_all)
}

pub(crate) fn scan_backward(
    nodes: &[Node],
    rec: &ScanRecord,
    gy: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (l, d, n) = (rec.l, rec.dim, rec.n);
    let x = &nodes[rec.x].data;
    let delta = &nodes[rec.delta].data;
    let a = &nodes[rec.a].data;
    let b = &nodes[rec.b].data;
    let c = &nodes[rec.c].data;
    let dskip = &nodes[rec.d].data;

    // Accumulate into local buffers first, then add into the tape slots once;
    // this keeps the hot loop free of Option bookkeeping.
    let mut gx = vec![0.0; l * d];
    let mut gdelta = vec![0.0; l * d];
    let mut ga = vec![0.0; d * n];
    let mut gb = vec![0.0; l * n];
    let mut gc = vec![0.0; l * n];
    let mut gdskip = vec![0.0; d];
    // Running ∂loss/∂h_t, updated during the reverse sweep.
    let mut gh = vec![0.0; d * n];

    for t in (0..l).rev() {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        let gbt = &mut gb[t * n..(t + 1) * n];
        let gct = &mut gc[t * n..(t + 1) * n];
        for i in 0..d {
            let gyv = gy[t * d + i];
            let dt = delta[t * d + i];
            let xt = x[t * d + i];
            let arow = &a[i * n..(i + 1) * n];
            let garow = &mut ga[i * n..(i + 1) * n];
            let ghrow = &mut gh[i * n..(i + 1) * n];
            let habs = &rec.h[(t * d + i) * n..(t * d + i + 1) * n];
            let aabs = &rec.abar[(t * d + i) * n..(t * d + i + 1) * n];
            // y_t contributions.
            gdskip[i] += gyv * xt;
            let mut gx_ti = gyv * dskip[i];
            let mut gdelta_ti = 0.0;
            for j in 0..n {
                let ghv = ghrow[j] + gyv * ct[j];
                gct[j] += gyv * habs[j];
                // h_t = Ā·h_{t−1} + Δ·B·x, with Ā = exp(Δ·A).
                let h_prev = if t > 0 {
                    rec.h[((t - 1) * d + i) * n + j]
                } else {
                    0.0
                };
                let abar = aabs[j];
                let through_abar = ghv * h_prev * abar;
                garow[j] += through_abar * dt;
                gdelta_ti += through_abar * arow[j] + ghv * bt[j] * xt;
                gbt[j] += ghv * dt * xt;
                gx_ti += ghv * dt * bt[j];
                ghrow[j] = ghv * abar;
            }
            gx[t * d + i] += gx_ti;
            gdelta[t * d + i] += gdelta_ti;
        }
    }

    let pairs: [(usize, &[f64]); 6] = [
        (rec.x, &gx),
        (rec.delta, &gdelta),
        (rec.a, &ga),
        (rec.b, &gb),
        (rec.c, &gc),
        (rec.d, &gdskip),
    ];
    for (id, local) in pairs {
        if !nodes[id].needs_grad {
            continue;
        }
        let g = grads[id].get_or_insert_with(|| vec![0.0; local.len()]);
        for (gi, &lv) in g.iter_mut().zip(local.iter()) {
            *gi += lv;
        }
    }
}
