//! Differentiable building blocks recorded on a [`Graph`].
//!
//! Layouts: `linear` and `layer_norm` act on the trailing axis;
//! `dwconv3x3` expects channels-last `[B, H, W, C]`; `conv3x3` expects
//! channels-first `[B, C, H, W]`.

use std::sync::Arc;

use crate::autograd::{Backward, GradSink, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a(m×k) · b(k×n) + beta·c`, with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * n + (n - 1) < c.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative from the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

struct AddOp(Vec<Var>);

impl Backward for AddOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        for &p in &self.0 {
            sink.accumulate(p, grad);
        }
    }
}

struct MulOp(Var, Var);

impl Backward for MulOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let (a, b) = (values[self.0.index()].data(), values[self.1.index()].data());
        if sink.wants(self.0) {
            let s = sink.slot(self.0);
            for i in 0..grad.len() {
                s[i] += grad[i] * b[i];
            }
        }
        if sink.wants(self.1) {
            let s = sink.slot(self.1);
            for i in 0..grad.len() {
                s[i] += grad[i] * a[i];
            }
        }
    }
}

struct ScaleOp(Var, f64);

impl Backward for ScaleOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        if sink.wants(self.0) {
            let s = sink.slot(self.0);
            for (s, g) in s.iter_mut().zip(grad) {
                *s += g * self.1;
            }
        }
    }
}

struct UnaryOp(Var, Activation);

impl Backward for UnaryOp {
    fn backward(&self, out: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let x = values[self.0.index()].data();
        let y = values[out.index()].data();
        let act = self.1;
        let s = sink.slot(self.0);
        for i in 0..grad.len() {
            s[i] += grad[i] * act.derivative(x[i], y[i]);
        }
    }
}

struct GatherOp {
    src: Var,
    index: Arc<[usize]>,
}

impl Backward for GatherOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        let s = sink.slot(self.src);
        for (&j, g) in self.index.iter().zip(grad) {
            s[j] += g;
        }
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Backward for LinearOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let (m, k, n) = (self.rows, self.fan_in, self.fan_out);
        let x = values[self.x.index()].data();
        let w = values[self.w.index()].data();
        if sink.wants(self.x) {
            // gx[m,k] += gy[m,n] · W[n,k]
            gemm(m, n, k, grad, n, 1, w, k, 1, sink.slot(self.x), 1.0);
        }
        if sink.wants(self.w) {
            // gW[n,k] += gyᵀ[n,m] · x[m,k]
            gemm(n, m, k, grad, 1, n, x, k, 1, sink.slot(self.w), 1.0);
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                let s = sink.slot(b);
                for row in grad.chunks_exact(n) {
                    for (s, g) in s.iter_mut().zip(row) {
                        *s += g;
                    }
                }
            }
        }
    }
}

struct LayerNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    width: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl Backward for LayerNormOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let c = self.width;
        let gamma = values[self.gamma.index()].data();
        if sink.wants(self.gamma) {
            let s = sink.slot(self.gamma);
            for (g, xh) in grad.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for j in 0..c {
                    s[j] += g[j] * xh[j];
                }
            }
        }
        if sink.wants(self.beta) {
            let s = sink.slot(self.beta);
            for g in grad.chunks_exact(c) {
                for j in 0..c {
                    s[j] += g[j];
                }
            }
        }
        if sink.wants(self.x) {
            let s = sink.slot(self.x);
            for (r, ((g, xh), sx)) in grad
                .chunks_exact(c)
                .zip(self.xhat.chunks_exact(c))
                .zip(s.chunks_exact_mut(c))
                .enumerate()
            {
                let mut mean_dy = 0.0;
                let mut mean_dy_xh = 0.0;
                for j in 0..c {
                    let dy = g[j] * gamma[j];
                    mean_dy += dy;
                    mean_dy_xh += dy * xh[j];
                }
                mean_dy /= c as f64;
                mean_dy_xh /= c as f64;
                let rstd = self.rstd[r];
                for j in 0..c {
                    let dy = g[j] * gamma[j];
                    sx[j] += rstd * (dy - mean_dy - xh[j] * mean_dy_xh);
                }
            }
        }
    }
}

struct ClampOp {
    x: Var,
    lo: f64,
    hi: f64,
}

impl Backward for ClampOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let x = values[self.x.index()].data();
        let s = sink.slot(self.x);
        for i in 0..grad.len() {
            if x[i] > self.lo && x[i] < self.hi {
                s[i] += grad[i];
            }
        }
    }
}

struct SelectRowsOp {
    mask: Vec<bool>,
    on: Var,
    off: Var,
    row: usize,
}

impl Backward for SelectRowsOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        for (target, pick) in [(self.on, true), (self.off, false)] {
            if !sink.wants(target) {
                continue;
            }
            let s = sink.slot(target);
            for (b, &m) in self.mask.iter().enumerate() {
                if m == pick {
                    let r = b * self.row..(b + 1) * self.row;
                    for (s, g) in s[r.clone()].iter_mut().zip(&grad[r]) {
                        *s += g;
                    }
                }
            }
        }
    }
}

struct DwConvOp {
    x: Var,
    w: Var,
    b: Var,
    dims: [usize; 4],
}

impl Backward for DwConvOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let [bn, h, w, c] = self.dims;
        let x = values[self.x.index()].data();
        let wt = values[self.w.index()].data();
        let mut gx = sink.wants(self.x).then(|| vec![0.0; x.len()]);
        let mut gw = sink.wants(self.w).then(|| vec![0.0; wt.len()]);
        let mut gb = sink.wants(self.b).then(|| vec![0.0; c]);
        for b in 0..bn {
            for i in 0..h {
                for j in 0..w {
                    let o = ((b * h + i) * w + j) * c;
                    let go = &grad[o..o + c];
                    if let Some(gb) = gb.as_mut() {
                        for ch in 0..c {
                            gb[ch] += go[ch];
                        }
                    }
                    for (k, (di, dj)) in TAPS.iter().enumerate() {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        let src = ((b * h + ii as usize) * w + jj as usize) * c;
                        let wk = &wt[k * c..(k + 1) * c];
                        if let Some(gx) = gx.as_mut() {
                            for ch in 0..c {
                                gx[src + ch] += go[ch] * wk[ch];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            for ch in 0..c {
                                gw[k * c + ch] += go[ch] * x[src + ch];
                            }
                        }
                    }
                }
            }
        }
        if let Some(g) = gx {
            sink.accumulate_owned(self.x, g);
        }
        if let Some(g) = gw {
            sink.accumulate_owned(self.w, g);
        }
        if let Some(g) = gb {
            sink.accumulate_owned(self.b, g);
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

struct ConvOp {
    x: Var,
    w: Var,
    b: Var,
    dims: [usize; 4],
    cout: usize,
}

impl Backward for ConvOp {
    fn backward(&self, _: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>) {
        let [bn, cin, h, w] = self.dims;
        let cout = self.cout;
        let x = values[self.x.index()].data();
        let wt = values[self.w.index()].data();
        let mut gx = sink.wants(self.x).then(|| vec![0.0; x.len()]);
        let mut gw = sink.wants(self.w).then(|| vec![0.0; wt.len()]);
        let mut gb = sink.wants(self.b).then(|| vec![0.0; cout]);
        let plane = h * w;
        for b in 0..bn {
            for co in 0..cout {
                let go = &grad[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                if let Some(gb) = gb.as_mut() {
                    gb[co] += go.iter().sum::<f64>();
                }
                for ci in 0..cin {
                    let xs = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                    for (k, (di, dj)) in TAPS.iter().enumerate() {
                        let widx = (co * cin + ci) * 9 + k;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let ii = i as isize + di;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let jj = j as isize + dj;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let src = ii as usize * w + jj as usize;
                                let g = go[i * w + j];
                                acc += g * xs[src];
                                if let Some(gx) = gx.as_mut() {
                                    gx[(b * cin + ci) * plane + src] += g * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(g) = gx {
            sink.accumulate_owned(self.x, g);
        }
        if let Some(g) = gw {
            sink.accumulate_owned(self.w, g);
        }
        if let Some(g) = gb {
            sink.accumulate_owned(self.b, g);
        }
    }
}

struct ReshapeOp(Var);

impl Backward for ReshapeOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        sink.accumulate(self.0, grad);
    }
}

struct WeightedSumOp(Var, Vec<f64>);

impl Backward for WeightedSumOp {
    fn backward(&self, _: Var, grad: &[f64], _: &[Tensor], sink: &mut GradSink<'_>) {
        let s = sink.slot(self.0);
        for (s, w) in s.iter_mut().zip(&self.1) {
            *s += grad[0] * w;
        }
    }
}

impl Graph {
    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            out.check_same_shape(v, "add")?;
            for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, AddOp(parts.to_vec()), parts))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, MulOp(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, ScaleOp(a, s), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).map(|x| act.apply(x));
        self.push(out, UnaryOp(a, act), &[a])
    }

    /// `out[i] = src[index[i]]`, reshaped to `shape`. Covers permutations,
    /// transposes, slicing, patch rearrangement and nearest upsampling.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let s = self.value(src).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "gather index of length {} for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range")));
        }
        let data = index.iter().map(|&i| s[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, GatherOp { src, index }, &[src]))
    }

    /// `y = x Wᵀ + b` over the trailing axis. `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let &[fan_out, fan_in] = wv.shape() else {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", wv.shape())));
        };
        if xv.shape().last() != Some(&fan_in) {
            return Err(Error::Shape(format!(
                "linear expects trailing dim {fan_in}, got {:?}",
                xv.shape()
            )));
        }
        let rows = xv.len() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fan_out {
                return Err(Error::Shape("linear bias length".into()));
            }
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(rows, fan_in, fan_out, xv.data(), fan_in, 1, wv.data(), 1, fan_in, &mut out, 1.0);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let out = Tensor::new(&shape, out)?;
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(
            out,
            LinearOp {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            &parents,
        ))
    }

    /// Normalises the trailing axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape("layer_norm affine length".into()));
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let keep = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            out,
            LayerNormOp {
                x,
                gamma,
                beta,
                width: c,
                xhat: if keep { xhat } else { Vec::new() },
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, ClampOp { x, lo, hi }, &[x])
    }

    /// Per-batch-row choice: row `b` is taken from `on` where `mask[b]`,
    /// otherwise from `off`. Values are copied, never blended.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (a, b) = (self.value(on), self.value(off));
        a.check_same_shape(b, "select_rows")?;
        let bn = a.shape().first().copied().unwrap_or(0);
        if bn != mask.len() {
            return Err(Error::Shape(format!("mask of {} rows for batch {bn}", mask.len())));
        }
        let row = if bn == 0 { 0 } else { a.len() / bn };
        let mut data = b.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[i * row..(i + 1) * row].copy_from_slice(&a.data()[i * row..(i + 1) * row]);
            }
        }
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.push(
            out,
            SelectRowsOp {
                mask: mask.to_vec(),
                on,
                off,
                row,
            },
            &[on, off],
        ))
    }

    /// Depthwise 3×3 convolution, zero padding, channels-last.
    /// `w` is `[3, 3, C]`, `b` is `[C]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims @ [bn, h, wd, c] = self.value(x).dims4()?;
        if self.value(w).len() != 9 * c || self.value(b).len() != c {
            return Err(Error::Shape("dwconv3x3 weight/bias size".into()));
        }
        let xv = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..bn {
            for i in 0..h {
                for j in 0..wd {
                    let o = ((bi * h + i) * wd + j) * c;
                    out[o..o + c].copy_from_slice(bias);
                    for (k, (di, dj)) in TAPS.iter().enumerate() {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + ii as usize) * wd + jj as usize) * c;
                        let wk = &wt[k * c..(k + 1) * c];
                        for ch in 0..c {
                            out[o + ch] += wk[ch] * xv[src + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&dims, out)?;
        Ok(self.push(out, DwConvOp { x, w, b, dims }, &[x, w, b]))
    }

    /// Dense 3×3 convolution, zero padding, channels-first.
    /// `w` is `[C_out, C_in, 3, 3]`, `b` is `[C_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims @ [bn, cin, h, wd] = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv3x3 weight {ws:?} for {cin} input channels")));
        }
        let cout = ws[0];
        if self.value(b).len() != cout {
            return Err(Error::Shape("conv3x3 bias size".into()));
        }
        let xv = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let plane = h * wd;
        let mut out = vec![0.0; bn * cout * plane];
        for bi in 0..bn {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
                o.iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..cin {
                    let xs = &xv[(bi * cin + ci) * plane..(bi * cin + ci + 1) * plane];
                    for (k, (di, dj)) in TAPS.iter().enumerate() {
                        let wv = wt[(co * cin + ci) * 9 + k];
                        for i in 0..h {
                            let ii = i as isize + di;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let row = ii as usize * wd;
                            for j in 0..wd {
                                let jj = j as isize + dj;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                o[i * wd + j] += wv * xs[row + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bn, cout, h, wd], out)?;
        Ok(self.push(
            out,
            ConvOp {
                x,
                w,
                b,
                dims,
                cout,
            },
            &[x, w, b],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, ReshapeOp(x), &[x]))
    }

    /// Scalar `Σ x ⊙ weights`; used to reduce outputs in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        self.value(x).check_same_shape(weights, "weighted_sum")?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), WeightedSumOp(x, weights.data().to_vec()), &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn check(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> GradCheck {
        check_input_gradient(&inputs, 1e-5, 200, 7, |g, vars| f(g, vars))
    }

    #[test]
    fn gemm_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 5], &mut rng);
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, a.data(), 4, 1, b.data(), 5, 1, &mut c, 0.0);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 5 + j]).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = check(
            vec![rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[5, 4], &mut rng), rand_tensor(&[5], &mut rng)],
            |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
        );
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = check(
            vec![rand_tensor(&[3, 6], &mut rng), rand_tensor(&[6], &mut rng), rand_tensor(&[6], &mut rng)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
        assert!(r.passed(1e-5), "{r:?}");
    }

    #[test]
    fn activation_gradients() {
        for act in [Activation::Silu, Activation::Sigmoid, Activation::Softplus, Activation::Tanh] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let r = check(vec![rand_tensor(&[10], &mut rng).map(|x| 3.0 * x)], |g, v| {
                g.activation(v[0], act)
            });
            assert!(r.passed(1e-6), "{act:?} {r:?}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = check(
            vec![rand_tensor(&[2, 2, 4, 5], &mut rng), rand_tensor(&[3, 2, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)],
            |g, v| g.conv3x3(v[0], v[1], v[2]).unwrap(),
        );
        assert!(r.passed(1e-6), "{r:?}");
        let r = check(
            vec![rand_tensor(&[2, 4, 5, 3], &mut rng), rand_tensor(&[3, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)],
            |g, v| g.dwconv3x3(v[0], v[1], v[2]).unwrap(),
        );
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn gather_mul_select_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let idx: Arc<[usize]> = vec![3, 0, 0, 5, 1, 2].into();
        let r = check(
            vec![rand_tensor(&[2, 3], &mut rng), rand_tensor(&[2, 3], &mut rng)],
            |g, v| {
                let p = g.gather(v[0], idx.clone(), &[2, 3]).unwrap();
                let m = g.mul(p, v[1]).unwrap();
                g.select_rows(&[true, false], m, v[0]).unwrap()
            },
        );
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn select_rows_copies_off_rows_bitwise() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 3], 7.0));
        let b = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.3));
        let s = g.select_rows(&[false, true], a, b).unwrap();
        assert_eq!(&g.value(s).data()[..3], &g.value(b).data()[..3]);
        assert_eq!(&g.value(s).data()[3..], &[7.0; 3]);
    }

    #[test]
    fn inverse_softplus_roundtrip() {
        for y in [1e-3, 0.01, 0.1, 1.0, 5.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
