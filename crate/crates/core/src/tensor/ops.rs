use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Negative slope of the leaky rectifier used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    LeakyRelu,
    SquaredRelu,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Valid contiguous output-column range for a stride-1 kernel tap at
/// horizontal offset `dx`: ox in [x0, x1) keeps ox+dx inside [0, wd).
#[inline]
fn col_range(ow: usize, wd: usize, dx: isize) -> Option<(usize, usize)> {
    let x0 = (-dx).max(0);
    let x1 = (ow as isize).min(wd as isize - dx);
    if x1 <= x0 {
        None
    } else {
        Some((x0 as usize, x1 as usize))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g, sinks| {
                if let Some(b) = sinks[0].as_mut() {
                    add_into(b, g);
                }
                if let Some(b) = sinks[1].as_mut() {
                    add_into(b, g);
                }
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g, sinks| {
                if let Some(b) = sinks[0].as_mut() {
                    add_into(b, g);
                }
                if let Some(b) = sinks[1].as_mut() {
                    for (d, &s) in b.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let xa = self.data_arc();
        let xb = other.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    for i in 0..g.len() {
                        buf[i] += g[i] * xb[i];
                    }
                }
                if let Some(buf) = sinks[1].as_mut() {
                    for i in 0..g.len() {
                        buf[i] += g[i] * xa[i];
                    }
                }
            },
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    for i in 0..g.len() {
                        buf[i] += g[i] * c;
                    }
                }
            },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::ONE)
    }

    /// Multiply every element by a learnable one-element tensor.
    pub fn mul_scalar_t(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::dimension(format!(
                "scalar multiplier must have one element, got {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let data: Vec<T> = self.data().iter().map(|&v| v * sv).collect();
        let xa = self.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    for i in 0..g.len() {
                        buf[i] += g[i] * sv;
                    }
                }
                if let Some(buf) = sinks[1].as_mut() {
                    let mut acc = T::ZERO;
                    for i in 0..g.len() {
                        acc += g[i] * xa[i];
                    }
                    buf[0] += acc;
                }
            },
        ))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| T::ONE / (T::ONE + (-v).exp()))
            .collect();
        let y = Arc::new(data.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (T::ONE - y[i]);
                    }
                }
            },
        )
    }

    pub fn leaky_relu(&self) -> Tensor<T> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v >= T::ZERO { v } else { v * slope })
            .collect();
        let x = self.data_arc();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    for i in 0..g.len() {
                        let d = if x[i] >= T::ZERO { T::ONE } else { slope };
                        buf[i] += g[i] * d;
                    }
                }
            },
        )
    }

    pub fn squared_relu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| {
                let r = v.maxv(T::ZERO);
                r * r
            })
            .collect();
        let x = self.data_arc();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(buf) = sinks[0].as_mut() {
                    let two = T::from_f64(2.0);
                    for i in 0..g.len() {
                        buf[i] += g[i] * two * x[i].maxv(T::ZERO);
                    }
                }
            },
        )
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        match kind {
            Activation::Sigmoid => self.sigmoid(),
            Activation::LeakyRelu => self.leaky_relu(),
            Activation::SquaredRelu => self.squared_relu(),
        }
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let n = self.numel();
        Tensor::from_op(vec![1], vec![acc], vec![self.clone()], move |g, sinks| {
            if let Some(buf) = sinks[0].as_mut() {
                for b in buf.iter_mut().take(n) {
                    *b += g[0];
                }
            }
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::ONE / T::from_f64(n as f64);
        self.sum_all().scale(inv)
    }

    /// Mean absolute difference with subgradient sign(0) = 0.
    pub fn l1_loss(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other)?;
        let n = self.numel();
        let mut acc = T::ZERO;
        for (&a, &b) in self.data().iter().zip(other.data()) {
            acc += (a - b).abs();
        }
        let inv_n = T::ONE / T::from_f64(n as f64);
        let xa = self.data_arc();
        let xb = other.data_arc();
        Ok(Tensor::from_op(
            vec![1],
            vec![acc * inv_n],
            vec![self.clone(), other.clone()],
            move |g, sinks| {
                let scale = g[0] * inv_n;
                for i in 0..xa.len() {
                    let d = xa[i] - xb[i];
                    let s = if d > T::ZERO {
                        T::ONE
                    } else if d < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    };
                    if let Some(buf) = sinks[0].as_mut() {
                        buf[i] += scale * s;
                    }
                    if let Some(buf) = sinks[1].as_mut() {
                        buf[i] -= scale * s;
                    }
                }
            },
        ))
    }

    /// Token-wise projection: x [R, Cin] · w [Cin, Cout], bias-free.
    pub fn linear(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cin) = self.dims2()?;
        let (win, cout) = w.dims2()?;
        if cin != win {
            return Err(Error::dimension(format!(
                "linear: inner dims {cin} vs {win}"
            )));
        }
        let x = self.data();
        let wd = w.data();
        let mut out = vec![T::ZERO; rows * cout];
        for r in 0..rows {
            let xr = &x[r * cin..(r + 1) * cin];
            let or = &mut out[r * cout..(r + 1) * cout];
            for (ci, &xv) in xr.iter().enumerate() {
                let wrow = &wd[ci * cout..(ci + 1) * cout];
                for (o, &wv) in or.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let xa = self.data_arc();
        let wa = w.data_arc();
        Ok(Tensor::from_op(
            vec![rows, cout],
            out,
            vec![self.clone(), w.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    for r in 0..rows {
                        let gr = &g[r * cout..(r + 1) * cout];
                        let dxr = &mut dx[r * cin..(r + 1) * cin];
                        for ci in 0..cin {
                            let wrow = &wa[ci * cout..(ci + 1) * cout];
                            let mut acc = T::ZERO;
                            for (gv, wv) in gr.iter().zip(wrow) {
                                acc += *gv * *wv;
                            }
                            dxr[ci] += acc;
                        }
                    }
                }
                if let Some(dw) = sinks[1].as_mut() {
                    for r in 0..rows {
                        let gr = &g[r * cout..(r + 1) * cout];
                        let xr = &xa[r * cin..(r + 1) * cin];
                        for (ci, &xv) in xr.iter().enumerate() {
                            let dwrow = &mut dw[ci * cout..(ci + 1) * cout];
                            for (d, gv) in dwrow.iter_mut().zip(gr) {
                                *d += xv * *gv;
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Per-token normalization over the trailing axis, then affine.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| {
            Error::dimension("layer_norm on rank-0 tensor".to_string())
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dimension(format!(
                "layer_norm affine must be [{c}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps <= T::ZERO {
            return Err(Error::usage("layer_norm eps must be positive".to_string()));
        }
        let rows = self.numel() / c;
        let x = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![T::ZERO; self.numel()];
        let mut xhat = vec![T::ZERO; self.numel()];
        let mut inv_std = vec![T::ZERO; rows];
        let inv_c = T::ONE / T::from_f64(c as f64);
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mut mu = T::ZERO;
            for &v in xr {
                mu += v;
            }
            mu *= inv_c;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_c;
            let istd = T::ONE / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (xr[i] - mu) * istd;
                xhat[r * c + i] = h;
                out[r * c + i] = gd[i] * h + bd[i];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let ga = gamma.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, sinks| {
                let inv_c = T::ONE / T::from_f64(c as f64);
                if let Some(dx) = sinks[0].as_mut() {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::ZERO; // mean of gamma*g
                        let mut m2 = T::ZERO; // mean of gamma*g*xhat
                        for i in 0..c {
                            let gg = ga[i] * gr[i];
                            m1 += gg;
                            m2 += gg * hr[i];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        let istd = inv_std[r];
                        let dxr = &mut dx[r * c..(r + 1) * c];
                        for i in 0..c {
                            dxr[i] += istd * (ga[i] * gr[i] - m1 - hr[i] * m2);
                        }
                    }
                }
                if let Some(dg) = sinks[1].as_mut() {
                    for r in 0..rows {
                        for i in 0..c {
                            dg[i] += g[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                if let Some(db) = sinks[2].as_mut() {
                    for r in 0..rows {
                        for i in 0..c {
                            db[i] += g[r * c + i];
                        }
                    }
                }
            },
        ))
    }

    /// Zero-padded cross-correlation, x [N,Cin,H,W] * w [Cout,Cin,k,k] + b [Cout].
    pub fn conv2d(
        &self,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, wd) = self.dims4()?;
        let (cout, wcin, k, k2) = w.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::dimension(format!(
                "conv2d kernel must be square and odd, got {k}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::dimension(format!(
                "conv2d channels: input {cin}, kernel expects {wcin}"
            )));
        }
        if b.shape() != [cout] {
            return Err(Error::dimension(format!(
                "conv2d bias must be [{cout}], got {:?}",
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d stride must be >= 1".to_string()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::geometry(format!(
                "conv2d input {h}x{wd} (pad {pad}) smaller than kernel {k}"
            )));
        }
        if (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 {
            return Err(Error::geometry(format!(
                "conv2d geometry not divisible: input {h}x{wd}, k {k}, pad {pad}, stride {stride}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let x = self.data();
        let wv = w.data();
        let bv = b.data();
        let mut out = vec![T::ZERO; n * cout * oh * ow];
        conv2d_forward(x, wv, bv, &mut out, n, cin, h, wd, cout, k, stride, pad, oh, ow);

        let xa = self.data_arc();
        let wa = w.data_arc();
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            vec![self.clone(), w.clone(), b.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    conv2d_backward_input(g, &wa, dx, n, cin, h, wd, cout, k, stride, pad, oh, ow);
                }
                if let Some(dw) = sinks[1].as_mut() {
                    conv2d_backward_weight(g, &xa, dw, n, cin, h, wd, cout, k, stride, pad, oh, ow);
                }
                if let Some(db) = sinks[2].as_mut() {
                    for ni in 0..n {
                        for co in 0..cout {
                            let base = (ni * cout + co) * oh * ow;
                            let mut acc = T::ZERO;
                            for &gv in &g[base..base + oh * ow] {
                                acc += gv;
                            }
                            db[co] += acc;
                        }
                    }
                }
            },
        ))
    }

    /// Per-channel zero-padded correlation, x [N,C,H,W] * w [C,k,k], same size.
    pub fn depthwise_conv2d(&self, w: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
        let (n, c, h, wd) = self.dims4()?;
        let (wc, k, k2) = w.dims3()?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::dimension(format!(
                "depthwise kernel must be square and odd, got {k}x{k2}"
            )));
        }
        if wc != c {
            return Err(Error::dimension(format!(
                "depthwise channels: input {c}, kernel {wc}"
            )));
        }
        if pad != k / 2 {
            return Err(Error::geometry(format!(
                "depthwise requires same-size padding {}, got {pad}",
                k / 2
            )));
        }
        let x = self.data();
        let wv = w.data();
        let mut out = vec![T::ZERO; self.numel()];
        let p = pad as isize;
        for nc in 0..n * c {
            let ch = nc % c;
            let xp = &x[nc * h * wd..(nc + 1) * h * wd];
            let op = &mut out[nc * h * wd..(nc + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = wv[(ch * k + ky) * k + kx];
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    for oy in 0..h as isize {
                        let iy = oy + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let Some((x0, x1)) = col_range(wd, wd, dx) else {
                            continue;
                        };
                        let orow = &mut op[oy as usize * wd + x0..oy as usize * wd + x1];
                        let xbase = iy as usize * wd + (x0 as isize + dx) as usize;
                        let xrow = &xp[xbase..xbase + (x1 - x0)];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += kv * xv;
                        }
                    }
                }
            }
        }
        let xa = self.data_arc();
        let wa = w.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), w.clone()],
            move |g, sinks| {
                let p = pad as isize;
                if let Some(dx) = sinks[0].as_mut() {
                    // adjoint of correlation: scatter through the kernel
                    for nc in 0..n * c {
                        let ch = nc % c;
                        let gp = &g[nc * h * wd..(nc + 1) * h * wd];
                        let dxp = &mut dx[nc * h * wd..(nc + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let kv = wa[(ch * k + ky) * k + kx];
                                let dy = ky as isize - p;
                                let dxo = kx as isize - p;
                                for oy in 0..h as isize {
                                    let iy = oy + dy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let Some((x0, x1)) = col_range(wd, wd, dxo) else {
                                        continue;
                                    };
                                    for ox in x0..x1 {
                                        let ix = (ox as isize + dxo) as usize;
                                        dxp[iy as usize * wd + ix] += kv * gp[oy as usize * wd + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = sinks[1].as_mut() {
                    for nc in 0..n * c {
                        let ch = nc % c;
                        let gp = &g[nc * h * wd..(nc + 1) * h * wd];
                        let xp = &xa[nc * h * wd..(nc + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let dy = ky as isize - p;
                                let dxo = kx as isize - p;
                                let mut acc = T::ZERO;
                                for oy in 0..h as isize {
                                    let iy = oy + dy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let Some((x0, x1)) = col_range(wd, wd, dxo) else {
                                        continue;
                                    };
                                    for ox in x0..x1 {
                                        let ix = (ox as isize + dxo) as usize;
                                        acc += gp[oy as usize * wd + ox] * xp[iy as usize * wd + ix];
                                    }
                                }
                                dw[(ch * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Rearrange [N, r²C, H, W] -> [N, C, rH, rW].
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (n, cr2, h, w) = self.dims4()?;
        if r == 0 || cr2 % (r * r) != 0 {
            return Err(Error::dimension(format!(
                "pixel_shuffle: {cr2} channels not divisible by r²={}",
                r * r
            )));
        }
        let c = cr2 / (r * r);
        let (oh, ow) = (h * r, w * r);
        let x = self.data();
        let mut out = vec![T::ZERO; self.numel()];
        let map = move |ni: usize, ci: usize, oy: usize, ox: usize| -> usize {
            let (i, di) = (oy / r, oy % r);
            let (j, dj) = (ox / r, ox % r);
            let src_c = ci * r * r + di * r + dj;
            ((ni * cr2 + src_c) * h + i) * w + j
        };
        let mut idx = 0;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[idx] = x[map(ni, ci, oy, ox)];
                        idx += 1;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    let mut idx = 0;
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    dx[map(ni, ci, oy, ox)] += g[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Inverse rearrangement of `pixel_shuffle`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (n, c, oh, ow) = self.dims4()?;
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(Error::dimension(format!(
                "pixel_unshuffle: spatial {oh}x{ow} not divisible by r={r}"
            )));
        }
        let (h, w) = (oh / r, ow / r);
        let cr2 = c * r * r;
        let x = self.data();
        let mut out = vec![T::ZERO; self.numel()];
        // dst[(n, c*r²+di*r+dj, i, j)] = src[(n, c, r*i+di, r*j+dj)]
        let map = move |ni: usize, ci: usize, oy: usize, ox: usize| -> usize {
            let (i, di) = (oy / r, oy % r);
            let (j, dj) = (ox / r, ox % r);
            let dst_c = ci * r * r + di * r + dj;
            ((ni * cr2 + dst_c) * h + i) * w + j
        };
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[map(ni, ci, oy, ox)] = x[((ni * c + ci) * oh + oy) * ow + ox];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, cr2, h, w],
            out,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    dx[((ni * c + ci) * oh + oy) * ow + ox] +=
                                        g[map(ni, ci, oy, ox)];
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.data().to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    add_into(dx, g);
                }
            },
        ))
    }

    /// Reorder the axes of a rank-4 tensor.
    pub fn permute4(&self, perm: [usize; 4]) -> Result<Tensor<T>> {
        let dims = self.dims4()?;
        let d = [dims.0, dims.1, dims.2, dims.3];
        {
            let mut seen = [false; 4];
            for &p in &perm {
                if p >= 4 || seen[p] {
                    return Err(Error::usage(format!("invalid permutation {perm:?}")));
                }
                seen[p] = true;
            }
        }
        let od = [d[perm[0]], d[perm[1]], d[perm[2]], d[perm[3]]];
        let in_strides = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
        let x = self.data();
        let mut out = vec![T::ZERO; self.numel()];
        let mut idx = 0;
        for a in 0..od[0] {
            for b in 0..od[1] {
                for c in 0..od[2] {
                    for e in 0..od[3] {
                        let oc = [a, b, c, e];
                        let mut src = 0;
                        for i in 0..4 {
                            src += oc[i] * in_strides[perm[i]];
                        }
                        out[idx] = x[src];
                        idx += 1;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            od.to_vec(),
            out,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    let mut idx = 0;
                    for a in 0..od[0] {
                        for b in 0..od[1] {
                            for c in 0..od[2] {
                                for e in 0..od[3] {
                                    let oc = [a, b, c, e];
                                    let mut src = 0;
                                    for i in 0..4 {
                                        src += oc[i] * in_strides[perm[i]];
                                    }
                                    dx[src] += g[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// [N,C,H,W] -> token layout [N, H·W, C], row-major over (H, W).
    pub fn nchw_to_tokens(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        self.permute4([0, 2, 3, 1])?.reshape(vec![n, h * w, c])
    }

    /// [N, H·W, C] -> [N,C,H,W].
    pub fn tokens_to_nchw(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let (n, t, c) = self.dims3()?;
        if t != h * w {
            return Err(Error::geometry(format!(
                "token count {t} does not match {h}x{w}"
            )));
        }
        self.reshape(vec![n, h, w, c])?.permute4([0, 3, 1, 2])
    }

    /// Row-major tokens of an H×W grid reordered column-major (and back,
    /// since the transpose of the transposed grid is the original).
    pub fn transpose_tokens(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let (n, t, c) = self.dims3()?;
        if t != h * w {
            return Err(Error::geometry(format!(
                "token count {t} does not match {h}x{w}"
            )));
        }
        self.reshape(vec![n, h, w, c])?
            .permute4([0, 2, 1, 3])?
            .reshape(vec![n, t, c])
    }

    /// Mean over the channel axis: [N,C,H,W] -> [N,1,H,W].
    pub fn channel_mean(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let x = self.data();
        let inv_c = T::ONE / T::from_f64(c as f64);
        let mut out = vec![T::ZERO; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let xp = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let op = &mut out[ni * hw..(ni + 1) * hw];
                for (o, &v) in op.iter_mut().zip(xp) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv_c;
        }
        Ok(Tensor::from_op(
            vec![n, 1, h, w],
            out,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    for ni in 0..n {
                        let gp = &g[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let dxp = &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for (d, &gv) in dxp.iter_mut().zip(gp) {
                                *d += gv * inv_c;
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Max over the channel axis: [N,C,H,W] -> [N,1,H,W]. Gradient routes to
    /// the first maximal channel.
    pub fn channel_max(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let x = self.data();
        let mut out = vec![T::ZERO; n * hw];
        let mut arg = vec![0u32; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut best = x[(ni * c) * hw + p];
                let mut bi = 0u32;
                for ci in 1..c {
                    let v = x[(ni * c + ci) * hw + p];
                    if v > best {
                        best = v;
                        bi = ci as u32;
                    }
                }
                out[ni * hw + p] = best;
                arg[ni * hw + p] = bi;
            }
        }
        let arg = Arc::new(arg);
        Ok(Tensor::from_op(
            vec![n, 1, h, w],
            out,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    for ni in 0..n {
                        for p in 0..hw {
                            let ci = arg[ni * hw + p] as usize;
                            dx[(ni * c + ci) * hw + p] += g[ni * hw + p];
                        }
                    }
                }
            },
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c1, h, w) = self.dims4()?;
        let (n2, c2, h2, w2) = other.dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::dimension(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![T::ZERO; n * (c1 + c2) * hw];
        for ni in 0..n {
            let dst = &mut out[ni * (c1 + c2) * hw..(ni + 1) * (c1 + c2) * hw];
            dst[..c1 * hw].copy_from_slice(&self.data()[ni * c1 * hw..(ni + 1) * c1 * hw]);
            dst[c1 * hw..].copy_from_slice(&other.data()[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        Ok(Tensor::from_op(
            vec![n, c1 + c2, h, w],
            out,
            vec![self.clone(), other.clone()],
            move |g, sinks| {
                for ni in 0..n {
                    let gp = &g[ni * (c1 + c2) * hw..(ni + 1) * (c1 + c2) * hw];
                    if let Some(da) = sinks[0].as_mut() {
                        add_into(
                            &mut da[ni * c1 * hw..(ni + 1) * c1 * hw],
                            &gp[..c1 * hw],
                        );
                    }
                    if let Some(db) = sinks[1].as_mut() {
                        add_into(
                            &mut db[ni * c2 * hw..(ni + 1) * c2 * hw],
                            &gp[c1 * hw..],
                        );
                    }
                }
            },
        ))
    }

    /// Select one item of a batched [N,C,H,W] tensor as [C,H,W].
    pub fn slice_batch(&self, index: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return Err(Error::dimension(format!(
                "slice_batch: index {index} out of {n}"
            )));
        }
        let len = c * h * w;
        let data = self.data()[index * len..(index + 1) * len].to_vec();
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    add_into(&mut dx[index * len..(index + 1) * len], g);
                }
            },
        ))
    }

    /// Stack K same-shaped [C,H,W] images into [K,C,H,W].
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::usage("stack_batch of nothing"))?;
        let shape = first.shape().to_vec();
        let len = first.numel();
        let mut data = Vec::with_capacity(items.len() * len);
        for it in items {
            if it.shape() != shape {
                return Err(Error::dimension(format!(
                    "stack_batch: {:?} vs {:?}",
                    it.shape(),
                    shape
                )));
            }
            data.extend_from_slice(it.data());
        }
        let mut out_shape = vec![items.len()];
        out_shape.extend_from_slice(&shape);
        let parents: Vec<Tensor<T>> = items.to_vec();
        Ok(Tensor::from_op(out_shape, data, parents, move |g, sinks| {
            for (i, sink) in sinks.iter_mut().enumerate() {
                if let Some(dp) = sink.as_mut() {
                    add_into(dp, &g[i * len..(i + 1) * len]);
                }
            }
        }))
    }

    /// Broadcast multiply [N,C,H,W] by a single-channel gate [N,1,H,W].
    pub fn mul_gate(&self, gate: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let (gn, gc, gh, gw) = gate.dims4()?;
        if gn != n || gc != 1 || gh != h || gw != w {
            return Err(Error::dimension(format!(
                "mul_gate: gate {:?} for input {:?}",
                gate.shape(),
                self.shape()
            )));
        }
        let hw = h * w;
        let x = self.data();
        let m = gate.data();
        let mut out = vec![T::ZERO; self.numel()];
        for ni in 0..n {
            let mp = &m[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] = x[base + p] * mp[p];
                }
            }
        }
        let xa = self.data_arc();
        let ma = gate.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gate.clone()],
            move |g, sinks| {
                if let Some(dx) = sinks[0].as_mut() {
                    for ni in 0..n {
                        let mp = &ma[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dx[base + p] += g[base + p] * mp[p];
                            }
                        }
                    }
                }
                if let Some(dm) = sinks[1].as_mut() {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                dm[ni * hw + p] += g[base + p] * xa[base + p];
                            }
                        }
                    }
                }
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let p = pad as isize;
    for ni in 0..n {
        for co in 0..cout {
            let op = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            op.fill(b[co]);
            for ci in 0..cin {
                let xp = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = w[((co * cin + ci) * k + ky) * k + kx];
                        if stride == 1 {
                            let dy = ky as isize - p;
                            let dx = kx as isize - p;
                            for oy in 0..oh as isize {
                                let iy = oy + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let Some((x0, x1)) = col_range(ow, wd, dx) else {
                                    continue;
                                };
                                let orow = &mut op[oy as usize * ow + x0..oy as usize * ow + x1];
                                let xbase = iy as usize * wd + (x0 as isize + dx) as usize;
                                let xrow = &xp[xbase..xbase + (x1 - x0)];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o += kv * xv;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride) as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride) as isize + kx as isize - p;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    op[oy * ow + ox] += kv * xp[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<T: Scalar>(
    g: &[T],
    w: &[T],
    dx: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let p = pad as isize;
    for ni in 0..n {
        for co in 0..cout {
            let gp = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let dxp = &mut dx[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = w[((co * cin + ci) * k + ky) * k + kx];
                        if stride == 1 {
                            let dy = ky as isize - p;
                            let dxo = kx as isize - p;
                            for oy in 0..oh as isize {
                                let iy = oy + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let Some((x0, x1)) = col_range(ow, wd, dxo) else {
                                    continue;
                                };
                                let grow = &gp[oy as usize * ow + x0..oy as usize * ow + x1];
                                let dbase = iy as usize * wd + (x0 as isize + dxo) as usize;
                                let drow = &mut dxp[dbase..dbase + (x1 - x0)];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += kv * gv;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride) as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride) as isize + kx as isize - p;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dxp[iy as usize * wd + ix as usize] += kv * gp[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight<T: Scalar>(
    g: &[T],
    x: &[T],
    dw: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let p = pad as isize;
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        let gp = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                        let xp = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                        if stride == 1 {
                            let dy = ky as isize - p;
                            let dxo = kx as isize - p;
                            for oy in 0..oh as isize {
                                let iy = oy + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let Some((x0, x1)) = col_range(ow, wd, dxo) else {
                                    continue;
                                };
                                let grow = &gp[oy as usize * ow + x0..oy as usize * ow + x1];
                                let xbase = iy as usize * wd + (x0 as isize + dxo) as usize;
                                let xrow = &xp[xbase..xbase + (x1 - x0)];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride) as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride) as isize + kx as isize - p;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += gp[oy * ow + ox] * xp[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};
    use crate::Rng;
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_to_nine() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0f64);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(vec![1]);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut rng = Rng::new(3);
        let x = t(vec![1, 2, 4, 5], (0..40).map(|_| rng.uniform()).collect());
        // center-1 kernels mapping channel i -> channel i
        let mut w = vec![0.0; 2 * 2 * 9];
        w[(0 * 2 + 0) * 9 + 4] = 1.0;
        w[(1 * 2 + 1) * 9 + 4] = 1.0;
        let w = t(vec![2, 2, 3, 3], w);
        let b = Tensor::zeros(vec![2]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_zero_input_gives_bias() {
        let x = Tensor::zeros(vec![2, 3, 4, 4]);
        let mut rng = Rng::new(5);
        let w = t(vec![2, 3, 3, 3], (0..54).map(|_| rng.uniform()).collect());
        let b = t(vec![2], vec![0.7, -0.2]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        for ni in 0..2 {
            for co in 0..2 {
                for p in 0..16 {
                    assert_eq!(y.data()[(ni * 2 + co) * 16 + p], b.data()[co]);
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 5, 5]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(vec![1]);
        // (5 - 3) % 2 == 0 is fine; (5 + 2 - 3) % 2 == 0 fine; try stride 3
        assert!(matches!(
            x.conv2d(&w, &b, 3, 0),
            Err(crate::Error::Geometry(_))
        ));
        let w_even = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(x.conv2d(&w_even, &b, 1, 0).is_err());
        let w_many = Tensor::<f64>::zeros(vec![1, 2, 3, 3]);
        assert!(matches!(
            x.conv2d(&w_many, &b, 1, 0),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_stride_two_matches_direct_sum() {
        let x = t(vec![1, 1, 5, 5], (0..25).map(|i| i as f64).collect());
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(vec![1]);
        let y = x.conv2d(&w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        // window sums at offsets (0,0), (0,2), (2,0), (2,2)
        let win = |oy: usize, ox: usize| -> f64 {
            (0..3)
                .flat_map(|dy| (0..3).map(move |dx| ((oy + dy) * 5 + ox + dx) as f64))
                .sum()
        };
        assert_eq!(y.data(), &[win(0, 0), win(0, 2), win(2, 0), win(2, 2)]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = Rng::new(7);
        let x = t(vec![1, 3, 4, 4], (0..48).map(|_| rng.uniform()).collect());
        let mut w = vec![0.0; 3 * 25];
        for c in 0..3 {
            w[c * 25 + 12] = 1.0;
        }
        let w = t(vec![3, 5, 5], w);
        let y = x.depthwise_conv2d(&w, 2).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_constant_interior_scaled_by_kernel_sum() {
        let c = 0.8f64;
        let x = Tensor::full(vec![1, 1, 9, 9], c);
        let mut rng = Rng::new(9);
        let wdata: Vec<f64> = (0..9).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let s: f64 = wdata.iter().sum();
        let w = t(vec![1, 3, 3], wdata);
        let y = x.depthwise_conv2d(&w, 1).unwrap();
        // interior pixels see the whole kernel; the border sees zero padding
        for oy in 1..8 {
            for ox in 1..8 {
                assert!((y.data()[oy * 9 + ox] - c * s).abs() < 1e-12);
            }
        }
        assert!((y.data()[0] - c * s).abs() > 1e-9 || s == 0.0 || w.data()[0] == 0.0);
    }

    #[test]
    fn depthwise_impulse_reflects_kernel() {
        // cross-correlation: out[o] = sum_k w[k] x[o + k - p], so an impulse
        // at the center paints the kernel reflected through it
        let mut x = vec![0.0; 25];
        x[2 * 5 + 2] = 1.0;
        let x = t(vec![1, 1, 5, 5], x);
        let wdata: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = t(vec![1, 3, 3], wdata.clone());
        let y = x.depthwise_conv2d(&w, 1).unwrap();
        for ky in 0..3usize {
            for kx in 0..3usize {
                let oy = (2 + 1) - ky; // oy + ky - 1 == 2
                let ox = (2 + 1) - kx;
                assert_eq!(y.data()[oy * 5 + ox], wdata[ky * 3 + kx]);
            }
        }
    }

    #[test]
    fn depthwise_channels_do_not_mix() {
        let mut x = vec![0.0; 2 * 9];
        x[4] = 1.0; // impulse only in channel 0
        let x = t(vec![1, 2, 3, 3], x);
        let w = t(vec![2, 3, 3], vec![0.5; 18]);
        let y = x.depthwise_conv2d(&w, 1).unwrap();
        assert!(y.data()[9..].iter().all(|&v| v == 0.0));
        assert!(y.data()[..9].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.linear(&eye).unwrap().data(), x.data());
        let z = Tensor::zeros(vec![2, 2]);
        assert!(z.linear(&eye).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_hand_product() {
        // [[1,2]] * [[a,b],[c,d]] = [[a+2c, b+2d]]
        let (a, b, c, d) = (0.3, -1.1, 2.0, 0.25);
        let x = t(vec![1, 2], vec![1.0, 2.0]);
        let w = t(vec![2, 2], vec![a, b, c, d]);
        let y = x.linear(&w).unwrap();
        assert!((y.data()[0] - (a + 2.0 * c)).abs() < 1e-15);
        assert!((y.data()[1] - (b + 2.0 * d)).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(vec![2, 4], 3.7f64);
        let g = Tensor::full(vec![4], 1.0f64);
        let b = Tensor::zeros(vec![4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_plus_minus_one_row() {
        let x = t(vec![1, 2], vec![1.0, -1.0]);
        let g = Tensor::full(vec![2], 1.0f64);
        let b = Tensor::zeros(vec![2]);
        let y = x.layer_norm(&g, &b, 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(2);
        let x = t(vec![3, 4], (0..12).map(|_| rng.uniform()).collect());
        let g = Tensor::zeros(vec![4]);
        let b = t(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for r in 0..3 {
            for i in 0..4 {
                assert_eq!(y.data()[r * 4 + i], b.data()[i]);
            }
        }
    }

    #[test]
    fn activation_values() {
        let x = t(vec![4], vec![0.0, -1.0, -3.0, 2.0]);
        assert_eq!(x.activation(Activation::Sigmoid).data()[0], 0.5);
        assert!((x.activation(Activation::LeakyRelu).data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(x.activation(Activation::SquaredRelu).data()[2], 0.0);
        assert_eq!(x.activation(Activation::SquaredRelu).data()[3], 4.0);
    }

    #[test]
    fn pixel_shuffle_definition_case() {
        let x = t(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        assert!(x.pixel_shuffle(2).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = t(vec![2], vec![1.0, 3.0]);
        let b = t(vec![2], vec![2.0, 5.0]);
        assert_eq!(a.l1_loss(&b).unwrap().data()[0], 1.5);
        assert_eq!(a.l1_loss(&a).unwrap().data()[0], 0.0);
        assert_eq!(b.l1_loss(&a).unwrap().data()[0], 1.5);
    }

    #[test]
    fn ops_are_pure() {
        let mut rng = Rng::new(17);
        let x = t(vec![1, 2, 6, 6], (0..72).map(|_| rng.uniform()).collect());
        let w = t(vec![2, 2, 3, 3], (0..36).map(|_| rng.uniform()).collect());
        let b = t(vec![2], vec![0.3, -0.4]);
        let y1 = x.conv2d(&w, &b, 1, 1).unwrap();
        let y2 = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn permute_tokens_roundtrip() {
        let mut rng = Rng::new(23);
        let x = t(vec![2, 3, 4, 5], (0..120).map(|_| rng.uniform()).collect());
        let tok = x.nchw_to_tokens().unwrap();
        assert_eq!(tok.shape(), [2, 20, 3]);
        let back = tok.tokens_to_nchw(4, 5).unwrap();
        assert_eq!(back.data(), x.data());
        let tt = tok.transpose_tokens(4, 5).unwrap();
        let ttt = tt.transpose_tokens(5, 4).unwrap();
        assert_eq!(ttt.data(), tok.data());
    }

    #[test]
    fn channel_reductions() {
        let x = t(vec![1, 2, 1, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let m = x.channel_mean().unwrap();
        assert_eq!(m.data(), &[2.0, 3.5]);
        let mx = x.channel_max().unwrap();
        assert_eq!(mx.data(), &[3.0, 5.0]);
    }

    #[test]
    fn concat_and_gate() {
        let a = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), [1, 2, 2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let gate = t(vec![1, 1, 2, 2], vec![0.5, 0.5, 2.0, 0.0]);
        let gc = c.mul_gate(&gate).unwrap();
        assert_eq!(gc.data(), &[0.5, 1.0, 6.0, 0.0, 2.5, 3.0, 14.0, 0.0]);
    }

    #[test]
    fn gradients_of_structured_ops() {
        let mut rng = Rng::new(31);
        // layer_norm wrt input
        let x = t(vec![3, 5], (0..15).map(|_| rng.uniform_in(-2.0, 2.0)).collect());
        let g = t(vec![5], (0..5).map(|_| rng.uniform_in(0.5, 1.5)).collect());
        let beta = t(vec![5], (0..5).map(|_| rng.uniform_in(-0.5, 0.5)).collect());
        let err = grad_check(
            |v| {
                let y = v.layer_norm(&g, &beta, 1e-5)?;
                y.mul(&y)?.sum_all().scale(0.5).add(&y.sum_all())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm dx err {err}");

        // layer_norm wrt affine
        let xc = x.clone();
        let err = grad_check(
            |gamma| xc.layer_norm(gamma, &beta, 1e-5).map(|y| y.mul(&y).unwrap().sum_all()),
            &g,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm dgamma err {err}");

        // linear both sides
        let w = t(vec![4, 3], (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let xi = t(vec![2, 4], (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let err = grad_check(|v| v.linear(&w).map(|y| y.mul(&y).unwrap().sum_all()), &xi, 1e-4).unwrap();
        assert!(err < 1e-6, "linear dx err {err}");
        let err = grad_check(|v| xi.linear(v).map(|y| y.mul(&y).unwrap().sum_all()), &w, 1e-4).unwrap();
        assert!(err < 1e-6, "linear dw err {err}");

        // conv2d wrt weights and bias
        let xi = t(vec![2, 2, 5, 5], (0..100).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let wc = t(vec![3, 2, 3, 3], (0..54).map(|_| rng.uniform_in(-0.7, 0.7)).collect());
        let bc = t(vec![3], vec![0.1, -0.2, 0.3]);
        let err = grad_check(|v| xi.conv2d(v, &bc, 1, 1).map(|y| y.mul(&y).unwrap().sum_all()), &wc, 1e-4).unwrap();
        assert!(err < 1e-5, "conv dw err {err}");
        let err = grad_check(|v| xi.conv2d(&wc, v, 1, 1).map(|y| y.mul(&y).unwrap().sum_all()), &bc, 1e-4).unwrap();
        assert!(err < 1e-6, "conv db err {err}");

        // depthwise wrt both
        let wd = t(vec![2, 3, 3], (0..18).map(|_| rng.uniform_in(-0.7, 0.7)).collect());
        let err = grad_check(|v| v.depthwise_conv2d(&wd, 1).map(|y| y.mul(&y).unwrap().sum_all()), &xi, 1e-4).unwrap();
        assert!(err < 1e-5, "depthwise dx err {err}");
        let err = grad_check(|v| xi.depthwise_conv2d(v, 1).map(|y| y.mul(&y).unwrap().sum_all()), &wd, 1e-4).unwrap();
        assert!(err < 1e-5, "depthwise dw err {err}");

        // reductions, gates, permutes
        let xg = t(vec![2, 3, 4, 4], (0..96).map(|_| rng.uniform_in(-2.0, 2.0)).collect());
        let err = grad_check(|v| Ok(v.channel_mean()?.mul_gate(&v.channel_max()?.sigmoid())?.sum_all()), &xg, 1e-4).unwrap();
        assert!(err < 1e-5, "reduction err {err}");
        let err = grad_check(|v| Ok(v.permute4([0, 2, 1, 3])?.mul(&v.permute4([0, 2, 1, 3])?)?.sum_all()), &xg, 1e-4).unwrap();
        assert!(err < 1e-6, "permute err {err}");
        let err = grad_check(|v| Ok(v.pixel_shuffle(2)?.squared_relu().sum_all()), &t(vec![1, 8, 3, 3], (0..72).map(|_| rng.uniform_in(0.2, 2.0)).collect()), 1e-4).unwrap();
        assert!(err < 1e-5, "pixel_shuffle err {err}");

        // l1 away from ties
        let a = t(vec![6], (0..6).map(|_| rng.uniform_in(-2.0, -0.5)).collect());
        let bt = t(vec![6], (0..6).map(|_| rng.uniform_in(0.5, 2.0)).collect());
        let err = grad_check(|v| v.l1_loss(&bt), &a, 1e-4).unwrap();
        assert!(err < 1e-6, "l1 err {err}");
    }

    #[test]
    fn mul_scalar_t_gradient() {
        let x = t(vec![3], vec![1.0, -2.0, 0.5]);
        let s = t(vec![1], vec![1.7]);
        let err = grad_check(|v| x.mul_scalar_t(v).map(|y| y.mul(&y).unwrap().sum_all()), &s, 1e-4).unwrap();
        assert!(err < 1e-8, "scalar mul err {err}");
    }

    proptest! {
        #[test]
        fn pixel_shuffle_is_bijective(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.below(2);
            let c = 1 + rng.below(3);
            let r = 1 + rng.below(3);
            let h = 1 + rng.below(4);
            let w = 1 + rng.below(4);
            let numel = n * c * r * r * h * w;
            let x = Tensor::<f64>::new(vec![n, c * r * r, h, w], (0..numel).map(|i| i as f64).collect()).unwrap();
            let y = x.pixel_shuffle(r).unwrap();
            let sum_x: f64 = x.data().iter().sum();
            let sum_y: f64 = y.data().iter().sum();
            prop_assert_eq!(sum_x, sum_y);
            let back = y.pixel_unshuffle(r).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn l1_symmetry_and_homogeneity(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.below(16);
            let a = Tensor::<f64>::new(vec![n], (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).unwrap();
            let b = Tensor::<f64>::new(vec![n], (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).unwrap();
            let c = rng.uniform_in(-2.0, 2.0);
            let lab = a.l1_loss(&b).unwrap().item().unwrap();
            let lba = b.l1_loss(&a).unwrap().item().unwrap();
            prop_assert_eq!(lab, lba);
            prop_assert!(lab >= 0.0);
            let lc = a.scale(c).l1_loss(&b.scale(c)).unwrap().item().unwrap();
            prop_assert!((lc - c.abs() * lab).abs() < 1e-12 * (1.0 + lab));
        }
    }

    #[test]
    fn backward_of_loss_detached_from_param() {
        let x = t(vec![2], vec![1.0, 2.0]).requires_grad();
        let unrelated = t(vec![2], vec![3.0, 4.0]).requires_grad();
        let loss = x.sum_all();
        backward(&loss).unwrap();
        assert!(unrelated.grad().is_none());
    }
}
