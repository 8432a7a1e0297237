//! Dense complex kernels shared by the tape's forward and backward passes.
//!
//! Every output element is produced by the same loop regardless of batch
//! size, so a row computed in a batch is bit-identical to the same row
//! computed alone.

use crate::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Complex dot product `sum_i w[i] * x[i]` with split accumulators.
#[inline]
pub(crate) fn cdot(w: &[C64], x: &[C64]) -> C64 {
    let n = w.len().min(x.len());
    let (mut r0, mut i0, mut r1, mut i1) = (0.0, 0.0, 0.0, 0.0);
    let pairs = n / 2;
    for p in 0..pairs {
        let a = w[2 * p];
        let b = x[2 * p];
        let c = w[2 * p + 1];
        let d = x[2 * p + 1];
        r0 += a.re * b.re - a.im * b.im;
        i0 += a.re * b.im + a.im * b.re;
        r1 += c.re * d.re - c.im * d.im;
        i1 += c.re * d.im + c.im * d.re;
    }
    if n % 2 == 1 {
        let a = w[n - 1];
        let b = x[n - 1];
        r0 += a.re * b.re - a.im * b.im;
        i0 += a.re * b.im + a.im * b.re;
    }
    C64::new(r0 + r1, i0 + i1)
}

/// `acc[i] += s * conj(x[i])`
#[inline]
pub(crate) fn caxpy_conj(acc: &mut [C64], s: C64, x: &[C64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        a.re += s.re * v.re + s.im * v.im;
        a.im += s.im * v.re - s.re * v.im;
    }
}

/// `y[b, o] = bias[o] + sum_i w[o, i] x[b, i]`
pub(crate) fn affine_forward(x: &[C64], w: &[C64], bias: Option<&[C64]>, batch: usize, n_in: usize, n_out: usize) -> alloc::vec::Vec<C64> {
    let mut y = alloc::vec![ZERO; batch * n_out];
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        let yr = &mut y[b * n_out..(b + 1) * n_out];
        for (o, out) in yr.iter_mut().enumerate() {
            let base = bias.map_or(ZERO, |bb| bb[o]);
            *out = base + cdot(&w[o * n_in..(o + 1) * n_in], xr);
        }
    }
    y
}

/// Accumulates input, weight and bias adjoints of [`affine_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward(
    gy: &[C64],
    x: &[C64],
    w: &[C64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    mut gx: Option<&mut [C64]>,
    mut gw: Option<&mut [C64]>,
    mut gb: Option<&mut [C64]>,
) {
    for b in 0..batch {
        let gyr = &gy[b * n_out..(b + 1) * n_out];
        let xr = &x[b * n_in..(b + 1) * n_in];
        for (o, &g) in gyr.iter().enumerate() {
            if g == ZERO {
                continue;
            }
            let wr = &w[o * n_in..(o + 1) * n_in];
            if let Some(gx) = gx.as_deref_mut() {
                caxpy_conj(&mut gx[b * n_in..(b + 1) * n_in], g, wr);
            }
            if let Some(gw) = gw.as_deref_mut() {
                caxpy_conj(&mut gw[o * n_in..(o + 1) * n_in], g, xr);
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += g;
            }
        }
    }
}

/// Geometry of a 1-D (transposed) convolution over `[batch, channels, len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing outputs of a transposed convolution (ignored by
    /// forward convolutions).
    pub output_padding: usize,
}

impl ConvGeom {
    /// Output length of a forward convolution, `floor((n + 2p - k)/s) + 1`.
    pub fn conv_out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output length of a transposed convolution,
    /// `(n - 1) s - 2p + k + output_padding`.
    pub fn transposed_out_len(&self, len: usize) -> Option<usize> {
        if len == 0 || self.stride == 0 {
            return None;
        }
        let full = (len - 1) * self.stride + self.kernel + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&n| n > 0)
    }
}

pub(crate) fn conv1d_forward(x: &[C64], k: &[C64], bias: Option<&[C64]>, batch: usize, len: usize, g: &ConvGeom) -> (alloc::vec::Vec<C64>, usize) {
    let lout = g.conv_out_len(len).expect("validated geometry");
    let mut y = alloc::vec![ZERO; batch * g.out_ch * lout];
    for b in 0..batch {
        for co in 0..g.out_ch {
            let yrow = &mut y[(b * g.out_ch + co) * lout..(b * g.out_ch + co + 1) * lout];
            let base = bias.map_or(ZERO, |bb| bb[co]);
            for (t, out) in yrow.iter_mut().enumerate() {
                let mut acc = base;
                let start = (t * g.stride) as isize - g.padding as isize;
                for ci in 0..g.in_ch {
                    let xrow = &x[(b * g.in_ch + ci) * len..(b * g.in_ch + ci + 1) * len];
                    let krow = &k[(co * g.in_ch + ci) * g.kernel..(co * g.in_ch + ci + 1) * g.kernel];
                    for (j, &kv) in krow.iter().enumerate() {
                        let idx = start + j as isize;
                        if idx >= 0 && (idx as usize) < len {
                            acc += kv * xrow[idx as usize];
                        }
                    }
                }
                *out = acc;
            }
        }
    }
    (y, lout)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    gy: &[C64],
    x: &[C64],
    k: &[C64],
    batch: usize,
    len: usize,
    g: &ConvGeom,
    mut gx: Option<&mut [C64]>,
    mut gk: Option<&mut [C64]>,
    mut gb: Option<&mut [C64]>,
) {
    let lout = g.conv_out_len(len).expect("validated geometry");
    for b in 0..batch {
        for co in 0..g.out_ch {
            let gyrow = &gy[(b * g.out_ch + co) * lout..(b * g.out_ch + co + 1) * lout];
            for (t, &gv) in gyrow.iter().enumerate() {
                if let Some(gb) = gb.as_deref_mut() {
                    gb[co] += gv;
                }
                let start = (t * g.stride) as isize - g.padding as isize;
                for ci in 0..g.in_ch {
                    let xoff = (b * g.in_ch + ci) * len;
                    let koff = (co * g.in_ch + ci) * g.kernel;
                    for j in 0..g.kernel {
                        let idx = start + j as isize;
                        if idx < 0 || idx as usize >= len {
                            continue;
                        }
                        let xi = xoff + idx as usize;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xi] += gv * k[koff + j].conj();
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[koff + j] += gv * x[xi].conj();
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution; kernel layout `[in_ch, out_ch, kernel]`.
pub(crate) fn conv_t1d_forward(x: &[C64], k: &[C64], bias: Option<&[C64]>, batch: usize, len: usize, g: &ConvGeom) -> (alloc::vec::Vec<C64>, usize) {
    let lout = g.transposed_out_len(len).expect("validated geometry");
    let mut y = alloc::vec![ZERO; batch * g.out_ch * lout];
    for b in 0..batch {
        for co in 0..g.out_ch {
            let base = bias.map_or(ZERO, |bb| bb[co]);
            let yoff = (b * g.out_ch + co) * lout;
            for v in &mut y[yoff..yoff + lout] {
                *v = base;
            }
            for ci in 0..g.in_ch {
                let xoff = (b * g.in_ch + ci) * len;
                let koff = (ci * g.out_ch + co) * g.kernel;
                for t in 0..len {
                    let xv = x[xoff + t];
                    let start = (t * g.stride) as isize - g.padding as isize;
                    for j in 0..g.kernel {
                        let idx = start + j as isize;
                        if idx >= 0 && (idx as usize) < lout {
                            y[yoff + idx as usize] += k[koff + j] * xv;
                        }
                    }
                }
            }
        }
    }
    (y, lout)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t1d_backward(
    gy: &[C64],
    x: &[C64],
    k: &[C64],
    batch: usize,
    len: usize,
    g: &ConvGeom,
    mut gx: Option<&mut [C64]>,
    mut gk: Option<&mut [C64]>,
    mut gb: Option<&mut [C64]>,
) {
    let lout = g.transposed_out_len(len).expect("validated geometry");
    for b in 0..batch {
        for co in 0..g.out_ch {
            let yoff = (b * g.out_ch + co) * lout;
            if let Some(gb) = gb.as_deref_mut() {
                for v in &gy[yoff..yoff + lout] {
                    gb[co] += *v;
                }
            }
            for ci in 0..g.in_ch {
                let xoff = (b * g.in_ch + ci) * len;
                let koff = (ci * g.out_ch + co) * g.kernel;
                for t in 0..len {
                    let start = (t * g.stride) as isize - g.padding as isize;
                    for j in 0..g.kernel {
                        let idx = start + j as isize;
                        if idx < 0 || idx as usize >= lout {
                            continue;
                        }
                        let gv = gy[yoff + idx as usize];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xoff + t] += gv * k[koff + j].conj();
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[koff + j] += gv * x[xoff + t].conj();
                        }
                    }
                }
            }
        }
    }
}
