//! Radix-2 complex FFT for power-of-two lengths.
//!
//! Kept in-crate because the core is `no_std`. Frame analysis (1024 points),
//! long FFT convolution and RIR transfer functions all use power-of-two sizes.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::{Error, Result, C64};

/// Precomputed twiddles and bit-reversal table for one transform length.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<C64>,
    rev: Vec<u32>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(alloc::format!(
                "FFT length {n} is not a power of two"
            )));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let ang = -2.0 * PI * k as f64 / n as f64;
                C64::new(ang.cos(), ang.sin())
            })
            .collect();
        Ok(Self { n, twiddles, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X[k] = sum_n x[n] e^{-j 2 pi k n / N}`.
    pub fn forward(&self, buf: &mut [C64]) {
        self.transform(buf, false);
    }

    /// In-place inverse transform including the `1/N` factor.
    pub fn inverse(&self, buf: &mut [C64]) {
        self.transform(buf, true);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    fn transform(&self, buf: &mut [C64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "FFT buffer length");
        for i in 0..self.n {
            let j = self.rev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= self.n {
            let half = size / 2;
            let step = self.n / size;
            for start in (0..self.n).step_by(size) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }

    /// Forward transform of a real sequence, returning the `N/2 + 1`
    /// non-redundant bins.
    pub fn forward_real(&self, x: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        buf.resize(self.n, C64::new(0.0, 0.0));
        self.forward(&mut buf);
        buf.truncate(self.n / 2 + 1);
        buf
    }

    /// Inverse of [`Fft::forward_real`]: Hermitian extension, inverse FFT,
    /// real part. Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn inverse_real(&self, half: &[C64]) -> Vec<f64> {
        let n = self.n;
        let mut buf = vec![C64::new(0.0, 0.0); n];
        buf[0] = C64::new(half[0].re, 0.0);
        buf[n / 2] = C64::new(half[n / 2].re, 0.0);
        for k in 1..n / 2 {
            buf[k] = half[k];
            buf[n - k] = half[k].conj();
        }
        self.inverse(&mut buf);
        buf.into_iter().map(|v| v.re).collect()
    }
}

/// Linear convolution of two real sequences via zero-padded FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let fft = Fft::new(n).expect("power of two");
    let mut fa: Vec<C64> = a.iter().map(|&v| C64::new(v, 0.0)).collect();
    fa.resize(n, C64::new(0.0, 0.0));
    let mut fb: Vec<C64> = b.iter().map(|&v| C64::new(v, 0.0)).collect();
    fb.resize(n, C64::new(0.0, 0.0));
    fft.forward(&mut fa);
    fft.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    fft.inverse(&mut fa);
    fa.truncate(out_len);
    fa.into_iter().map(|v| v.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[C64]) -> Vec<C64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(C64::new(0.0, 0.0), |acc, (t, &v)| {
                    let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                    acc + v * C64::new(ang.cos(), ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<C64> = (0..64)
            .map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()))
            .collect();
        let mut y = x.clone();
        Fft::new(64).unwrap().forward(&mut y);
        for (a, b) in y.iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let fft = Fft::new(16).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sqrt() - 1.5).collect();
        let back = fft.inverse_real(&fft.forward_real(&x));
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(Fft::new(12).is_err());
        assert!(Fft::new(0).is_err());
        assert!(Fft::new(1).is_ok());
    }

    #[test]
    fn convolution_matches_direct() {
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.5, -0.25, 3.0];
        let c = fft_convolve(&a, &b);
        let mut direct = [0.0; 6];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                direct[i + j] += x * y;
            }
        }
        for (x, y) in c.iter().zip(direct) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
