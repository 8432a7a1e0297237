//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Batch framing places frame `τ` at samples `[τ·hop - (L - hop), τ·hop + hop)`
//! with zeros outside the signal, so every sample is covered by the same
//! number of frames and the whole signal reconstructs. The streaming
//! analyzer produces exactly the same frames one hop at a time.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::shape_err;
use crate::fft::Fft;
use crate::{Error, Result, C64};

pub const DEFAULT_FRAME_LEN: usize = 1024;
pub const DEFAULT_HOP: usize = 512;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Periodic square-root Hann window. Its square sums to one at 50% overlap.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    pub sample_rate: u32,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self::new(DEFAULT_FRAME_LEN, DEFAULT_HOP, DEFAULT_SAMPLE_RATE).expect("default frame spec")
    }
}

impl FrameSpec {
    /// Square-root Hann analysis and synthesis windows.
    pub fn new(frame_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        Self::with_window(frame_len, hop, sqrt_hann(frame_len), sample_rate)
    }

    pub fn with_window(frame_len: usize, hop: usize, window: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !frame_len.is_power_of_two() || frame_len < 2 {
            return Err(Error::InvalidArgument(alloc::format!("frame length {frame_len} must be a power of two")));
        }
        if hop == 0 || hop > frame_len {
            return Err(Error::InvalidArgument(alloc::format!("hop {hop} outside 1..={frame_len}")));
        }
        if window.len() != frame_len {
            return Err(shape_err("window", frame_len, window.len()));
        }
        Ok(Self {
            frame_len,
            hop,
            window,
            sample_rate,
        })
    }

    /// Number of non-redundant bins `L/2 + 1`.
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Samples of look-back before frame `τ·hop`.
    pub fn offset(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Frames needed to cover `n` samples.
    pub fn frame_count(&self, n: usize) -> usize {
        (n + self.offset()).div_ceil(self.hop)
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * f64::from(self.sample_rate) / self.frame_len as f64
    }

    /// Largest deviation of `sum_k w²(n + k·hop)` from one.
    pub fn cola_error(&self) -> f64 {
        (0..self.hop)
            .map(|n| {
                let s: f64 = (n..self.frame_len).step_by(self.hop).map(|i| self.window[i] * self.window[i]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Reusable transform plan for one [`FrameSpec`].
#[derive(Debug, Clone)]
pub struct Stft {
    spec: FrameSpec,
    fft: Fft,
}

impl Stft {
    pub fn new(spec: FrameSpec) -> Result<Self> {
        let fft = Fft::new(spec.frame_len)?;
        Ok(Self { spec, fft })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    /// Windowed real FFT of one frame.
    pub fn stft_frame(&self, x: &[f64]) -> Result<Vec<C64>> {
        if x.len() != self.spec.frame_len {
            return Err(shape_err("stft_frame", self.spec.frame_len, x.len()));
        }
        let w: Vec<f64> = x.iter().zip(&self.spec.window).map(|(a, b)| a * b).collect();
        Ok(self.fft.forward_real(&w))
    }

    /// Inverse FFT of one half-spectrum followed by the synthesis window.
    pub fn istft_frame(&self, bins: &[C64]) -> Result<Vec<f64>> {
        if bins.len() != self.spec.bins() {
            return Err(shape_err("istft_frame", self.spec.bins(), bins.len()));
        }
        let mut y = self.fft.inverse_real(bins);
        y.iter_mut().zip(&self.spec.window).for_each(|(v, w)| *v *= w);
        Ok(y)
    }

    /// All frames of `x`, `frame_count(x.len())` rows of `bins()` values.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<C64>> {
        let l = self.spec.frame_len;
        let off = self.spec.offset() as isize;
        let mut buf = vec![0.0; l];
        (0..self.spec.frame_count(x.len()))
            .map(|t| {
                let start = (t * self.spec.hop) as isize - off;
                for (i, b) in buf.iter_mut().enumerate() {
                    let idx = start + i as isize;
                    *b = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
                }
                self.stft_frame(&buf).expect("frame length")
            })
            .collect()
    }

    /// Overlap-add of `frames`, cropped to `n_out` samples.
    pub fn synthesize(&self, frames: &[Vec<C64>], n_out: usize) -> Result<Vec<f64>> {
        let off = self.spec.offset() as isize;
        let mut out = vec![0.0; n_out];
        for (t, f) in frames.iter().enumerate() {
            let y = self.istft_frame(f)?;
            let start = (t * self.spec.hop) as isize - off;
            for (i, v) in y.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < n_out {
                    out[idx as usize] += v;
                }
            }
        }
        Ok(out)
    }
}

/// One-hop-at-a-time analysis reproducing [`Stft::analyze`] frame by frame.
#[derive(Debug, Clone)]
pub struct StreamingAnalyzer {
    stft: Stft,
    history: Vec<f64>,
}

impl StreamingAnalyzer {
    pub fn new(spec: FrameSpec) -> Result<Self> {
        let history = vec![0.0; spec.frame_len];
        Ok(Self {
            stft: Stft::new(spec)?,
            history,
        })
    }

    /// Consumes `hop` new samples and returns the frame ending with them.
    pub fn push(&mut self, block: &[f64]) -> Result<Vec<C64>> {
        let hop = self.stft.spec.hop;
        if block.len() != hop {
            return Err(shape_err("streaming block", hop, block.len()));
        }
        self.history.copy_within(hop.., 0);
        let l = self.history.len();
        self.history[l - hop..].copy_from_slice(block);
        self.stft.stft_frame(&self.history)
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Overlap-add synthesis emitting `hop` finished samples per frame.
///
/// After frame `τ` the samples `[(τ-1)·hop, τ·hop)` (in batch coordinates,
/// for `L = 2·hop`) are final and returned.
#[derive(Debug, Clone)]
pub struct StreamingSynthesizer {
    stft: Stft,
    acc: Vec<f64>,
}

impl StreamingSynthesizer {
    pub fn new(spec: FrameSpec) -> Result<Self> {
        let acc = vec![0.0; spec.frame_len];
        Ok(Self { stft: Stft::new(spec)?, acc })
    }

    pub fn push(&mut self, bins: &[C64]) -> Result<Vec<f64>> {
        let y = self.stft.istft_frame(bins)?;
        self.acc.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        let hop = self.stft.spec.hop;
        let out = self.acc[..hop].to_vec();
        self.acc.copy_within(hop.., 0);
        let l = self.acc.len();
        self.acc[l - hop..].iter_mut().for_each(|v| *v = 0.0);
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.acc.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Overlap-add of frames into a sample stream (no cropping; frame `τ` lands
/// at `τ·hop`).
pub fn istft_stream(stft: &Stft, frames: &[Vec<C64>]) -> Result<Vec<f64>> {
    let spec = stft.spec();
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let n = (frames.len() - 1) * spec.hop + spec.frame_len;
    let mut out = vec![0.0; n];
    for (t, f) in frames.iter().enumerate() {
        let y = stft.istft_frame(f)?;
        out[t * spec.hop..t * spec.hop + spec.frame_len].iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}
