//! Per-bin multichannel filters `Y(τ, f) = Σ_m C_m(τ, f) X_m(τ, f)`.
//!
//! Every method evaluated here (learned masks, MVDR weights, a plain
//! channel selector) reduces to one of these, so metrics can filter the
//! mixture and each isolated component through the same path.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::stft::Stft;
use crate::{Result, C64};

/// `[frame][bin]` spectrum of one channel.
pub type Spectrogram = Vec<Vec<C64>>;

/// STFT of every channel.
pub fn analyze_channels(stft: &Stft, signals: &[Vec<f64>]) -> Vec<Spectrogram> {
    signals.iter().map(|s| stft.analyze(s)).collect()
}

/// Coefficients indexed `[(τ·F + f)·M + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFilter {
    frames: usize,
    bins: usize,
    channels: usize,
    coeffs: Vec<C64>,
}

impl MultiFilter {
    pub fn zeros(frames: usize, bins: usize, channels: usize) -> Self {
        Self {
            frames,
            bins,
            channels,
            coeffs: vec![C64::new(0.0, 0.0); frames * bins * channels],
        }
    }

    pub fn from_coeffs(frames: usize, bins: usize, channels: usize, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != frames * bins * channels {
            return Err(shape_err("MultiFilter", frames * bins * channels, coeffs.len()));
        }
        Ok(Self {
            frames,
            bins,
            channels,
            coeffs,
        })
    }

    /// From mask rows laid out `[τ·M + m][f]`, the layout networks emit.
    pub fn from_rows(frames: usize, bins: usize, channels: usize, rows: &[C64]) -> Result<Self> {
        if rows.len() != frames * bins * channels {
            return Err(shape_err("MultiFilter rows", frames * bins * channels, rows.len()));
        }
        let mut f = Self::zeros(frames, bins, channels);
        for t in 0..frames {
            for m in 0..channels {
                let row = &rows[(t * channels + m) * bins..][..bins];
                for (k, v) in row.iter().enumerate() {
                    *f.get_mut(t, k, m) = *v;
                }
            }
        }
        Ok(f)
    }

    /// Passes channel `ch` unchanged and drops the rest.
    pub fn select_channel(frames: usize, bins: usize, channels: usize, ch: usize) -> Self {
        let mut f = Self::zeros(frames, bins, channels);
        for t in 0..frames {
            for k in 0..bins {
                *f.get_mut(t, k, ch) = C64::new(1.0, 0.0);
            }
        }
        f
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn get(&self, t: usize, f: usize, m: usize) -> C64 {
        self.coeffs[(t * self.bins + f) * self.channels + m]
    }

    pub fn get_mut(&mut self, t: usize, f: usize, m: usize) -> &mut C64 {
        &mut self.coeffs[(t * self.bins + f) * self.channels + m]
    }

    /// Coefficients of all channels at `(t, f)`.
    pub fn at(&self, t: usize, f: usize) -> &[C64] {
        let s = (t * self.bins + f) * self.channels;
        &self.coeffs[s..s + self.channels]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= s);
        out
    }

    fn check(&self, spectra: &[Spectrogram]) -> Result<()> {
        if spectra.len() != self.channels {
            return Err(shape_err("filter channels", self.channels, spectra.len()));
        }
        for s in spectra {
            if s.len() != self.frames {
                return Err(shape_err("filter frames", self.frames, s.len()));
            }
            if s.iter().any(|f| f.len() != self.bins) {
                return Err(shape_err("filter bins", self.bins, "mismatch"));
            }
        }
        Ok(())
    }

    /// Filter-and-sum in the STFT domain.
    pub fn apply(&self, spectra: &[Spectrogram]) -> Result<Spectrogram> {
        self.check(spectra)?;
        Ok((0..self.frames)
            .map(|t| {
                (0..self.bins)
                    .map(|f| {
                        let c = self.at(t, f);
                        c.iter().zip(spectra).map(|(cm, s)| cm * s[t][f]).sum()
                    })
                    .collect()
            })
            .collect())
    }

    /// Filters time-domain channel signals: analysis, [`MultiFilter::apply`]
    /// and overlap-add back to the input length.
    pub fn apply_time(&self, stft: &Stft, signals: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = signals.first().map_or(0, Vec::len);
        let spectra = analyze_channels(stft, signals);
        let out = self.apply(&spectra)?;
        stft.synthesize(&out, n)
    }
}
