//! Steering vectors, recursive noise covariance, MVDR/GMVDR weights and the
//! beamformed training target.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::shape_err;
use crate::fft::Fft;
use crate::filter::{analyze_channels, MultiFilter, Spectrogram};
use crate::scene::{ArraySpec, RenderedScene, Rir};
use crate::stft::{FrameSpec, Stft};
use crate::{Error, Result, C64};

/// Recursive smoothing factor of the noise covariance.
pub const COV_SMOOTHING: f64 = 0.95;
/// Initial covariance `δ0·I`.
pub const COV_INIT: f64 = 1e-6;
/// Diagonal loading relative to `tr(R)/M`.
pub const LOADING: f64 = 1e-6;
/// Regularizer of the ideal complex ratio mask.
pub const CRM_EPS: f64 = 1e-10;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Far-field steering vector, `a_m = exp(-j 2π f τ_m)` with
/// `τ_m = x_m cos(θ) / c` and `x_m` the position of mic m along the array
/// axis relative to mic 1.
pub fn freefield_steering(doa_deg: f64, array: &ArraySpec, freq_hz: f64, speed_of_sound: f64) -> Vec<C64> {
    let cos = doa_deg.to_radians().cos();
    array
        .axis_positions()
        .iter()
        .map(|x| C64::from_polar(1.0, -2.0 * PI * freq_hz * x * cos / speed_of_sound))
        .collect()
}

/// Steering vectors at every STFT bin, `[F][M]`.
pub fn steering_per_bin(doa_deg: f64, array: &ArraySpec, spec: &FrameSpec, speed_of_sound: f64) -> Vec<Vec<C64>> {
    (0..spec.bins())
        .map(|k| freefield_steering(doa_deg, array, spec.bin_freq(k), speed_of_sound))
        .collect()
}

/// Recursively smoothed `M×M` covariance of one frequency bin, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    m: usize,
    lambda: f64,
    r: Vec<C64>,
}

impl SpatialCovariance {
    /// `R = δ0·I` with the default smoothing.
    pub fn new(m: usize) -> Self {
        Self::with_init(m, COV_SMOOTHING, COV_INIT)
    }

    pub fn with_init(m: usize, lambda: f64, init: f64) -> Self {
        let mut r = vec![ZERO; m * m];
        for i in 0..m {
            r[i * m + i] = C64::new(init, 0.0);
        }
        Self { m, lambda, r }
    }

    pub fn from_matrix(m: usize, lambda: f64, r: Vec<C64>) -> Result<Self> {
        if r.len() != m * m {
            return Err(shape_err("SpatialCovariance", m * m, r.len()));
        }
        Ok(Self { m, lambda, r })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &[C64] {
        &self.r
    }

    /// `R ← λR + (1-λ) n nᴴ`; the lower triangle is written as the
    /// conjugate of the upper one so `R == Rᴴ` holds exactly.
    pub fn update(&mut self, n: &[C64]) -> Result<()> {
        let m = self.m;
        if n.len() != m {
            return Err(shape_err("update_noise_cov", m, n.len()));
        }
        let (l, g) = (self.lambda, 1.0 - self.lambda);
        for i in 0..m {
            let d = self.r[i * m + i].re * l + g * n[i].norm_sqr();
            self.r[i * m + i] = C64::new(d, 0.0);
            for j in i + 1..m {
                let v = self.r[i * m + j] * l + n[i] * n[j].conj() * g;
                self.r[i * m + j] = v;
                self.r[j * m + i] = v.conj();
            }
        }
        Ok(())
    }

    pub fn is_hermitian(&self) -> bool {
        let m = self.m;
        (0..m).all(|i| (0..m).all(|j| self.r[i * m + j] == self.r[j * m + i].conj()))
    }
}

/// Free-function form of [`SpatialCovariance::update`].
pub fn update_noise_cov(r: &mut SpatialCovariance, n: &[C64]) -> Result<()> {
    r.update(n)
}

/// Cholesky factor `L` (lower, row-major) of a Hermitian positive definite
/// matrix.
fn cholesky(a: &[C64], m: usize) -> Result<Vec<C64>> {
    let mut l = vec![ZERO; m * m];
    for j in 0..m {
        let mut d = a[j * m + j].re;
        for k in 0..j {
            d -= l[j * m + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let djj = d.sqrt();
        l[j * m + j] = C64::new(djj, 0.0);
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k].conj();
            }
            l[i * m + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᴴ x = b`.
fn cholesky_solve(l: &[C64], m: usize, b: &[C64]) -> Vec<C64> {
    let mut y = b.to_vec();
    for i in 0..m {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * m + k] * y[k];
        }
        y[i] = s / l[i * m + i].re;
    }
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in i + 1..m {
            s -= l[k * m + i].conj() * y[k];
        }
        y[i] = s / l[i * m + i].re;
    }
    y
}

/// `w = (R+δI)⁻¹a / (aᴴ(R+δI)⁻¹a)` with `δ = 1e-6·tr(R)/M`. The output
/// satisfies `wᴴa = 1`; the filtered signal is `Σ_m conj(w_m) X_m`.
pub fn mvdr_weights(r: &[C64], a: &[C64]) -> Result<Vec<C64>> {
    let m = a.len();
    if r.len() != m * m {
        return Err(shape_err("mvdr_weights", m * m, r.len()));
    }
    let trace: f64 = (0..m).map(|i| r[i * m + i].re).sum();
    if trace <= 0.0 {
        // nothing to suppress: delay-and-sum
        let norm: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        if norm < 1e-15 {
            return Err(Error::DegenerateSteering(norm));
        }
        return Ok(a.iter().map(|v| v / norm).collect());
    }
    let delta = LOADING * trace / m as f64;
    let mut loaded = r.to_vec();
    for i in 0..m {
        loaded[i * m + i] += delta;
    }
    let l = cholesky(&loaded, m)?;
    let rinv_a = cholesky_solve(&l, m, a);
    let denom: C64 = a.iter().zip(&rinv_a).map(|(x, y)| x.conj() * y).sum();
    if denom.re.abs() < 1e-15 {
        return Err(Error::DegenerateSteering(denom.re));
    }
    // the quadratic form is real for Hermitian R
    let d = denom.re;
    Ok(rinv_a.iter().map(|v| v / d).collect())
}

/// MVDR with relative transfer functions in place of free-field steering.
pub fn gmvdr_weights(r: &[C64], rtf: &[C64]) -> Result<Vec<C64>> {
    mvdr_weights(r, rtf)
}

/// Frequency responses of `rirs` at the STFT bin frequencies, normalized by
/// the first microphone: `[F]` entries of `Some(h_m/h_1)`, or `None` where
/// `|h_1| < 1e-12`.
pub fn rtf_from_rirs(rirs: &[Rir], spec: &FrameSpec) -> Result<Vec<Option<Vec<C64>>>> {
    let longest = rirs.iter().map(|r| r.taps.len()).max().ok_or(Error::Empty("rirs"))?;
    let n = longest.max(spec.frame_len).next_power_of_two();
    let stride = n / spec.frame_len;
    let fft = Fft::new(n)?;
    let spectra: Vec<Vec<C64>> = rirs.iter().map(|r| fft.forward_real(&r.taps)).collect();
    Ok((0..spec.bins())
        .map(|k| {
            let h1 = spectra[0][k * stride];
            if h1.norm() < 1e-12 {
                None
            } else {
                Some(spectra.iter().map(|s| s[k * stride] / h1).collect())
            }
        })
        .collect())
}

/// Regularized quotient `D X* / (|X|² + ε)`.
pub fn ideal_crm(d: C64, x: C64) -> C64 {
    d * x.conj() / (x.norm_sqr() + CRM_EPS)
}

/// Recursive MVDR over a whole scene: at every frame and bin the covariance
/// is updated with the noise estimate and the weights are recomputed. The
/// returned filter holds `conj(w)`.
pub fn mvdr_filter<S>(noise: &[Spectrogram], mut steering: S) -> Result<MultiFilter>
where
    S: FnMut(usize) -> Vec<C64>,
{
    let m = noise.len();
    let frames = noise.first().map_or(0, Vec::len);
    let bins = noise.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let mut filter = MultiFilter::zeros(frames, bins, m);
    let mut n = vec![ZERO; m];
    for f in 0..bins {
        let a = steering(f);
        let mut cov = SpatialCovariance::new(m);
        for t in 0..frames {
            for (ch, s) in noise.iter().enumerate() {
                n[ch] = s[t][f];
            }
            cov.update(&n)?;
            let w = mvdr_weights(cov.matrix(), &a)?;
            for (ch, wv) in w.iter().enumerate() {
                *filter.get_mut(t, f, ch) = wv.conj();
            }
        }
    }
    Ok(filter)
}

/// Oracle MVDR (true interference covariance, free-field steering at the
/// true speech DOA).
pub fn omvdr_filter(stft: &Stft, scene: &RenderedScene) -> Result<MultiFilter> {
    let noise = analyze_channels(stft, &scene.interference());
    let steer = steering_per_bin(scene.spec.speech_doa(), &scene.spec.array, stft.spec(), scene.spec.room.speed_of_sound);
    mvdr_filter(&noise, |f| steer[f].clone())
}

/// Oracle GMVDR: true interference covariance and RTFs of the true speech
/// room responses; bins without a usable reference fall back to
/// delay-and-sum towards the true DOA.
pub fn ogmvdr_filter(stft: &Stft, scene: &RenderedScene) -> Result<MultiFilter> {
    let noise = analyze_channels(stft, &scene.interference());
    let rtf = rtf_from_rirs(&scene.speech_rirs, stft.spec())?;
    let steer = steering_per_bin(scene.spec.speech_doa(), &scene.spec.array, stft.spec(), scene.spec.room.speed_of_sound);
    let m = noise.len();
    let frames = noise.first().map_or(0, Vec::len);
    let bins = stft.spec().bins();
    let mut filter = mvdr_filter(&noise, |f| rtf[f].clone().unwrap_or_else(|| steer[f].clone()))?;
    for (f, r) in rtf.iter().enumerate() {
        if r.is_none() {
            for t in 0..frames {
                for ch in 0..m {
                    *filter.get_mut(t, f, ch) = steer[f][ch].conj() / m as f64;
                }
            }
        }
    }
    debug_assert_eq!(filter.bins(), bins);
    Ok(filter)
}

/// MVDR driven by mask-based noise estimates `N̂_m = (1 - G_m) X_m`, with
/// `masks[m]` a `[T][F]` speech mask per channel and free-field steering at
/// the true speech DOA.
pub fn dnn_mvdr_filter(stft: &Stft, scene: &RenderedScene, masks: &[Spectrogram]) -> Result<MultiFilter> {
    let mix = analyze_channels(stft, &scene.mixture);
    if masks.len() != mix.len() {
        return Err(shape_err("dnn_mvdr masks", mix.len(), masks.len()));
    }
    let one = C64::new(1.0, 0.0);
    let mut noise = Vec::with_capacity(mix.len());
    for (x, g) in mix.iter().zip(masks) {
        if g.len() != x.len() {
            return Err(shape_err("dnn_mvdr mask frames", x.len(), g.len()));
        }
        noise.push(
            x.iter()
                .zip(g)
                .map(|(xr, gr)| xr.iter().zip(gr).map(|(xv, gv)| (one - gv) * xv).collect())
                .collect::<Spectrogram>(),
        );
    }
    let steer = steering_per_bin(scene.spec.speech_doa(), &scene.spec.array, stft.spec(), scene.spec.room.speed_of_sound);
    mvdr_filter(&noise, |f| steer[f].clone())
}

/// Training target: the oracle MVDR applied to the isolated reverberant
/// speech.
#[derive(Debug, Clone)]
pub struct Target {
    pub spectrum: Spectrogram,
    pub signal: Vec<f64>,
    /// `conj(w)` per frame/bin/channel.
    pub filter: MultiFilter,
}

pub fn make_target(stft: &Stft, scene: &RenderedScene) -> Result<Target> {
    if scene.speech.is_empty() || scene.speech.len() != scene.n_mics() {
        return Err(Error::InvalidArgument("scene lacks isolated speech components".into()));
    }
    let filter = omvdr_filter(stft, scene)?;
    let speech = analyze_channels(stft, &scene.speech);
    let spectrum = filter.apply(&speech)?;
    let signal = stft.synthesize(&spectrum, scene.n_samples())?;
    Ok(Target { spectrum, signal, filter })
}

/// The target written through ideal complex ratio masks of the mixture,
/// `Σ_m conj(w_m) cR_m X_m`.
pub fn target_via_crm(filter: &MultiFilter, speech: &[Spectrogram], mixture: &[Spectrogram]) -> Result<Spectrogram> {
    let masked: Vec<Spectrogram> = speech
        .iter()
        .zip(mixture)
        .map(|(d, x)| {
            d.iter()
                .zip(x)
                .map(|(dr, xr)| dr.iter().zip(xr).map(|(dv, xv)| ideal_crm(*dv, *xv) * xv).collect())
                .collect()
        })
        .collect();
    filter.apply(&masked)
}
