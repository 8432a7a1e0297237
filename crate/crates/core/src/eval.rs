//! SINR/SDR metrics, per-scene scoring of a filter and beampatterns.

use alloc::string::String;
use alloc::vec::Vec;

use crate::beamforming::freefield_steering;
use crate::cospa::{shadow_filter, FilteredComponents};
use crate::ctensor::ParamStore;
use crate::error::shape_err;
use crate::filter::MultiFilter;
use crate::scene::{ArraySpec, RenderedScene};
use crate::stft::{FrameSpec, Stft};
use crate::{Error, Result, C64};

/// Ceiling of [`sdr`].
pub const SDR_CAP_DB: f64 = 60.0;

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(E_speech / (E_noise + E_music))`; `+inf` when the
/// interference is silent.
pub fn sinr(speech: &[f64], noise: &[f64], music: &[f64]) -> f64 {
    let den = energy(noise) + energy(music);
    if den == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (energy(speech) / den).log10()
}

/// SINR of the unprocessed components at microphone `mic`.
pub fn raw_sinr(scene: &RenderedScene, mic: usize) -> f64 {
    sinr(&scene.speech[mic], &scene.noise[mic], &scene.music[mic])
}

/// SINR gain of filtered components over microphone `mic`.
pub fn delta_sinr(scene: &RenderedScene, filtered: &FilteredComponents, mic: usize) -> f64 {
    sinr(&filtered.speech, &filtered.noise, &filtered.music) - raw_sinr(scene, mic)
}

/// Projection SDR: the estimate is split into its least-squares multiple of
/// the reference and a residual; the ratio of their energies in dB, capped at
/// [`SDR_CAP_DB`]. A silent estimate scores `-inf`.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(shape_err("sdr", reference.len(), estimate.len()));
    }
    let rr = energy(reference);
    if rr == 0.0 {
        return Err(Error::InvalidArgument("sdr: zero-energy reference".into()));
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / rr;
    let proj = alpha * alpha * rr;
    let resid: f64 = reference.iter().zip(estimate).map(|(r, e)| (e - alpha * r).powi(2)).sum();
    if proj == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if resid == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (proj / resid).log10()).min(SDR_CAP_DB))
}

/// Scores of one method on one scene.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneScore {
    pub scene: String,
    pub method: String,
    pub delta_sinr_db: f64,
    pub sdr_db: f64,
}

/// Filters every component of `scene` with `filter` and scores the result
/// against microphone `mic`: SINR gain and the SDR of the filtered speech
/// with that microphone's reverberant speech as reference.
pub fn score_filter(stft: &Stft, scene: &RenderedScene, filter: &MultiFilter, mic: usize) -> Result<(f64, f64)> {
    let out = shadow_filter(filter, stft, scene)?;
    Ok((delta_sinr(scene, &out, mic), sdr(&scene.speech[mic], &out.speech)?))
}

/// Per-scene scores of one method with corpus statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub method: String,
    pub scenes: Vec<SceneScore>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            scenes: Vec::new(),
        }
    }

    pub fn push(&mut self, scene: impl Into<String>, delta_sinr_db: f64, sdr_db: f64) {
        self.scenes.push(SceneScore {
            scene: scene.into(),
            method: self.method.clone(),
            delta_sinr_db,
            sdr_db,
        });
    }

    pub fn delta_sinr(&self) -> (f64, f64) {
        mean_std(&self.scenes.iter().map(|s| s.delta_sinr_db).collect::<Vec<_>>())
    }

    pub fn sdr(&self) -> (f64, f64) {
        mean_std(&self.scenes.iter().map(|s| s.sdr_db).collect::<Vec<_>>())
    }
}

/// Output power versus probe direction and frequency, normalized so the
/// largest entry is 0 dB.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Beampattern {
    pub angles_deg: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    /// `[angle][bin]`
    pub power_db: Vec<Vec<f64>>,
    /// Linear power before normalization, `[angle][bin]`.
    linear: Vec<Vec<f64>>,
}

/// The 36-angle grid `0°, 5°, …, 175°`.
pub fn angle_grid() -> Vec<f64> {
    (0..36).map(|i| 5.0 * f64::from(i)).collect()
}

fn to_db_normalized(p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let max = p.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::InvalidArgument("beampattern: filter passes no power".into()));
    }
    Ok(p.iter().map(|r| r.iter().map(|v| 10.0 * (v / max).log10()).collect()).collect())
}

/// Response of a per-bin filter sequence to far-field white noise from each
/// direction of `angles_deg`.
///
/// The probe is unit-power in every bin and frame and reaches microphone m
/// with the free-field phase `a_m(θ, f)`, so the output power at `(θ, f)` is
/// the frame average of `|Σ_m C_m(τ, f) a_m(θ, f)|²`. Its phase is
/// irrelevant to the power, so no random draw is needed.
pub fn beampattern(filter: &MultiFilter, array: &ArraySpec, spec: &FrameSpec, speed_of_sound: f64, angles_deg: &[f64]) -> Result<Beampattern> {
    if filter.frames() == 0 {
        return Err(Error::Empty("mask sequence"));
    }
    if filter.channels() != array.len() || filter.bins() != spec.bins() {
        return Err(shape_err("beampattern filter", (array.len(), spec.bins()), (filter.channels(), filter.bins())));
    }
    let bin_freqs: Vec<f64> = (0..spec.bins()).map(|k| spec.bin_freq(k)).collect();
    let inv_t = 1.0 / filter.frames() as f64;
    let linear: Vec<Vec<f64>> = angles_deg
        .iter()
        .map(|&theta| {
            bin_freqs
                .iter()
                .enumerate()
                .map(|(k, &f)| {
                    let a = freefield_steering(theta, array, f, speed_of_sound);
                    let sum: f64 = (0..filter.frames())
                        .map(|t| filter.at(t, k).iter().zip(&a).map(|(c, a)| c * a).sum::<C64>().norm_sqr())
                        .sum();
                    sum * inv_t
                })
                .collect()
        })
        .collect();
    Ok(Beampattern {
        angles_deg: angles_deg.to_vec(),
        bin_freqs,
        power_db: to_db_normalized(&linear)?,
        linear,
    })
}

impl Beampattern {
    /// Angular power profile averaged over bins in `[lo_hz, hi_hz]`,
    /// normalized to a 0 dB peak.
    pub fn profile(&self, lo_hz: f64, hi_hz: f64) -> Result<Vec<f64>> {
        let band: Vec<usize> = (0..self.bin_freqs.len())
            .filter(|&k| self.bin_freqs[k] >= lo_hz && self.bin_freqs[k] <= hi_hz)
            .collect();
        if band.is_empty() {
            return Err(Error::Empty("beampattern band"));
        }
        let avg: Vec<f64> = self.linear.iter().map(|r| band.iter().map(|&k| r[k]).sum::<f64>() / band.len() as f64).collect();
        Ok(to_db_normalized(&[avg])?.remove(0))
    }

    /// Direction of the strongest band-averaged response.
    pub fn peak_angle(&self, lo_hz: f64, hi_hz: f64) -> Result<f64> {
        let p = self.profile(lo_hz, hi_hz)?;
        let (i, _) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        Ok(self.angles_deg[i])
    }
}

/// Real degrees of freedom of the trainable parameters.
pub fn param_count(store: &ParamStore) -> usize {
    store.real_param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clayers::CFc;
    use crate::scene::{render_scene, sample_scene, synth_dry_signals, SceneRanges};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn sinr_examples() {
        let s = [1.0, -1.0];
        let n = [1.0, 0.0];
        let m = [0.0, 1.0];
        assert!(sinr(&s, &n, &m).abs() < 1e-12);
        let s10: Vec<f64> = s.iter().map(|v| v * 10f64.sqrt()).collect();
        assert!((sinr(&s10, &n, &m) - 10.0).abs() < 1e-12);
        assert_eq!(sinr(&s, &[0.0; 2], &[0.0; 2]), f64::INFINITY);
    }

    #[test]
    fn raw_sinr_follows_render_gains() {
        let ranges = SceneRanges {
            duration: 0.5,
            snr_db: (-3.0, -3.0),
            smr_db: (-3.0, -3.0),
            ..SceneRanges::default()
        };
        let spec = sample_scene(21, &ranges).unwrap();
        let scene = render_scene(&spec, &synth_dry_signals(&spec)).unwrap();
        let expect = -3.0 - 10.0 * 2f64.log10();
        assert!((raw_sinr(&scene, 0) - expect).abs() < 1e-9, "{}", raw_sinr(&scene, 0));
    }

    #[test]
    fn identity_processing_has_zero_gain() {
        let ranges = SceneRanges {
            duration: 0.5,
            ..SceneRanges::default()
        };
        let stft = Stft::new(FrameSpec::default()).unwrap();
        for seed in 0..3 {
            let spec = sample_scene(seed, &ranges).unwrap();
            let scene = render_scene(&spec, &synth_dry_signals(&spec)).unwrap();
            let frames = stft.spec().frame_count(scene.n_samples());
            let f = MultiFilter::select_channel(frames, 513, 5, 0);
            let (d, s) = score_filter(&stft, &scene, &f, 0).unwrap();
            assert!(d.abs() < 1e-9, "{d}");
            assert_eq!(s, SDR_CAP_DB);
        }
    }

    #[test]
    fn sdr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(sdr(&r, &r).unwrap(), SDR_CAP_DB);
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(sdr(&r, &r2).unwrap(), SDR_CAP_DB);
        // orthogonalize a random vector against r and give it r's energy
        let mut n: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / energy(&r);
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= k * b);
        let g = (energy(&r) / energy(&n)).sqrt();
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
        assert!(sdr(&r, &est).unwrap().abs() < 1e-9);
        let scaled: Vec<f64> = est.iter().map(|v| v * 3.7).collect();
        assert!((sdr(&r, &scaled).unwrap() - sdr(&r, &est).unwrap()).abs() < 1e-9);
        assert!(sdr(&[0.0; 3], &[1.0; 3]).is_err());
    }

    fn uniform(frames: usize, bins: usize, m: usize, v: C64) -> MultiFilter {
        MultiFilter::from_coeffs(frames, bins, m, alloc::vec![v; frames * bins * m]).unwrap()
    }

    #[test]
    fn uniform_masks_give_the_array_factor() {
        let array = ArraySpec::linear([2.0, 2.0, 1.5], 0.4, 5, 0.04);
        let spec = FrameSpec::default();
        let bp = beampattern(&uniform(4, 513, 5, c(0.2, 0.0)), &array, &spec, 343.0, &angle_grid()).unwrap();
        assert_eq!(bp.power_db.len(), 36);
        assert_eq!(bp.power_db[0].len(), 513);
        let max = bp.power_db.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(max, 0.0);
        let x = array.axis_positions();
        let mut worst = 0.0f64;
        for (i, th) in bp.angles_deg.iter().enumerate() {
            for (k, f) in bp.bin_freqs.iter().enumerate() {
                let af: C64 = x
                    .iter()
                    .map(|xm| C64::from_polar(1.0, -2.0 * core::f64::consts::PI * f * xm * th.to_radians().cos() / 343.0))
                    .sum();
                let af_db = 10.0 * (af.norm_sqr() / 25.0).max(1e-300).log10();
                if af_db > -100.0 {
                    worst = worst.max((bp.power_db[i][k] - af_db).abs());
                }
            }
        }
        assert!(worst < 0.5, "{worst}");
        assert_eq!(bp.peak_angle(500.0, 4000.0).unwrap(), 90.0);
        // global scaling of the masks changes nothing
        let bp2 = beampattern(&uniform(4, 513, 5, c(0.0, 3.0)), &array, &spec, 343.0, &angle_grid()).unwrap();
        for (a, b) in bp.power_db.iter().flatten().zip(bp2.power_db.iter().flatten()) {
            assert!((a - b).abs() < 1e-9 || (a.is_infinite() && b.is_infinite()));
        }
    }

    #[test]
    fn single_sensor_is_omnidirectional() {
        let array = ArraySpec::linear([2.0, 2.0, 1.5], 1.1, 5, 0.04);
        let spec = FrameSpec::default();
        let f = MultiFilter::select_channel(3, 513, 5, 0);
        let bp = beampattern(&f, &array, &spec, 343.0, &angle_grid()).unwrap();
        assert!(bp.power_db.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(beampattern(&MultiFilter::zeros(0, 513, 5), &array, &spec, 343.0, &angle_grid()).is_err());
    }

    #[test]
    fn parameter_counts() {
        let mut store = ParamStore::new();
        assert_eq!(param_count(&store), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        CFc::new(&mut store, &mut rng, "fc", 3, 2).unwrap();
        assert_eq!(param_count(&store), 16);
    }

    #[test]
    fn report_statistics() {
        let mut r = MetricsReport::new("omvdr");
        r.push("a", 1.0, 2.0);
        r.push("b", 3.0, 6.0);
        assert_eq!(r.delta_sinr(), (2.0, 1.0));
        assert_eq!(r.sdr(), (4.0, 2.0));
        assert_eq!(r.scenes[1].method, "omvdr");
    }
}
