//! Random shoebox scenes, image-source room impulse responses and mixing.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{LN_10, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fft::fft_convolve;
use crate::{Error, Result};

pub type Point = [f64; 3];

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Half-width (in samples) of the windowed-sinc fractional delay.
pub const SINC_HALF_WIDTH: usize = 8;
/// Sensor self-noise level below each microphone's reverberant speech power.
pub const SENSOR_SNR_DB: f64 = 30.0;

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoomSpec {
    pub dims: Point,
    pub rt60: f64,
    pub speed_of_sound: f64,
}

impl RoomSpec {
    pub fn new(dims: Point, rt60: f64) -> Self {
        Self {
            dims,
            rt60,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument(alloc::format!("degenerate room {:?}", self.dims)));
        }
        if !(self.rt60 > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "rt60 {} and speed of sound {} must be positive",
                self.rt60, self.speed_of_sound
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(x, d)| *x > 0.0 && x < d)
    }

    /// Frequency-independent wall reflection coefficient from Eyring's
    /// reverberation formula, `β = sqrt(1 - α)`.
    pub fn eyring_coefficient(&self) -> f64 {
        let [x, y, z] = self.dims;
        let volume = x * y * z;
        let surface = 2.0 * (x * y + x * z + y * z);
        (-12.0 * LN_10 * volume / (self.speed_of_sound * surface * self.rt60)).exp()
    }
}

/// Uniform linear microphone array.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArraySpec {
    pub mics: Vec<Point>,
    pub spacing: f64,
}

impl ArraySpec {
    /// `m` microphones centred on `center`, laid out along the horizontal
    /// direction `azimuth` (radians) starting from mic 1.
    pub fn linear(center: Point, azimuth: f64, m: usize, spacing: f64) -> Self {
        let (s, c) = azimuth.sin_cos();
        let half = (m as f64 - 1.0) / 2.0;
        let mics = (0..m)
            .map(|i| {
                let off = (i as f64 - half) * spacing;
                [center[0] + off * c, center[1] + off * s, center[2]]
            })
            .collect();
        Self { mics, spacing }
    }

    pub fn len(&self) -> usize {
        self.mics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mics.is_empty()
    }

    pub fn center(&self) -> Point {
        let n = self.mics.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.mics {
            for i in 0..3 {
                c[i] += p[i] / n;
            }
        }
        c
    }

    /// Unit vector from mic 1 towards mic M.
    pub fn axis(&self) -> Point {
        let (a, b) = (self.mics[0], self.mics[self.mics.len() - 1]);
        let d = dist(&a, &b).max(f64::MIN_POSITIVE);
        [(b[0] - a[0]) / d, (b[1] - a[1]) / d, (b[2] - a[2]) / d]
    }

    /// Projection of each mic onto the array axis relative to mic 1 (meters).
    pub fn axis_positions(&self) -> Vec<f64> {
        let e = self.axis();
        let p0 = self.mics[0];
        self.mics
            .iter()
            .map(|p| (p[0] - p0[0]) * e[0] + (p[1] - p0[1]) * e[1] + (p[2] - p0[2]) * e[2])
            .collect()
    }

    /// Direction of arrival in degrees: 0° when the source lies beyond mic 1
    /// on the array axis (wave travelling towards mic M), 90° at broadside.
    pub fn doa_deg(&self, src: &Point) -> f64 {
        let c = self.center();
        let v = [src[0] - c[0], src[1] - c[1], src[2] - c[2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n == 0.0 || self.mics.len() < 2 {
            return 90.0;
        }
        let e = self.axis();
        let cos = -(v[0] * e[0] + v[1] * e[1] + v[2] * e[2]) / n;
        cos.clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Point at `distance` from the array centre in the horizontal plane
    /// with the given DOA (degrees).
    pub fn point_at_doa(&self, doa_deg: f64, distance: f64) -> Point {
        let e = self.axis();
        let c = self.center();
        let th = doa_deg.to_radians();
        // -e is 0°, its horizontal normal is 90°
        let normal = [-e[1], e[0], 0.0];
        let (s, co) = th.sin_cos();
        [
            c[0] + distance * (-e[0] * co + normal[0] * s),
            c[1] + distance * (-e[1] * co + normal[1] * s),
            c[2] + distance * (-e[2] * co + normal[2] * s),
        ]
    }
}

/// Sampling ranges for [`sample_scene`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneRanges {
    pub room_min: Point,
    pub room_max: Point,
    pub rt60: (f64, f64),
    pub snr_db: (f64, f64),
    pub smr_db: (f64, f64),
    pub n_mics: usize,
    pub spacing: f64,
    pub wall_clearance: f64,
    pub min_source_distance: f64,
    pub duration: f64,
    pub sample_rate: u32,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            room_min: [3.0, 3.0, 1.0],
            room_max: [8.0, 8.0, 4.0],
            rt60: (0.3, 0.7),
            snr_db: (-7.0, 0.0),
            smr_db: (-7.0, 0.0),
            n_mics: 5,
            spacing: 0.04,
            wall_clearance: 0.1,
            min_source_distance: 0.5,
            duration: 7.0,
            sample_rate: 16_000,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(alloc::format!("inconsistent range: {what}")));
        for i in 0..3 {
            if !(self.room_min[i] > 0.0 && self.room_min[i] <= self.room_max[i]) {
                return bad("room dimensions");
            }
        }
        if !(self.rt60.0 > 0.0 && self.rt60.0 <= self.rt60.1) {
            return bad("rt60");
        }
        if !(self.snr_db.0 <= self.snr_db.1) || !(self.smr_db.0 <= self.smr_db.1) {
            return bad("snr/smr");
        }
        if self.n_mics == 0 || !(self.spacing > 0.0) || !(self.duration > 0.0) || self.sample_rate == 0 {
            return bad("array or duration");
        }
        if !(self.wall_clearance >= 0.0) || !(self.min_source_distance >= 0.0) {
            return bad("clearances");
        }
        Ok(())
    }
}

/// One sampled acoustic scenario.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub id: String,
    pub seed: u64,
    pub room: RoomSpec,
    pub array: ArraySpec,
    pub speech_pos: Point,
    pub noise_pos: Point,
    pub music_pos: Point,
    pub snr_db: f64,
    pub smr_db: f64,
    pub duration: f64,
    pub sample_rate: u32,
}

impl SceneSpec {
    pub fn n_samples(&self) -> usize {
        (self.duration * f64::from(self.sample_rate)).round() as usize
    }

    pub fn speech_doa(&self) -> f64 {
        self.array.doa_deg(&self.speech_pos)
    }

    pub fn noise_doa(&self) -> f64 {
        self.array.doa_deg(&self.noise_pos)
    }

    pub fn music_doa(&self) -> f64 {
        self.array.doa_deg(&self.music_pos)
    }
}

const PLACEMENT_TRIES: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Deterministic scene from `seed`.
pub fn sample_scene(seed: u64, ranges: &SceneRanges) -> Result<SceneSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [0, 1, 2].map(|i| uniform(&mut rng, (ranges.room_min[i], ranges.room_max[i])));
    let rt60 = uniform(&mut rng, ranges.rt60);
    let snr_db = uniform(&mut rng, ranges.snr_db);
    let smr_db = uniform(&mut rng, ranges.smr_db);
    let room = RoomSpec::new(dims, rt60);
    let clear = ranges.wall_clearance;
    let half_len = (ranges.n_mics as f64 - 1.0) / 2.0 * ranges.spacing;
    let inner = |rng: &mut ChaCha8Rng, margin: f64| -> Option<Point> {
        let mut p = [0.0; 3];
        for i in 0..3 {
            let (lo, hi) = (margin, dims[i] - margin);
            if lo >= hi {
                return None;
            }
            p[i] = rng.gen_range(lo..hi);
        }
        Some(p)
    };
    // any centre inside the shrunken box fits, so the array needs no retries
    let mut center = inner(&mut rng, clear + half_len).ok_or(Error::Placement(PLACEMENT_TRIES))?;
    center[2] = rng.gen_range(clear..dims[2] - clear);
    let azimuth = rng.gen_range(0.0..2.0 * PI);
    let array = ArraySpec::linear(center, azimuth, ranges.n_mics, ranges.spacing);
    let center = array.center();
    let place = |rng: &mut ChaCha8Rng| -> Result<Point> {
        for _ in 0..PLACEMENT_TRIES {
            if let Some(p) = inner(rng, clear) {
                if dist(&p, &center) >= ranges.min_source_distance {
                    return Ok(p);
                }
            }
        }
        Err(Error::Placement(PLACEMENT_TRIES))
    };
    let speech_pos = place(&mut rng)?;
    let noise_pos = place(&mut rng)?;
    let music_pos = place(&mut rng)?;
    Ok(SceneSpec {
        id: alloc::format!("scene-{seed}"),
        seed,
        room,
        array,
        speech_pos,
        noise_pos,
        music_pos,
        snr_db,
        smr_db,
        duration: ranges.duration,
        sample_rate: ranges.sample_rate,
    })
}

/// Room impulse response for one source/microphone pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    /// Index of the largest-magnitude tap.
    pub fn peak_index(&self) -> usize {
        self.taps
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
            .0
    }

    pub fn first_nonzero(&self) -> Option<usize> {
        self.taps.iter().position(|v| *v != 0.0)
    }
}

/// Adds `amp · δ(n - delay)` using a Hann-windowed sinc of
/// `2·SINC_HALF_WIDTH` taps; integer delays give a single tap.
fn place_impulse(taps: &mut [f64], delay: f64, amp: f64) {
    let n0 = delay.floor();
    let frac = delay - n0;
    let n0 = n0 as isize;
    if frac < 1e-9 || frac > 1.0 - 1e-9 {
        let idx = if frac < 0.5 { n0 } else { n0 + 1 };
        if idx >= 0 && (idx as usize) < taps.len() {
            taps[idx as usize] += amp;
        }
        return;
    }
    let hw = SINC_HALF_WIDTH as isize;
    // sin(π(k - D)) = -(-1)^k sin(πD) with D = n0 + frac
    let s = (PI * frac).sin();
    for k in (n0 - hw + 1)..=(n0 + hw) {
        if k < 0 || k as usize >= taps.len() {
            continue;
        }
        let t = k as f64 - delay;
        let sign = if (k - n0) % 2 == 0 { -1.0 } else { 1.0 };
        // sin(π t) for t = (k - n0) - frac
        let sin_pt = sign * s;
        let sinc = sin_pt / (PI * t);
        let w = 0.5 * (1.0 + (PI * t / SINC_HALF_WIDTH as f64).cos());
        taps[k as usize] += amp * sinc * w;
    }
}

/// Calls `f(distance, reflections)` for every image source within
/// `max_dist` of `mic` having at most `order_cap` wall reflections.
fn for_each_image(room: &RoomSpec, src: &Point, mic: &Point, max_dist: f64, order_cap: usize, mut f: impl FnMut(f64, usize)) {
    let l = room.dims;
    let bounds = [0, 1, 2].map(|i| (max_dist / (2.0 * l[i])).ceil() as i64 + 1);
    // per-axis candidates: (image coordinate offset from mic, reflection count)
    let axis_images = |i: usize| -> Vec<(f64, usize)> {
        let mut v = Vec::new();
        for m in -bounds[i]..=bounds[i] {
            for q in 0..2i64 {
                let coord = (1 - 2 * q) as f64 * src[i] + 2.0 * m as f64 * l[i];
                let refl = ((m - q).abs() + m.abs()) as usize;
                v.push((coord - mic[i], refl));
            }
        }
        v
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    let max_d2 = max_dist * max_dist;
    for &(dx, rx) in &xs {
        if rx > order_cap || dx * dx > max_d2 {
            continue;
        }
        for &(dy, ry) in &ys {
            let rxy = rx + ry;
            let dxy2 = dx * dx + dy * dy;
            if rxy > order_cap || dxy2 > max_d2 {
                continue;
            }
            for &(dz, rz) in &zs {
                let order = rxy + rz;
                let d2 = dxy2 + dz * dz;
                if order > order_cap || d2 > max_d2 {
                    continue;
                }
                f(d2.sqrt(), order);
            }
        }
    }
}

fn rir_len(room: &RoomSpec, src: &Point, mic: &Point, fs: f64) -> usize {
    let direct = dist(src, mic) / room.speed_of_sound * fs;
    (direct + room.rt60 * fs).ceil() as usize + SINC_HALF_WIDTH
}

impl RoomSpec {
    /// Wall reflection coefficient for which the image-source energy decay
    /// of this room has the requested `rt60`.
    ///
    /// Eyring's value is the starting point. Late image-source energy is
    /// dominated by paths along the longest room axis, which reflect less
    /// often than the mean free path assumes, so the Eyring coefficient
    /// alone yields decays roughly 1.5 times too long in elongated rooms.
    /// The coefficient is therefore refined by bisection on the Schroeder
    /// estimate of a reference source/microphone pair's image energy
    /// envelope (1 ms bins).
    pub fn reflection_coefficient(&self, sample_rate: u32) -> Result<f64> {
        self.validate()?;
        let d = self.dims;
        let src = [0.3 * d[0], 0.35 * d[1], 0.4 * d[2]];
        let mic = [0.65 * d[0], 0.6 * d[1], 0.55 * d[2]];
        let fs = f64::from(sample_rate);
        let len = rir_len(self, &src, &mic, fs);
        let max_dist = len as f64 / fs * self.speed_of_sound;
        let bin_rate = 1000u32;
        let n_bins = (len as f64 / fs * f64::from(bin_rate)).ceil() as usize + 1;
        // table[bin][k] = sum of 1/d^2 over images with k reflections
        let mut table: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
        for_each_image(self, &src, &mic, max_dist, usize::MAX, |dd, k| {
            let bin = ((dd / self.speed_of_sound) * f64::from(bin_rate)) as usize;
            if let Some(row) = table.get_mut(bin) {
                if row.len() <= k {
                    row.resize(k + 1, 0.0);
                }
                row[k] += 1.0 / (dd * dd);
            }
        });
        let max_k = table.iter().map(Vec::len).max().unwrap_or(1);
        let t60_for = |ln_beta: f64| -> Option<f64> {
            let pw: Vec<f64> = (0..max_k).map(|k| (2.0 * ln_beta * k as f64).exp()).collect();
            let amps: Vec<f64> = table
                .iter()
                .map(|row| row.iter().zip(&pw).map(|(c, p)| c * p).sum::<f64>().sqrt())
                .collect();
            measure_rt60(&amps, bin_rate).ok()
        };
        let eyring = self.eyring_coefficient().ln();
        let (mut lo, mut hi) = (eyring * 8.0, eyring * 0.5);
        match (t60_for(lo), t60_for(hi)) {
            (Some(a), Some(b)) if a <= self.rt60 && b >= self.rt60 => {}
            _ => return Ok(eyring.exp()),
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            match t60_for(mid) {
                Some(t) if t < self.rt60 => lo = mid,
                Some(_) => hi = mid,
                None => lo = mid,
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }
}

/// Shoebox image-source RIR. The RIR spans the direct-path delay plus
/// `rt60·fs` samples (plus the sinc half-width); images arriving later are
/// dropped, as are images with more than `max_order` wall reflections.
pub fn image_source_rir(room: &RoomSpec, src: &Point, mic: &Point, sample_rate: u32, max_order: Option<usize>) -> Result<Rir> {
    let beta = room.reflection_coefficient(sample_rate)?;
    image_source_rir_with_beta(room, beta, src, mic, sample_rate, max_order)
}

/// [`image_source_rir`] with a precomputed reflection coefficient.
pub fn image_source_rir_with_beta(room: &RoomSpec, beta: f64, src: &Point, mic: &Point, sample_rate: u32, max_order: Option<usize>) -> Result<Rir> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::InvalidArgument("source or microphone outside the room".into()));
    }
    if dist(src, mic) == 0.0 {
        return Err(Error::InvalidArgument("source and microphone coincide".into()));
    }
    let fs = f64::from(sample_rate);
    let len = rir_len(room, src, mic, fs);
    let max_dist = len as f64 / fs * room.speed_of_sound;
    let mut taps = vec![0.0; len];
    let scale = fs / room.speed_of_sound;
    for_each_image(room, src, mic, max_dist, max_order.unwrap_or(usize::MAX), |d, order| {
        let amp = beta.powi(order as i32) / (4.0 * PI * d);
        place_impulse(&mut taps, d * scale, amp);
    });
    Ok(Rir { taps, sample_rate })
}

/// Cutoff of the high-pass applied to rendered room responses.
pub const RIR_HIGHPASS_HZ: f64 = 50.0;

/// Removes the slowly varying offset left by the all-positive image
/// amplitudes with a one-pole DC blocker.
pub fn highpass_rir(rir: &mut Rir) {
    let r = 1.0 - 2.0 * PI * RIR_HIGHPASS_HZ / f64::from(rir.sample_rate);
    let (mut x1, mut y1) = (0.0, 0.0);
    for v in rir.taps.iter_mut() {
        let y = *v - x1 + r * y1;
        x1 = *v;
        y1 = y;
        *v = y;
    }
}

/// Room response used for rendering: image-source RIR followed by
/// [`highpass_rir`].
pub fn room_response(room: &RoomSpec, beta: f64, src: &Point, mic: &Point, sample_rate: u32) -> Result<Rir> {
    let mut rir = image_source_rir_with_beta(room, beta, src, mic, sample_rate, None)?;
    highpass_rir(&mut rir);
    Ok(rir)
}

/// Reverberation time from Schroeder backward integration, fitting the
/// -5 to -25 dB span and extrapolating to 60 dB.
pub fn measure_rt60(taps: &[f64], sample_rate: u32) -> Result<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return Err(Error::NoDecay);
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let start = db.iter().position(|v| *v <= -5.0).ok_or(Error::NoDecay)?;
    let end = db.iter().position(|v| *v <= -25.0).ok_or(Error::NoDecay)?;
    if end <= start + 1 {
        return Err(Error::NoDecay);
    }
    let fs = f64::from(sample_rate);
    let n = (end - start + 1) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, y) in db[start..=end].iter().enumerate() {
        let t = (start + i) as f64 / fs;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    if !(slope < 0.0) || !slope.is_finite() {
        return Err(Error::NoDecay);
    }
    Ok(-60.0 / slope)
}

/// Dry source signals, each at least `duration` long.
#[derive(Debug, Clone, PartialEq)]
pub struct DrySignals {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
    pub music: Vec<f64>,
}

/// Rendered microphone signals and their isolated reverberant components,
/// each indexed `[mic][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub spec: SceneSpec,
    pub speech: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub music: Vec<Vec<f64>>,
    pub sensor: Vec<Vec<f64>>,
    pub mixture: Vec<Vec<f64>>,
    /// Dry speech truncated to the scene length.
    pub dry_speech: Vec<f64>,
    /// Speech RIRs per microphone.
    pub speech_rirs: Vec<Rir>,
    /// Direct-path delay of the speech source at mic 1 in samples.
    pub speech_delay: f64,
    pub noise_gain: f64,
    pub music_gain: f64,
}

impl RenderedScene {
    pub fn n_mics(&self) -> usize {
        self.mixture.len()
    }

    pub fn n_samples(&self) -> usize {
        self.mixture.first().map_or(0, Vec::len)
    }

    /// Noise plus music plus sensor noise per microphone.
    pub fn interference(&self) -> Vec<Vec<f64>> {
        (0..self.n_mics())
            .map(|m| {
                (0..self.n_samples())
                    .map(|n| self.noise[m][n] + self.music[m][n] + self.sensor[m][n])
                    .collect()
            })
            .collect()
    }
}

fn reverberate(room: &RoomSpec, beta: f64, src: &Point, array: &ArraySpec, fs: u32, dry: &[f64], n: usize) -> Result<(Vec<Vec<f64>>, Vec<Rir>)> {
    let mut out = Vec::with_capacity(array.len());
    let mut rirs = Vec::with_capacity(array.len());
    for mic in &array.mics {
        let rir = room_response(room, beta, src, mic, fs)?;
        let mut y = fft_convolve(&dry[..n], &rir.taps);
        y.truncate(n);
        out.push(y);
        rirs.push(rir);
    }
    Ok((out, rirs))
}

/// Convolves the dry sources with their RIRs, scales noise and music to the
/// scene's SNR/SMR at mic 1 and adds white sensor noise.
pub fn render_scene(spec: &SceneSpec, dry: &DrySignals) -> Result<RenderedScene> {
    let n = spec.n_samples();
    for (name, sig) in [("speech", &dry.speech), ("noise", &dry.noise), ("music", &dry.music)] {
        if sig.len() < n {
            return Err(Error::InvalidArgument(alloc::format!(
                "dry {name} has {} samples, scene needs {n}",
                sig.len()
            )));
        }
        if energy(&sig[..n]) == 0.0 {
            return Err(Error::SilentSource(name));
        }
    }
    let fs = spec.sample_rate;
    let beta = spec.room.reflection_coefficient(fs)?;
    let (speech, speech_rirs) = reverberate(&spec.room, beta, &spec.speech_pos, &spec.array, fs, &dry.speech, n)?;
    let (mut noise, _) = reverberate(&spec.room, beta, &spec.noise_pos, &spec.array, fs, &dry.noise, n)?;
    let (mut music, _) = reverberate(&spec.room, beta, &spec.music_pos, &spec.array, fs, &dry.music, n)?;
    let es = energy(&speech[0]);
    let en = energy(&noise[0]);
    let em = energy(&music[0]);
    if es == 0.0 {
        return Err(Error::SilentSource("speech"));
    }
    if en == 0.0 {
        return Err(Error::SilentSource("noise"));
    }
    if em == 0.0 {
        return Err(Error::SilentSource("music"));
    }
    let noise_gain = (es / (en * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let music_gain = (es / (em * 10f64.powf(spec.smr_db / 10.0))).sqrt();
    noise.iter_mut().flatten().for_each(|v| *v *= noise_gain);
    music.iter_mut().flatten().for_each(|v| *v *= music_gain);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e45_0a15_e000_0001);
    let sensor: Vec<Vec<f64>> = speech
        .iter()
        .map(|s| {
            let sigma = (energy(s) / n as f64 * 10f64.powf(-SENSOR_SNR_DB / 10.0)).sqrt();
            (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let mixture = (0..spec.array.len())
        .map(|m| (0..n).map(|i| speech[m][i] + noise[m][i] + music[m][i] + sensor[m][i]).collect())
        .collect();
    let speech_delay = dist(&spec.speech_pos, &spec.array.mics[0]) / spec.room.speed_of_sound * f64::from(fs);
    Ok(RenderedScene {
        spec: spec.clone(),
        speech,
        noise,
        music,
        sensor,
        mixture,
        dry_speech: dry.speech[..n].to_vec(),
        speech_rirs,
        speech_delay,
        noise_gain,
        music_gain,
    })
}

/// Unit-RMS scaling (no-op on silence).
pub fn normalize_rms(x: &mut [f64]) {
    let rms = (energy(x) / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Speech-like test signal: voiced syllables (harmonic complex with a
/// gliding pitch and formant-shaped spectrum) separated by short pauses.
pub fn synth_speech<R: Rng>(rng: &mut R, n: usize, sample_rate: u32) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let mut out = vec![0.0; n];
    let mut pos = 0usize;
    while pos < n {
        let syl = (rng.gen_range(0.12..0.35) * fs) as usize;
        let pause = (rng.gen_range(0.03..0.2) * fs) as usize;
        let f0_start: f64 = rng.gen_range(95.0..230.0);
        let f0_end = f0_start * rng.gen_range(0.8..1.25);
        let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2400.0), rng.gen_range(2400.0..3400.0)];
        let level: f64 = rng.gen_range(0.4..1.0);
        let mut phase = 0.0;
        for i in 0..syl.min(n - pos) {
            let u = i as f64 / syl as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += 2.0 * PI * f0 / fs;
            let env = (PI * u).sin().powi(2);
            let mut v = 0.0;
            let mut k = 1;
            while (k as f64) * f0 < 0.45 * fs.min(10_000.0) {
                let fk = k as f64 * f0;
                let gain: f64 = formants.iter().map(|f| 1.0 / (1.0 + ((fk - f) / 150.0).powi(2))).sum();
                v += gain / k as f64 * (k as f64 * phase).sin();
                k += 1;
            }
            out[pos + i] = level * env * v;
        }
        pos += syl + pause;
    }
    // light aspiration noise keeps the spectrum dense
    for v in out.iter_mut() {
        *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
    }
    normalize_rms(&mut out);
    out
}

pub fn white_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize_rms(&mut out);
    out
}

/// Approximately 1/f noise (Kellet's economy filter on white noise).
pub fn pink_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    normalize_rms(&mut out);
    out
}

/// Music-like signal: a repeating four-note pattern of decaying harmonic
/// tones.
pub fn synth_music<R: Rng>(rng: &mut R, n: usize, sample_rate: u32) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let notes: Vec<f64> = (0..4).map(|_| 220.0 * 2f64.powf(rng.gen_range(0..24) as f64 / 12.0)).collect();
    let note_len = (rng.gen_range(0.2..0.4) * fs) as usize;
    let mut out = vec![0.0; n];
    for (i, v) in out.iter_mut().enumerate() {
        let idx = (i / note_len) % notes.len();
        let t = (i % note_len) as f64 / fs;
        let f = notes[idx];
        let decay = (-4.0 * t).exp();
        let mut s = 0.0;
        for k in 1..=5 {
            if (k as f64) * f < 0.45 * fs {
                s += (2.0 * PI * k as f64 * f * i as f64 / fs).sin() / (k * k) as f64;
            }
        }
        *v = decay * s;
    }
    normalize_rms(&mut out);
    out
}

/// Default synthetic dry sources for a scene (speech, pink noise, music),
/// seeded from the scene seed.
pub fn synth_dry_signals(spec: &SceneSpec) -> DrySignals {
    let n = spec.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xd7);
    let speech = synth_speech(&mut rng, n, spec.sample_rate);
    let noise = if rng.gen_bool(0.5) { pink_noise(&mut rng, n) } else { white_noise(&mut rng, n) };
    let music = synth_music(&mut rng, n, spec.sample_rate);
    DrySignals { speech, noise, music }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_ranges() -> SceneRanges {
        SceneRanges {
            duration: 0.5,
            ..SceneRanges::default()
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let r = SceneRanges::default();
        assert_eq!(sample_scene(4, &r).unwrap(), sample_scene(4, &r).unwrap());
        let mut snr_sum = 0.0;
        for seed in 0..1000 {
            let s = sample_scene(seed, &r).unwrap();
            assert!((0.3..=0.7).contains(&s.room.rt60));
            assert!((-7.0..=0.0).contains(&s.snr_db) && (-7.0..=0.0).contains(&s.smr_db));
            for i in 0..3 {
                assert!(s.room.dims[i] >= r.room_min[i] && s.room.dims[i] <= r.room_max[i]);
            }
            for p in s.array.mics.iter().chain([&s.speech_pos, &s.noise_pos, &s.music_pos]) {
                for i in 0..3 {
                    assert!(p[i] >= 0.1 - 1e-12 && p[i] <= s.room.dims[i] - 0.1 + 1e-12);
                }
            }
            snr_sum += s.snr_db;
        }
        assert!((snr_sum / 1000.0 + 3.5).abs() < 0.3);
    }

    #[test]
    fn inconsistent_ranges_rejected() {
        let r = SceneRanges {
            rt60: (0.7, 0.3),
            ..SceneRanges::default()
        };
        assert!(sample_scene(0, &r).is_err());
        let r = SceneRanges {
            room_min: [1.0, 1.0, 0.3],
            room_max: [1.0, 1.0, 0.3],
            min_source_distance: 5.0,
            ..SceneRanges::default()
        };
        assert!(matches!(sample_scene(0, &r), Err(Error::Placement(_))));
    }

    #[test]
    fn anechoic_rir_is_single_impulse() {
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.4);
        let src = [1.0, 2.0, 1.5];
        // distance chosen so the delay is an integer number of samples
        let d = 343.0 * 50.0 / 16_000.0;
        let mic = [1.0 + d, 2.0, 1.5];
        let rir = image_source_rir(&room, &src, &mic, 16_000, Some(0)).unwrap();
        let nz: Vec<usize> = rir.taps.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nz, vec![50]);
        assert!((rir.taps[50] - 1.0 / (4.0 * PI * d)).abs() < 1e-12);
    }

    #[test]
    fn direct_path_follows_inverse_distance() {
        let room = RoomSpec::new([8.0, 6.0, 3.0], 0.4);
        let src = [1.0, 3.0, 1.5];
        let d = 343.0 * 40.0 / 16_000.0;
        let near = image_source_rir(&room, &src, &[1.0 + d, 3.0, 1.5], 16_000, Some(0)).unwrap();
        let far = image_source_rir(&room, &src, &[1.0 + 2.0 * d, 3.0, 1.5], 16_000, Some(0)).unwrap();
        let a = near.taps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let b = far.taps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((a / b - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rir_errors() {
        let bad = RoomSpec::new([0.0, 4.0, 3.0], 0.4);
        assert!(image_source_rir(&bad, &[1.0, 1.0, 1.0], &[2.0, 1.0, 1.0], 16_000, None).is_err());
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.4);
        assert!(image_source_rir(&room, &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 16_000, None).is_err());
    }

    #[test]
    fn rt60_of_ideal_decay() {
        let fs = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let taps: Vec<f64> = (0..fs as usize)
            .map(|n| {
                let t = n as f64 / f64::from(fs);
                (-6.91 * t / 0.5).exp() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let t = measure_rt60(&taps, fs).unwrap();
        assert!((t - 0.5).abs() < 0.02, "{t}");
        let scaled: Vec<f64> = taps.iter().map(|v| v * 10.0).collect();
        assert!((measure_rt60(&scaled, fs).unwrap() - t).abs() < 1e-9);
        let mut imp = vec![0.0; 100];
        imp[3] = 1.0;
        assert!(measure_rt60(&imp, fs).is_err());
    }

    #[test]
    fn doa_convention() {
        let arr = ArraySpec::linear([2.0, 2.0, 1.0], 0.0, 5, 0.04);
        // mic 1 at smaller x; source beyond mic 1 is 0°
        assert!(arr.doa_deg(&[0.5, 2.0, 1.0]).abs() < 1e-9);
        assert!((arr.doa_deg(&[3.5, 2.0, 1.0]) - 180.0).abs() < 1e-9);
        assert!((arr.doa_deg(&[2.0, 3.0, 1.0]) - 90.0).abs() < 1e-9);
        for doa in [0.0, 35.0, 66.0, 140.0] {
            assert!((arr.doa_deg(&arr.point_at_doa(doa, 1.2)) - doa).abs() < 1e-9);
        }
    }

    #[test]
    fn render_gains_and_additivity() {
        let spec = sample_scene(3, &short_ranges()).unwrap();
        let dry = synth_dry_signals(&spec);
        let r = render_scene(&spec, &dry).unwrap();
        let snr = 10.0 * (energy(&r.speech[0]) / energy(&r.noise[0])).log10();
        let smr = 10.0 * (energy(&r.speech[0]) / energy(&r.music[0])).log10();
        assert!((snr - spec.snr_db).abs() < 0.01);
        assert!((smr - spec.smr_db).abs() < 0.01);
        for m in 0..r.n_mics() {
            for i in 0..r.n_samples() {
                let sum = r.speech[m][i] + r.noise[m][i] + r.music[m][i] + r.sensor[m][i];
                assert!((r.mixture[m][i] - sum).abs() <= 1e-12);
            }
            let sensor_snr = 10.0 * (energy(&r.speech[m]) / energy(&r.sensor[m])).log10();
            assert!((sensor_snr - 30.0).abs() < 0.5);
        }
        assert_eq!(render_scene(&spec, &dry).unwrap(), r);
    }

    #[test]
    fn silent_or_short_sources_rejected() {
        let spec = sample_scene(1, &short_ranges()).unwrap();
        let mut dry = synth_dry_signals(&spec);
        dry.music.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(render_scene(&spec, &dry), Err(Error::SilentSource("music"))));
        let mut dry = synth_dry_signals(&spec);
        dry.speech.truncate(10);
        assert!(render_scene(&spec, &dry).is_err());
    }

    #[test]
    fn anechoic_mixture_is_delayed_dry_sum() {
        let mut spec = sample_scene(5, &short_ranges()).unwrap();
        // a tiny rt60 drives the wall reflection coefficient to ~0
        spec.room.rt60 = 1e-3;
        let dry = synth_dry_signals(&spec);
        let r = render_scene(&spec, &dry).unwrap();
        for (m, mic) in spec.array.mics.iter().enumerate() {
            let mut rir = image_source_rir(&spec.room, &spec.speech_pos, mic, 16_000, Some(0)).unwrap();
            let d = dist(&spec.speech_pos, mic);
            let delay = d / 343.0 * 16_000.0;
            assert!((rir.peak_index() as f64 - delay).abs() <= 1.0);
            highpass_rir(&mut rir);
            let direct = fft_convolve(&dry.speech[..r.n_samples()], &rir.taps);
            for i in 0..r.n_samples() {
                assert!((r.speech[m][i] - direct[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rendered_rt60_matches_request() {
        let room_dims = [5.0, 4.0, 3.0];
        let (src, mic) = ([1.3, 1.1, 1.4], [3.6, 2.7, 1.2]);
        for rt in [0.3, 0.5, 0.7] {
            let room = RoomSpec::new(room_dims, rt);
            let beta = room.reflection_coefficient(16_000).unwrap();
            assert!(beta < room.eyring_coefficient());
            let rir = room_response(&room, beta, &src, &mic, 16_000).unwrap();
            let t = measure_rt60(&rir.taps, 16_000).unwrap();
            assert!((t / rt - 1.0).abs() <= 0.2, "{rt} -> {t}");
            let delay = dist(&src, &mic) / 343.0 * 16_000.0;
            assert!((rir.peak_index() as f64 - delay).abs() <= 1.0);
        }
    }
}
