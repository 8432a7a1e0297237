//! The COSPA network: a shared single-channel mask from a complex U-Net,
//! downsampling encoders, a recurrent compandor over all channels and a
//! weight-shared per-channel decoder producing one bounded mask per channel.
//! The enhanced spectrum is the filter-and-sum `Y = Σ_m M_m X_m`.
//!
//! Every forward pass works on whole row blocks: a sequence of `T` frames of
//! `M` channels is a `[T·M, F]` tensor with row `τ·M + m`. Every row goes
//! through the same loops regardless of `T`, so frame-by-frame streaming
//! reproduces the batch forward bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::beamforming::make_target;
use crate::clayers::{conv_geom, CBatchNorm, CConv1d, CConvT1d, CFc, CGru, LEAKY_SLOPE};
use crate::ctensor::{adam_step, AdamState, CTensor, ConvGeom, ParamStore, Tape, Var};
use crate::error::shape_err;
use crate::filter::{analyze_channels, MultiFilter, Spectrogram};
use crate::scene::RenderedScene;
use crate::stft::{FrameSpec, Stft};
use crate::{Error, Result, C64};

/// Layout of the complex U-Net mask estimator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrunetConfig {
    /// Channel widths of the encoder blocks; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub gru_hidden: usize,
}

impl Default for CrunetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 64],
            kernel: 5,
            stride: 2,
            gru_hidden: 128,
        }
    }
}

impl CrunetConfig {
    fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Frequency-axis lengths after each encoder block, starting with `bins`.
    pub fn lengths(&self, bins: usize) -> Result<Vec<usize>> {
        let mut lens = vec![bins];
        for &w in &self.widths {
            let g = conv_geom(1, w, self.kernel, self.stride, self.padding());
            let next = g
                .conv_out_len(*lens.last().expect("nonempty"))
                .ok_or_else(|| Error::InvalidArgument(format!("crunet: {bins} bins too few for {} blocks", self.widths.len())))?;
            lens.push(next);
        }
        Ok(lens)
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.kernel == 0 || self.stride == 0 || self.gru_hidden == 0 {
            return Err(Error::InvalidArgument("crunet: zero-sized layer".into()));
        }
        let lens = self.lengths(bins)?;
        for i in 0..self.widths.len() {
            transposed_padding(self, lens[i + 1], lens[i])?;
        }
        Ok(())
    }
}

fn transposed_padding(cfg: &CrunetConfig, len_in: usize, len_out: usize) -> Result<usize> {
    let base = ((len_in - 1) * cfg.stride + cfg.kernel).checked_sub(2 * cfg.padding());
    match base {
        Some(b) if len_out >= b && len_out - b < cfg.stride => Ok(len_out - b),
        _ => Err(Error::InvalidArgument(format!("crunet: cannot upsample {len_in} to {len_out}"))),
    }
}

/// Dimensions of the full model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CospaConfig {
    pub channels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Downsampled length of each encoder stream.
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    /// Excitation length per channel.
    pub l4: usize,
    pub l5: usize,
    pub l6: usize,
    pub leaky_slope: f64,
    /// Kernel and stride of the 1-D downsampling convolutions.
    pub enc_kernel: usize,
    pub enc_stride: usize,
    /// Scale applied to the spectra before they enter the network (masks
    /// are still applied to the unscaled spectra).
    pub input_gain: f64,
    pub crunet: CrunetConfig,
}

impl Default for CospaConfig {
    fn default() -> Self {
        Self {
            channels: 5,
            frame_len: 1024,
            hop: 512,
            sample_rate: 16_000,
            l1: 260,
            l2: 128,
            l3: 128,
            l4: 513,
            l5: 256,
            l6: 256,
            leaky_slope: LEAKY_SLOPE,
            enc_kernel: 5,
            enc_stride: 2,
            input_gain: default_gain(1024),
            crunet: CrunetConfig::default(),
        }
    }
}

fn default_gain(frame_len: usize) -> f64 {
    // a unit-variance white signal has bin power Σw² = L/2 under √Hann
    1.0 / (frame_len as f64 / 2.0).sqrt()
}

impl CospaConfig {
    /// Reduced widths for CPU-scale experiments; frame layout unchanged.
    pub fn desk() -> Self {
        Self {
            l1: 64,
            l2: 64,
            l3: 64,
            l4: 128,
            l5: 64,
            l6: 64,
            crunet: CrunetConfig {
                widths: vec![4, 8, 16, 16],
                kernel: 5,
                stride: 2,
                gru_hidden: 32,
            },
            ..Self::default()
        }
    }

    /// Two channels, 16-sample frames (9 bins); small enough for
    /// finite-difference checks of the whole network.
    pub fn tiny() -> Self {
        Self {
            channels: 2,
            frame_len: 16,
            hop: 8,
            l1: 3,
            l2: 4,
            l3: 3,
            l4: 5,
            l5: 4,
            l6: 4,
            input_gain: default_gain(16),
            crunet: CrunetConfig {
                widths: vec![2, 3],
                kernel: 3,
                stride: 2,
                gru_hidden: 3,
            },
            ..Self::default()
        }
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Length of the fused encoder vector `h(τ)`.
    pub fn compandor_input(&self) -> usize {
        2 * self.channels * self.l1
    }

    /// Length of the compandor output, split into per-channel excitations.
    pub fn compandor_output(&self) -> usize {
        self.channels * self.l4
    }

    fn enc_geom(&self) -> ConvGeom {
        conv_geom(1, 1, self.enc_kernel, self.enc_stride, self.enc_kernel / 2)
    }

    /// Length after the downsampling convolution, before the FC to `l1`.
    pub fn enc_conv_len(&self) -> Option<usize> {
        self.enc_geom().conv_out_len(self.bins())
    }

    pub fn frame_spec(&self) -> Result<FrameSpec> {
        FrameSpec::new(self.frame_len, self.hop, self.sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.l1, self.l2, self.l3, self.l4, self.l5, self.l6, self.enc_kernel, self.enc_stride];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("cospa: zero-sized dimension".into()));
        }
        if !(self.input_gain > 0.0) || !(self.leaky_slope >= 0.0) {
            return Err(Error::InvalidArgument("cospa: input gain and leaky slope must be positive".into()));
        }
        if self.enc_conv_len().is_none() {
            return Err(Error::InvalidArgument("cospa: encoder kernel longer than the spectrum".into()));
        }
        self.frame_spec()?;
        self.crunet.validate(self.bins())
    }
}

/// Complex U-Net mask estimator working on one channel, `[T, F] -> [T, F]`.
#[derive(Debug, Clone)]
pub struct Crunet {
    enc: Vec<CConv1d>,
    gru: CGru,
    fc: CFc,
    dec: Vec<CConvT1d>,
    lens: Vec<usize>,
    widths: Vec<usize>,
    slope: f64,
}

impl Crunet {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: &CrunetConfig, bins: usize, slope: f64) -> Result<Self> {
        cfg.validate(bins)?;
        let lens = cfg.lengths(bins)?;
        let n = cfg.widths.len();
        let pad = cfg.padding();
        let mut enc = Vec::with_capacity(n);
        let mut prev = 1;
        for (i, &w) in cfg.widths.iter().enumerate() {
            enc.push(CConv1d::new(store, rng, &format!("{prefix}.enc{i}"), conv_geom(prev, w, cfg.kernel, cfg.stride, pad))?);
            prev = w;
        }
        let deepest = cfg.widths[n - 1];
        let gru = CGru::new(store, rng, &format!("{prefix}.gru"), deepest, cfg.gru_hidden)?;
        let fc = CFc::new(store, rng, &format!("{prefix}.fc"), cfg.gru_hidden, deepest)?;
        let mut dec = Vec::with_capacity(n);
        for i in 0..n {
            let level = n - 1 - i;
            let in_ch = 2 * cfg.widths[level];
            let out_ch = if level == 0 { 1 } else { cfg.widths[level - 1] };
            let mut g = conv_geom(in_ch, out_ch, cfg.kernel, cfg.stride, pad);
            g.output_padding = transposed_padding(cfg, lens[level + 1], lens[level])?;
            dec.push(CConvT1d::new(store, rng, &format!("{prefix}.dec{i}"), g)?);
        }
        Ok(Self {
            enc,
            gru,
            fc,
            dec,
            lens,
            widths: cfg.widths.clone(),
            slope,
        })
    }

    /// Number of bottleneck positions, each with its own GRU state.
    pub fn positions(&self) -> usize {
        *self.lens.last().expect("nonempty")
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    pub fn bins(&self) -> usize {
        self.lens[0]
    }

    /// Zero recurrent state `[positions, hidden]`.
    pub fn zero_state(&self) -> CTensor {
        CTensor::zeros(vec![self.positions(), self.hidden()])
    }

    /// `x [T, F]` and state `h0 [P, H]` to the mask `[T, F]` and final state.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, h0: Var) -> Result<(Var, Var)> {
        let f = self.bins();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != f {
            return Err(shape_err("crunet input", ("T", f), shape));
        }
        let t = shape[0];
        let mut cur = tape.reshape(x, vec![t, 1, f])?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for conv in &self.enc {
            let y = conv.forward(tape, cur)?;
            cur = tape.leaky_relu(y, self.slope);
            skips.push(cur);
        }
        let p = self.positions();
        let w = *self.widths.last().expect("nonempty");
        let seq = tape.transpose_last(cur)?;
        let rows = tape.reshape(seq, vec![t * p, w])?;
        let (hs, h_last) = self.gru.sequence(tape, rows, p, h0)?;
        let y = self.fc.forward(tape, hs)?;
        let y = tape.leaky_relu(y, self.slope);
        let y = tape.reshape(y, vec![t, p, w])?;
        cur = tape.transpose_last(y)?;
        let n = self.dec.len();
        for (i, dec) in self.dec.iter().enumerate() {
            let level = n - 1 - i;
            let cat = tape.concat(&[cur, skips[level]])?;
            let cat = tape.reshape(cat, vec![t, 2 * self.widths[level], self.lens[level + 1]])?;
            let y = dec.forward(tape, cat)?;
            cur = if level == 0 { y } else { tape.leaky_relu(y, self.slope) };
        }
        let o = tape.reshape(cur, vec![t, f])?;
        Ok((tape.bounded_mask(o), h_last))
    }
}

/// Recurrent state carried between calls to [`Cospa::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CospaState {
    pub crunet: CTensor,
    pub compandor: CTensor,
}

/// Tape handles produced by the encoder stage.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Shared mask `G [T, F]`.
    pub shared_mask: Var,
    /// `G ⊙ X_m`, `[T·M, F]`.
    pub speech: Var,
    /// `X_m - G ⊙ X_m`, `[T·M, F]`.
    pub noise: Var,
    /// Fused streams `h [T, 2·M·L1]`: all speech streams, then all noise
    /// streams, channel by channel.
    pub fused: Var,
    pub crunet_state: Var,
}

/// Tape handles of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CospaForward {
    pub encoded: Encoded,
    /// Excitations `[T·M, L4]`.
    pub excitations: Var,
    /// Masks `[T·M, F]`.
    pub masks: Var,
    pub compandor_state: Var,
}

/// Layer handles of the full model; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Cospa {
    pub config: CospaConfig,
    pub crunet: Crunet,
    conv_s: CConv1d,
    fc_s: CFc,
    conv_n: CConv1d,
    fc_n: CFc,
    comp_in: CFc,
    comp_gru: CGru,
    comp_out: CFc,
    dec1: CFc,
    bn1: CBatchNorm,
    dec2: CFc,
    bn2: CBatchNorm,
    dec3: CFc,
}

impl Cospa {
    /// Registers every parameter in `store` under stable names.
    pub fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, config: CospaConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let f = c.bins();
        let crunet = Crunet::new(store, rng, "crunet", &c.crunet, f, c.leaky_slope)?;
        let down = c.enc_conv_len().expect("validated");
        let conv_s = CConv1d::new(store, rng, "encoder.conv_s", c.enc_geom())?;
        let fc_s = CFc::new(store, rng, "encoder.fc_s", down, c.l1)?;
        let conv_n = CConv1d::new(store, rng, "encoder.conv_n", c.enc_geom())?;
        let fc_n = CFc::new(store, rng, "encoder.fc_n", down, c.l1)?;
        let comp_in = CFc::new(store, rng, "compandor.fc_in", c.compandor_input(), c.l2)?;
        let comp_gru = CGru::new(store, rng, "compandor.gru", c.l2, c.l3)?;
        let comp_out = CFc::new(store, rng, "compandor.fc_out", c.l3, c.compandor_output())?;
        let dec1 = CFc::new(store, rng, "decoder.fc1", c.l4, c.l5)?;
        let bn1 = CBatchNorm::new(store, "decoder.bn1", c.l5)?;
        let dec2 = CFc::new(store, rng, "decoder.fc2", c.l5, c.l6)?;
        let bn2 = CBatchNorm::new(store, "decoder.bn2", c.l6)?;
        let dec3 = CFc::new(store, rng, "decoder.fc3", c.l6, f)?;
        Ok(Self {
            config,
            crunet,
            conv_s,
            fc_s,
            conv_n,
            fc_n,
            comp_in,
            comp_gru,
            comp_out,
            dec1,
            bn1,
            dec2,
            bn2,
            dec3,
        })
    }

    pub fn zero_state(&self) -> CospaState {
        CospaState {
            crunet: self.crunet.zero_state(),
            compandor: CTensor::zeros(vec![1, self.config.l3]),
        }
    }

    fn frames_of(&self, tape: &Tape<'_>, x: Var) -> Result<usize> {
        let (m, f) = (self.config.channels, self.config.bins());
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != f || s[0] % m != 0 {
            return Err(shape_err("cospa input", ("T*M", f), s));
        }
        Ok(s[0] / m)
    }

    fn downsample(&self, tape: &mut Tape<'_>, x: Var, conv: &CConv1d, fc: &CFc) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let f = self.config.bins();
        let x3 = tape.reshape(x, vec![rows, 1, f])?;
        let y = conv.forward(tape, x3)?;
        let len = tape.shape(y)[2];
        let y = tape.reshape(y, vec![rows, len])?;
        fc.forward(tape, y)
    }

    /// Shared mask from channel 1, the complementary speech/noise estimates
    /// and the fused, downsampled representation `h(τ)`.
    pub fn encode(&self, tape: &mut Tape<'_>, x: Var, crunet_h0: Var) -> Result<Encoded> {
        let t = self.frames_of(tape, x)?;
        let (m, f) = (self.config.channels, self.config.bins());
        let wide = tape.reshape(x, vec![t, m * f])?;
        let x1 = tape.slice_cols(wide, 0, f)?;
        let (g, crunet_state) = self.crunet.forward(tape, x1, crunet_h0)?;
        self.encode_with_mask(tape, x, g, crunet_state)
    }

    /// [`Cospa::encode`] with a given shared mask `g [T, F]`.
    pub fn encode_with_mask(&self, tape: &mut Tape<'_>, x: Var, g: Var, crunet_state: Var) -> Result<Encoded> {
        let t = self.frames_of(tape, x)?;
        let (m, l1) = (self.config.channels, self.config.l1);
        let g_rep = tape.repeat_rows(g, m);
        let speech = tape.mul(g_rep, x)?;
        let noise = tape.sub(x, speech)?;
        let hs = self.downsample(tape, speech, &self.conv_s, &self.fc_s)?;
        let hn = self.downsample(tape, noise, &self.conv_n, &self.fc_n)?;
        let hs = tape.reshape(hs, vec![t, m * l1])?;
        let hn = tape.reshape(hn, vec![t, m * l1])?;
        let fused = tape.concat(&[hs, hn])?;
        Ok(Encoded {
            shared_mask: g,
            speech,
            noise,
            fused,
            crunet_state,
        })
    }

    /// `h [T, 2·M·L1]` to excitations `[T·M, L4]` and the final GRU state.
    pub fn compandor(&self, tape: &mut Tape<'_>, h: Var, h0: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let s = tape.shape(h).to_vec();
        if s.len() != 2 || s[1] != c.compandor_input() {
            return Err(shape_err("compandor input", ("T", c.compandor_input()), s));
        }
        let t = s[0];
        let y = self.comp_in.forward(tape, h)?;
        let y = tape.leaky_relu(y, c.leaky_slope);
        let (y, state) = self.comp_gru.sequence(tape, y, 1, h0)?;
        let y = self.comp_out.forward(tape, y)?;
        let y = tape.leaky_relu(y, c.leaky_slope);
        let d = tape.reshape(y, vec![t * c.channels, c.l4])?;
        Ok((d, state))
    }

    /// Excitations `[R, L4]` to bounded masks `[R, F]`; one parameter set
    /// for every row.
    pub fn decode(&self, tape: &mut Tape<'_>, d: Var, training: bool) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let y = self.dec1.forward(tape, d)?;
        let y = self.bn1.forward(tape, y, training)?;
        let y = tape.leaky_relu(y, slope);
        let y = self.dec2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, training)?;
        let y = tape.leaky_relu(y, slope);
        let o = self.dec3.forward(tape, y)?;
        Ok(tape.bounded_mask(o))
    }

    /// Masks for the scaled input spectra `x [T·M, F]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, state: &CospaState, training: bool) -> Result<CospaForward> {
        let h_crunet = tape.constant(state.crunet.clone());
        let h_comp = tape.constant(state.compandor.clone());
        let encoded = self.encode(tape, x, h_crunet)?;
        let (excitations, compandor_state) = self.compandor(tape, encoded.fused, h_comp)?;
        let masks = self.decode(tape, excitations, training)?;
        Ok(CospaForward {
            encoded,
            excitations,
            masks,
            compandor_state,
        })
    }

    /// SNR loss of the filter-and-sum output against `example.target`.
    pub fn loss(&self, tape: &mut Tape<'_>, example: &Example, training: bool) -> Result<Var> {
        let x = tape.constant(example.spectra.clone());
        let feats = tape.scale(x, C64::new(self.config.input_gain, 0.0));
        let out = self.forward(tape, feats, &self.zero_state(), training)?;
        let y = filter_and_sum(tape, x, out.masks, self.config.channels)?;
        reconstruct_loss(tape, y, &self.config.frame_spec()?, &example.target)
    }

    /// Masks for a whole scene in inference mode, `[T·M, F]` values.
    pub fn infer_masks(&self, store: &ParamStore, spectra: &[Spectrogram]) -> Result<MultiFilter> {
        let x = interleave(spectra, self.config.channels, self.config.bins())?;
        let frames = x.shape()[0] / self.config.channels;
        let mut tape = Tape::new(store);
        let xv = tape.constant(x);
        let feats = tape.scale(xv, C64::new(self.config.input_gain, 0.0));
        let out = self.forward(&mut tape, feats, &self.zero_state(), false)?;
        MultiFilter::from_rows(frames, self.config.bins(), self.config.channels, tape.value(out.masks))
    }
}

/// `Σ_m masks[τ·M+m] ⊙ x[τ·M+m]`: `[T·M, F]` pairs to `[T, F]`.
pub fn filter_and_sum(tape: &mut Tape<'_>, x: Var, masks: Var, channels: usize) -> Result<Var> {
    let prod = tape.mul(masks, x)?;
    tape.sum_row_groups(prod, channels)
}

/// Overlap-add of `y [T, F]` and the SNR loss against `target`.
pub fn reconstruct_loss(tape: &mut Tape<'_>, y: Var, spec: &FrameSpec, target: &[f64]) -> Result<Var> {
    let s = tape.istft(y, &spec.window, spec.hop, spec.offset(), target.len())?;
    tape.snr_loss(s, target)
}

/// Plain SNR loss value, `-10 log10(|s|² / (|s - ŝ|² + 1e-10 |s|²))`.
pub fn snr_loss(target: &[f64], estimate: &[f64]) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(shape_err("snr_loss", target.len(), estimate.len()));
    }
    let t: f64 = target.iter().map(|v| v * v).sum();
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("snr_loss: zero-energy target".into()));
    }
    let e: f64 = target.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-10.0 * (t / (e + 1e-10 * t)).log10())
}

/// Packs channel spectrograms `[M][T][F]` into a `[T·M, F]` tensor.
pub fn interleave(spectra: &[Spectrogram], channels: usize, bins: usize) -> Result<CTensor> {
    if spectra.len() != channels {
        return Err(shape_err("channels", channels, spectra.len()));
    }
    let frames = spectra[0].len();
    let mut data = Vec::with_capacity(frames * channels * bins);
    for t in 0..frames {
        for s in spectra {
            let row = s.get(t).ok_or_else(|| shape_err("frames", frames, s.len()))?;
            if row.len() != bins {
                return Err(shape_err("bins", bins, row.len()));
            }
            data.extend_from_slice(row);
        }
    }
    CTensor::new(vec![frames * channels, bins], data)
}

/// One training sequence: interleaved mixture spectra `[T·M, F]` and the
/// time-domain target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub spectra: CTensor,
    pub target: Vec<f64>,
}

impl Example {
    /// Mixture of all channels with the beamformed speech target.
    pub fn for_cospa(stft: &Stft, scene: &RenderedScene) -> Result<Self> {
        let target = make_target(stft, scene)?;
        let spectra = analyze_channels(stft, &scene.mixture);
        Ok(Self {
            id: scene.spec.id.clone(),
            spectra: interleave(&spectra, scene.n_mics(), stft.spec().bins())?,
            target: target.signal,
        })
    }

    /// Mixture at microphone 1 with that microphone's reverberant speech as
    /// target.
    pub fn for_crunet(stft: &Stft, scene: &RenderedScene) -> Result<Self> {
        let spectra = vec![stft.analyze(&scene.mixture[0])];
        Ok(Self {
            id: scene.spec.id.clone(),
            spectra: interleave(&spectra, 1, stft.spec().bins())?,
            target: scene.speech[0].clone(),
        })
    }
}

/// Single-channel baseline: the U-Net mask applied to its own input.
#[derive(Debug, Clone)]
pub struct CrunetModel {
    pub config: CospaConfig,
    pub net: Crunet,
}

impl CrunetModel {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, config: CospaConfig) -> Result<Self> {
        config.validate()?;
        let net = Crunet::new(store, rng, "crunet", &config.crunet, config.bins(), config.leaky_slope)?;
        Ok(Self { config, net })
    }

    pub fn loss(&self, tape: &mut Tape<'_>, example: &Example) -> Result<Var> {
        let x = tape.constant(example.spectra.clone());
        let feats = tape.scale(x, C64::new(self.config.input_gain, 0.0));
        let h0 = tape.constant(self.net.zero_state());
        let (g, _) = self.net.forward(tape, feats, h0)?;
        let y = tape.mul(g, x)?;
        reconstruct_loss(tape, y, &self.config.frame_spec()?, &example.target)
    }

    /// Mask sequence `[T][F]` for one channel's spectrogram.
    pub fn infer_mask(&self, store: &ParamStore, spectrum: &Spectrogram) -> Result<Spectrogram> {
        let f = self.config.bins();
        let x = interleave(core::slice::from_ref(spectrum), 1, f)?;
        let mut tape = Tape::new(store);
        let xv = tape.constant(x);
        let feats = tape.scale(xv, C64::new(self.config.input_gain, 0.0));
        let h0 = tape.constant(self.net.zero_state());
        let (g, _) = self.net.forward(&mut tape, feats, h0)?;
        Ok(tape.value(g).chunks_exact(f).map(<[C64]>::to_vec).collect())
    }
}

/// Anything trainable by [`Trainer`].
pub trait Model {
    fn loss(&self, tape: &mut Tape<'_>, example: &Example) -> Result<Var>;
}

impl Model for Cospa {
    fn loss(&self, tape: &mut Tape<'_>, example: &Example) -> Result<Var> {
        Cospa::loss(self, tape, example, true)
    }
}

impl Model for CrunetModel {
    fn loss(&self, tape: &mut Tape<'_>, example: &Example) -> Result<Var> {
        CrunetModel::loss(self, tape, example)
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Gradients are rescaled so their global norm does not exceed this.
    pub clip_norm: Option<f64>,
    /// Training stops once an epoch's mean loss is at or below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: Some(10.0),
            stop_below: None,
        }
    }
}

/// Parameters, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Mean loss of every completed epoch.
    pub history: Vec<f64>,
}

impl Trainer {
    pub fn new(params: ParamStore, learning_rate: f64) -> Self {
        Self {
            params,
            adam: AdamState::new(learning_rate),
            history: Vec::new(),
        }
    }

    /// One gradient step on `example`; returns its loss.
    pub fn step<M: Model>(&mut self, model: &M, example: &Example, clip_norm: Option<f64>) -> Result<f64> {
        let (loss, grads, buffers) = {
            let mut tape = Tape::new(&self.params);
            let l = model.loss(&mut tape, example)?;
            let v = tape.value(l)[0].re;
            if !v.is_finite() {
                return Err(Error::NanLoss { scene: example.id.clone() });
            }
            (v, tape.backward(l)?, tape.take_buffer_updates())
        };
        self.params.clear_grads();
        self.params.accumulate(&grads)?;
        if let Some(limit) = clip_norm {
            clip_gradients(&mut self.params, limit)?;
        }
        self.params.apply_buffer_updates(buffers)?;
        adam_step(&mut self.params, &mut self.adam)?;
        Ok(loss)
    }

    /// One pass over `examples` in a seeded order; returns the mean loss.
    pub fn epoch<M: Model>(&mut self, model: &M, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("training examples"));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (self.history.len() as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for i in order {
            total += self.step(model, &examples[i], cfg.clip_norm)?;
        }
        let mean = total / examples.len() as f64;
        self.history.push(mean);
        Ok(mean)
    }

    /// Runs up to `cfg.epochs` epochs, calling `on_epoch(index, loss)` after
    /// each.
    pub fn fit<M: Model>(&mut self, model: &M, examples: &[Example], cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
        for _ in 0..cfg.epochs {
            let loss = self.epoch(model, examples, cfg)?;
            on_epoch(self.history.len(), loss);
            if cfg.stop_below.is_some_and(|s| loss <= s) {
                break;
            }
        }
        Ok(())
    }
}

fn clip_gradients(params: &mut ParamStore, limit: f64) -> Result<()> {
    let ids: Vec<_> = params.trainable_ids().collect();
    let norm: f64 = ids
        .iter()
        .filter_map(|&id| params.get(id).grad())
        .flat_map(|g| g.iter().map(|v| v.norm_sqr()))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > limit {
        let s = limit / norm;
        for id in ids {
            let t = params.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<C64> = g.iter().map(|v| v * s).collect();
                t.clear_grad();
                t.accumulate_grad(&scaled)?;
            }
        }
    }
    Ok(())
}

/// Frame-by-frame inference with carried recurrent state.
#[derive(Debug, Clone)]
pub struct CospaStream<'m> {
    model: &'m Cospa,
    state: CospaState,
}

impl<'m> CospaStream<'m> {
    pub fn new(model: &'m Cospa) -> Self {
        Self {
            state: model.zero_state(),
            model,
        }
    }

    pub fn reset(&mut self) {
        self.state = self.model.zero_state();
    }

    /// Masks for one multichannel frame (`frame[m]` has `F` bins) and the
    /// filter-and-sum output bins.
    pub fn process(&mut self, store: &ParamStore, frame: &[Vec<C64>]) -> Result<(Vec<C64>, Vec<C64>)> {
        let (m, f) = (self.model.config.channels, self.model.config.bins());
        if frame.len() != m {
            return Err(shape_err("stream frame channels", m, frame.len()));
        }
        let mut data = Vec::with_capacity(m * f);
        for ch in frame {
            if ch.len() != f {
                return Err(shape_err("stream frame bins", f, ch.len()));
            }
            data.extend_from_slice(ch);
        }
        let mut tape = Tape::new(store);
        let x = tape.constant_from(vec![m, f], data)?;
        let feats = tape.scale(x, C64::new(self.model.config.input_gain, 0.0));
        let out = self.model.forward(&mut tape, feats, &self.state, false)?;
        let y = filter_and_sum(&mut tape, x, out.masks, m)?;
        self.state = CospaState {
            crunet: tape.tensor(out.encoded.crunet_state),
            compandor: tape.tensor(out.compandor_state),
        };
        Ok((tape.value(out.masks).to_vec(), tape.value(y).to_vec()))
    }
}

/// Isolated components after filtering with the same per-bin filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredComponents {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
    pub music: Vec<f64>,
    pub sensor: Vec<f64>,
    pub mixture: Vec<f64>,
}

/// Applies `filter` (derived from the mixture) to every isolated component
/// of `scene` and to the mixture itself.
pub fn shadow_filter(filter: &MultiFilter, stft: &Stft, scene: &RenderedScene) -> Result<FilteredComponents> {
    let n = scene.n_samples();
    for part in [&scene.speech, &scene.noise, &scene.music, &scene.sensor] {
        if part.len() != scene.n_mics() || part.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("component shape differs from the mixture".into()));
        }
    }
    Ok(FilteredComponents {
        speech: filter.apply_time(stft, &scene.speech)?,
        noise: filter.apply_time(stft, &scene.noise)?,
        music: filter.apply_time(stft, &scene.music)?,
        sensor: filter.apply_time(stft, &scene.sensor)?,
        mixture: filter.apply_time(stft, &scene.mixture)?,
    })
}

/// Per-frame masks `[τ][f]` of one channel applied to that channel only.
pub fn single_channel_filter(masks: &Spectrogram, channels: usize, ch: usize) -> MultiFilter {
    let frames = masks.len();
    let bins = masks.first().map_or(0, Vec::len);
    let mut f = MultiFilter::zeros(frames, bins, channels);
    for (t, row) in masks.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            *f.get_mut(t, k, ch) = *v;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::finite_diff_check;
    use rand::Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_frames(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> CTensor {
        let data = (0..rows * cols)
            .map(|_| c(rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale))
            .collect();
        CTensor::new(vec![rows, cols], data).unwrap()
    }

    fn tiny_model(seed: u64) -> (ParamStore, Cospa) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Cospa::new(&mut store, &mut rng, CospaConfig::tiny()).unwrap();
        (store, model)
    }

    #[test]
    fn default_dimensions() {
        let cfg = CospaConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.bins(), 513);
        assert_eq!(cfg.compandor_input(), 2600);
        assert_eq!(cfg.compandor_output(), 2565);
        assert_eq!(cfg.enc_conv_len(), Some(257));
        assert_eq!(cfg.crunet.lengths(513).unwrap(), vec![513, 257, 129, 65, 33]);
        CospaConfig::desk().validate().unwrap();
        CospaConfig::tiny().validate().unwrap();
        let bad = CospaConfig { l1: 0, ..CospaConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_model_shapes_and_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Cospa::new(&mut store, &mut rng, CospaConfig::default()).unwrap();
        let count = store.real_param_count();
        assert!((2_200_000..=3_200_000).contains(&count), "{count}");
        let mut tape = Tape::new(&store);
        let x = tape.constant(random_frames(&mut rng, 2 * 5, 513, 1.0));
        let out = model.forward(&mut tape, x, &model.zero_state(), false).unwrap();
        assert_eq!(tape.shape(out.encoded.fused), &[2, 2600]);
        assert_eq!(tape.shape(out.excitations), &[10, 513]);
        assert_eq!(tape.shape(out.masks), &[10, 513]);
        assert!(tape.value(out.masks).iter().all(|v| v.norm() <= 1.0));
    }

    #[test]
    fn crunet_mask_is_bounded_and_stateful() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = CospaConfig::desk();
        let net = Crunet::new(&mut store, &mut rng, "crunet", &cfg.crunet, cfg.bins(), cfg.leaky_slope).unwrap();
        let x = random_frames(&mut rng, 10, 513, 3.0);
        let run = |x: CTensor| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x);
            let h0 = tape.constant(net.zero_state());
            let (g, _) = net.forward(&mut tape, xv, h0).unwrap();
            tape.value(g).to_vec()
        };
        let a = run(x.clone());
        assert!(a.iter().all(|v| v.norm() <= 1.0));
        // swap frames 0 and 1: frame 1's output now sees a different history
        let mut swapped = x.data().to_vec();
        let (first, rest) = swapped.split_at_mut(513);
        first.swap_with_slice(&mut rest[..513]);
        let b = run(CTensor::new(vec![10, 513], swapped).unwrap());
        assert_ne!(&a[513..1026], &b[..513]);
    }

    #[test]
    fn crunet_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = CospaConfig::tiny();
        let net = Crunet::new(&mut store, &mut rng, "crunet", &cfg.crunet, 9, cfg.leaky_slope).unwrap();
        let x = random_frames(&mut rng, 3, 9, 1.0);
        let err = finite_diff_check(&mut store, 1e-5, |tape| {
            let xv = tape.constant(x.clone());
            let h0 = tape.constant(net.zero_state());
            let (g, _) = net.forward(tape, xv, h0)?;
            let y = tape.mul(g, xv)?;
            Ok(tape.sum_abs_sq(y))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn encoder_identities() {
        let (store, model) = tiny_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_frames(&mut rng, 3 * 2, 9, 1.0);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let h0 = tape.constant(model.crunet.zero_state());
        let enc = model.encode(&mut tape, xv, h0).unwrap();
        let (s, n) = (tape.value(enc.speech), tape.value(enc.noise));
        for ((a, b), v) in s.iter().zip(n).zip(x.data()) {
            assert!((a + b - v).norm() <= 4.0 * f64::EPSILON * v.norm().max(1.0));
        }
        // channels of a frame share the mask, so relative phases survive
        for t in 0..3 {
            for f in 0..9 {
                let (x0, x1) = (x.data()[(2 * t) * 9 + f], x.data()[(2 * t + 1) * 9 + f]);
                let (s0, s1) = (s[(2 * t) * 9 + f], s[(2 * t + 1) * 9 + f]);
                if s0.norm() > 1e-9 && s1.norm() > 1e-9 {
                    let d = ((s0 / s1) / (x0 / x1)).arg();
                    assert!(d.abs() < 1e-9);
                }
            }
        }
        assert_eq!(tape.shape(enc.fused), &[3, 2 * 2 * 3]);
        // G = 1 passes everything to the speech branch
        let ones = tape.constant_from(vec![3, 9], vec![c(1.0, 0.0); 27]).unwrap();
        let enc = model.encode_with_mask(&mut tape, xv, ones, h0).unwrap();
        assert_eq!(tape.value(enc.speech), x.data());
        assert!(tape.value(enc.noise).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn compandor_zero_input_and_memory() {
        let (store, model) = tiny_model(6);
        let cfg = &model.config;
        let mut tape = Tape::new(&store);
        let h = tape.constant(CTensor::zeros(vec![4, cfg.compandor_input()]));
        let h0 = tape.constant(CTensor::zeros(vec![1, cfg.l3]));
        let (d, _) = model.compandor(&mut tape, h, h0).unwrap();
        assert_eq!(tape.shape(d), &[8, cfg.l4]);
        assert!(tape.value(d).iter().all(|v| v.norm() == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hist_a = random_frames(&mut rng, 3, cfg.compandor_input(), 1.0);
        let hist_b = random_frames(&mut rng, 3, cfg.compandor_input(), 1.0);
        let last = random_frames(&mut rng, 1, cfg.compandor_input(), 1.0);
        let mut outs = Vec::new();
        for hist in [hist_a, hist_b] {
            let mut data = hist.data().to_vec();
            data.extend_from_slice(last.data());
            let hv = tape.constant_from(vec![4, cfg.compandor_input()], data).unwrap();
            let (d, _) = model.compandor(&mut tape, hv, h0).unwrap();
            outs.push(tape.value(d)[6 * cfg.l4..].to_vec());
        }
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn decoder_shares_weights() {
        let (store, model) = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = random_frames(&mut rng, 1, 5, 1.0);
        let other = random_frames(&mut rng, 1, 5, 1.0);
        let mut data = row.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(row.data());
        for training in [false, true] {
            let mut tape = Tape::new(&store);
            let d = tape.constant_from(vec![3, 5], data.clone()).unwrap();
            let masks = model.decode(&mut tape, d, training).unwrap();
            let v = tape.value(masks);
            assert_eq!(tape.shape(masks), &[3, 9]);
            assert_eq!(&v[..9], &v[18..]);
            assert!(v.iter().all(|m| m.norm() <= 1.0));
        }
    }

    #[test]
    fn filter_and_sum_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frame = random_frames(&mut rng, 1, 4, 1.0);
        let x: Vec<C64> = (0..3).flat_map(|_| frame.data().to_vec()).collect();
        let xv = tape.constant_from(vec![3, 4], x).unwrap();
        let third = tape.constant_from(vec![3, 4], vec![c(1.0 / 3.0, 0.0); 12]).unwrap();
        let y = filter_and_sum(&mut tape, xv, third, 3).unwrap();
        for (a, b) in tape.value(y).iter().zip(frame.data()) {
            assert!((a - b).norm() < 1e-15);
        }
        let zero = tape.constant(CTensor::zeros(vec![3, 4]));
        let y = filter_and_sum(&mut tape, xv, zero, 3).unwrap();
        assert!(tape.value(y).iter().all(|v| v.norm() == 0.0));
        // plane wave with per-mic phase φ_m: masks e^{-jφ_m}/M align it
        let phases = [0.0, 0.7, 1.9];
        let s = c(0.8, -0.3);
        let x: Vec<C64> = phases.iter().map(|p| s * C64::from_polar(1.0, *p)).collect();
        let m: Vec<C64> = phases.iter().map(|p| C64::from_polar(1.0 / 3.0, -p)).collect();
        let xv = tape.constant_from(vec![3, 1], x).unwrap();
        let mv = tape.constant_from(vec![3, 1], m).unwrap();
        let y = filter_and_sum(&mut tape, xv, mv, 3).unwrap();
        assert!((tape.value(y)[0] - s).norm() < 1e-15);
    }

    #[test]
    fn snr_loss_examples() {
        let t: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        assert!(snr_loss(&t, &vec![0.0; 100]).unwrap().abs() < 1e-8);
        assert!((snr_loss(&t, &t).unwrap() + 100.0).abs() < 1e-9);
        let half: Vec<f64> = t.iter().map(|v| v * 0.5).collect();
        assert!((snr_loss(&t, &half).unwrap() + 6.0206).abs() < 1e-3);
        assert!(snr_loss(&vec![0.0; 100], &t).is_err());
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let e = tape.constant(CTensor::from_real(vec![100], &half).unwrap());
        let l = tape.snr_loss(e, &t).unwrap();
        assert!((tape.value(l)[0].re - snr_loss(&t, &half).unwrap()).abs() < 1e-12);
    }

    fn tiny_example(rng: &mut ChaCha8Rng, frames: usize) -> Example {
        let cfg = CospaConfig::tiny();
        let n = (frames - 1) * cfg.hop;
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stft = Stft::new(cfg.frame_spec().unwrap()).unwrap();
        let mics: Vec<Vec<f64>> = (0..2).map(|_| target.iter().map(|v| v + 0.5 * rng.gen_range(-1.0..1.0)).collect()).collect();
        let spectra = analyze_channels(&stft, &mics);
        Example {
            id: "tiny".into(),
            spectra: interleave(&spectra, 2, 9).unwrap(),
            target,
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (mut store, model) = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ex = tiny_example(&mut rng, 5);
        let err = finite_diff_check(&mut store, 1e-5, |tape| model.loss(tape, &ex, true)).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn streaming_matches_batch_and_is_causal() {
        let (store, model) = tiny_model(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_frames(&mut rng, 6 * 2, 9, 2.0);
        let batch = |rows: usize| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant_from(vec![rows, 9], x.data()[..rows * 9].to_vec()).unwrap();
            let out = model.forward(&mut tape, xv, &model.zero_state(), false).unwrap();
            tape.value(out.masks).to_vec()
        };
        let full = batch(12);
        let prefix = batch(6);
        assert_eq!(&full[..prefix.len()], &prefix[..]);
        let mut stream = CospaStream::new(&model);
        let mut streamed = Vec::new();
        for t in 0..6 {
            let frame: Vec<Vec<C64>> = (0..2).map(|m| x.data()[(2 * t + m) * 9..(2 * t + m + 1) * 9].to_vec()).collect();
            let (masks, _) = stream.process(&store, &frame).unwrap();
            streamed.extend(masks);
        }
        // the stream sees raw spectra and scales them itself
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let feats = tape.scale(xv, C64::new(model.config.input_gain, 0.0));
        let out = model.forward(&mut tape, feats, &model.zero_state(), false).unwrap();
        assert_eq!(tape.value(out.masks), &streamed[..]);
    }

    #[test]
    fn inferred_filter_reproduces_the_training_output() {
        let (store, model) = tiny_model(21);
        let stft = Stft::new(model.config.frame_spec().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let signals: Vec<Vec<f64>> = (0..2).map(|_| (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let spectra = analyze_channels(&stft, &signals);
        let y = model.infer_masks(&store, &spectra).unwrap().apply_time(&stft, &signals).unwrap();
        let ex = Example {
            id: "x".into(),
            spectra: interleave(&spectra, 2, 9).unwrap(),
            target: vec![1.0; 120],
        };
        let mut tape = Tape::new(&store);
        let x = tape.constant(ex.spectra.clone());
        let feats = tape.scale(x, C64::new(model.config.input_gain, 0.0));
        let out = model.forward(&mut tape, feats, &model.zero_state(), false).unwrap();
        let yt = filter_and_sum(&mut tape, x, out.masks, 2).unwrap();
        let spec = model.config.frame_spec().unwrap();
        let s = tape.istft(yt, &spec.window, spec.hop, spec.offset(), 120).unwrap();
        for (a, b) in y.iter().zip(tape.value(s)) {
            assert!((a - b.re).abs() < 1e-12);
        }
        let mut t2 = Tape::new(&store);
        let l = model.loss(&mut t2, &ex, false).unwrap();
        assert!((t2.value(l)[0].re - snr_loss(&ex.target, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let examples: Vec<Example> = (0..3).map(|_| tiny_example(&mut rng, 12)).collect();
        let cfg = TrainConfig {
            epochs: 60,
            learning_rate: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let (store, model) = tiny_model(16);
            let mut trainer = Trainer::new(store, cfg.learning_rate);
            trainer.fit(&model, &examples, &cfg, |_, _| {}).unwrap();
            trainer
        };
        let a = run();
        let b = run();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(a.history, b.history);
        let first: f64 = a.history[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = a.history[a.history.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first - 1.0, "{first} -> {last}");
    }

    #[test]
    fn nan_loss_names_the_scene() {
        let (store, model) = tiny_model(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut ex = tiny_example(&mut rng, 4);
        ex.id = "bad-scene".into();
        ex.spectra.data_mut()[0] = c(f64::NAN, 0.0);
        let mut trainer = Trainer::new(store, 1e-3);
        match trainer.step(&model, &ex, None) {
            Err(Error::NanLoss { scene }) => assert_eq!(scene, "bad-scene"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shadow_filter_is_linear() {
        use crate::scene::{render_scene, sample_scene, synth_dry_signals, SceneRanges};
        let ranges = SceneRanges {
            duration: 0.3,
            ..SceneRanges::default()
        };
        let spec = sample_scene(1, &ranges).unwrap();
        let scene = render_scene(&spec, &synth_dry_signals(&spec)).unwrap();
        let stft = Stft::new(FrameSpec::default()).unwrap();
        let frames = stft.spec().frame_count(scene.n_samples());
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let coeffs = (0..frames * 513 * 5).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let filter = MultiFilter::from_coeffs(frames, 513, 5, coeffs).unwrap();
        let out = shadow_filter(&filter, &stft, &scene).unwrap();
        for i in 0..scene.n_samples() {
            let sum = out.speech[i] + out.noise[i] + out.music[i] + out.sensor[i];
            assert!((sum - out.mixture[i]).abs() < 1e-9);
        }
        let sel = MultiFilter::select_channel(frames, 513, 5, 0);
        let out = shadow_filter(&sel, &stft, &scene).unwrap();
        for (a, b) in out.speech.iter().zip(&scene.speech[0]) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut silent = scene.clone();
        silent.music.iter_mut().flatten().for_each(|v| *v = 0.0);
        let out = shadow_filter(&filter, &stft, &silent).unwrap();
        assert!(out.music.iter().all(|v| *v == 0.0));
        silent.noise.pop();
        assert!(shadow_filter(&filter, &stft, &silent).is_err());
    }
}
