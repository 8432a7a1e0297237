//! Complex-valued layers recorded on a [`Tape`].
//!
//! Nonlinearities are "split": a real function applied to the real and
//! imaginary parts independently. The exception is [`bounded_mask`], which
//! acts on the polar form.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ctensor::{CTensor, ConvGeom, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::error::shape_err;
use crate::{Result, C64};

/// Default leaky ReLU slope.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Complex weights with `E|w|^2 = 1/fan_in` (each part `N(0, 1/(2 fan_in))`).
pub fn init_weights<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> CTensor {
    let n: usize = shape.iter().product();
    let std = (0.5 / fan_in.max(1) as f64).sqrt();
    let data = (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * std, im * std)
        })
        .collect();
    CTensor::new(shape, data).expect("shape product matches")
}

/// Fully connected layer `y = W x + b`, `W` of shape `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct CFc {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl CFc {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n_in: usize, n_out: usize) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), ParamKind::Trainable, init_weights(rng, vec![n_out, n_in], n_in))?;
        let bias = store.insert(format!("{name}.bias"), ParamKind::Trainable, CTensor::zeros(vec![n_out]))?;
        Ok(Self { weight, bias, n_in, n_out })
    }

    /// `x [B, in] -> [B, out]`
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, Some(b))
    }
}

/// 1-D complex convolution over `[B, in_ch, len]`.
#[derive(Debug, Clone, Copy)]
pub struct CConv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl CConv1d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, geom: ConvGeom) -> Result<Self> {
        let kernel = store.insert(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init_weights(rng, vec![geom.out_ch, geom.in_ch, geom.kernel], geom.in_ch * geom.kernel),
        )?;
        let bias = store.insert(format!("{name}.bias"), ParamKind::Trainable, CTensor::zeros(vec![geom.out_ch]))?;
        Ok(Self { kernel, bias, geom })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        tape.conv1d(x, k, Some(b), self.geom)
    }
}

/// 1-D complex transposed convolution; kernel `[in_ch, out_ch, K]`.
#[derive(Debug, Clone, Copy)]
pub struct CConvT1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl CConvT1d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, geom: ConvGeom) -> Result<Self> {
        let fan_in = (geom.in_ch * geom.kernel / geom.stride.max(1)).max(1);
        let kernel = store.insert(
            format!("{name}.weight"),
            ParamKind::Trainable,
            init_weights(rng, vec![geom.in_ch, geom.out_ch, geom.kernel], fan_in),
        )?;
        let bias = store.insert(format!("{name}.bias"), ParamKind::Trainable, CTensor::zeros(vec![geom.out_ch]))?;
        Ok(Self { kernel, bias, geom })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        tape.conv_transpose1d(x, k, Some(b), self.geom)
    }
}

/// Complex GRU with split gate nonlinearities.
///
/// Gates are stacked `[update; reset; candidate]` along the output axis:
///
/// ```text
/// z  = sig(Wz x + bz + Uz h + cz)
/// r  = sig(Wr x + br + Ur h + cr)
/// n  = tanh(Wn x + bn + r * (Un h + cn))
/// h' = (1 - z) * n + z * h
/// ```
///
/// where `sig`/`tanh` act on real and imaginary parts separately. The reset
/// gate uses the complex Hadamard product. The update gate interpolates the
/// real and imaginary parts separately, so each part of `h'` is a convex
/// combination and stays in the tanh range.
#[derive(Debug, Clone, Copy)]
pub struct CGru {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub n_in: usize,
    pub hidden: usize,
}

impl CGru {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n_in: usize, hidden: usize) -> Result<Self> {
        let w_input = store.insert(format!("{name}.w_input"), ParamKind::Trainable, init_weights(rng, vec![3 * hidden, n_in], n_in))?;
        let b_input = store.insert(format!("{name}.b_input"), ParamKind::Trainable, CTensor::zeros(vec![3 * hidden]))?;
        let w_hidden = store.insert(format!("{name}.w_hidden"), ParamKind::Trainable, init_weights(rng, vec![3 * hidden, hidden], hidden))?;
        let b_hidden = store.insert(format!("{name}.b_hidden"), ParamKind::Trainable, CTensor::zeros(vec![3 * hidden]))?;
        Ok(Self {
            w_input,
            b_input,
            w_hidden,
            b_hidden,
            n_in,
            hidden,
        })
    }

    /// Input projections `[B, in] -> [B, 3H]`; can be computed for a whole
    /// sequence at once since it does not depend on the hidden state.
    pub fn project_input(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w_input);
        let b = tape.param(self.b_input);
        tape.affine(x, w, Some(b))
    }

    /// One recurrence step from pre-projected input `gx [B, 3H]` and hidden
    /// state `h [B, H]`.
    pub fn step_projected(&self, tape: &mut Tape<'_>, gx: Var, h: Var) -> Result<Var> {
        let hsz = self.hidden;
        if tape.shape(h).iter().skip(1).product::<usize>() != hsz {
            return Err(shape_err("cgru hidden", hsz, tape.shape(h)));
        }
        let u = tape.param(self.w_hidden);
        let c = tape.param(self.b_hidden);
        let gh = tape.affine(h, u, Some(c))?;
        let gx_zr = tape.slice_cols(gx, 0, 2 * hsz)?;
        let gh_zr = tape.slice_cols(gh, 0, 2 * hsz)?;
        let zr_pre = tape.add(gx_zr, gh_zr)?;
        let zr = tape.split_sigmoid(zr_pre);
        let z = tape.slice_cols(zr, 0, hsz)?;
        let r = tape.slice_cols(zr, hsz, hsz)?;
        let gx_n = tape.slice_cols(gx, 2 * hsz, hsz)?;
        let gh_n = tape.slice_cols(gh, 2 * hsz, hsz)?;
        let gated = tape.mul(r, gh_n)?;
        let n_pre = tape.add(gx_n, gated)?;
        let n = tape.split_tanh(n_pre);
        let keep = tape.one_minus(z);
        let a = tape.split_mul(keep, n)?;
        let h2 = tape.reshape(h, tape.shape(a).to_vec())?;
        let b = tape.split_mul(z, h2)?;
        tape.add(a, b)
    }

    /// One step from raw input `x [B, in]`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let gx = self.project_input(tape, x)?;
        self.step_projected(tape, gx, h)
    }

    /// Runs the recurrence over `steps` consecutive row blocks of `x`, each
    /// of `rows_per_step` rows, starting from `h0 [rows_per_step, H]`.
    /// Returns the stacked hidden states `[steps * rows_per_step, H]` and
    /// the final state.
    pub fn sequence(&self, tape: &mut Tape<'_>, x: Var, rows_per_step: usize, h0: Var) -> Result<(Var, Var)> {
        let total = tape.shape(x)[0];
        if rows_per_step == 0 || total % rows_per_step != 0 {
            return Err(shape_err("cgru sequence", rows_per_step, total));
        }
        let gx_all = self.project_input(tape, x)?;
        let mut h = h0;
        let mut outs = Vec::with_capacity(total / rows_per_step);
        for t in 0..total / rows_per_step {
            let gx = tape.rows(gx_all, t * rows_per_step, rows_per_step)?;
            h = self.step_projected(tape, gx, h)?;
            outs.push(h);
        }
        let stacked = tape.stack_rows(&outs)?;
        Ok((stacked, h))
    }
}

/// Complex batch normalization with per-component statistics and a complex
/// affine `gamma * xhat + beta`.
#[derive(Debug, Clone, Copy)]
pub struct CBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl CBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        let gamma = store.insert(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            CTensor::new(vec![features], vec![C64::new(1.0, 0.0); features])?,
        )?;
        let beta = store.insert(format!("{name}.beta"), ParamKind::Trainable, CTensor::zeros(vec![features]))?;
        let running_mean = store.insert(format!("{name}.running_mean"), ParamKind::Buffer, CTensor::zeros(vec![features]))?;
        let running_var = store.insert(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            CTensor::new(vec![features], vec![C64::new(1.0, 1.0); features])?,
        )?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, training: bool) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batch_norm(x, g, b, self.running_mean, self.running_var, self.momentum, self.eps, training)
    }
}

/// Split leaky ReLU (`slope` applied to negative real and imaginary parts).
pub fn cleaky_relu(tape: &mut Tape<'_>, x: Var, slope: f64) -> Var {
    tape.leaky_relu(x, slope)
}

/// Bounded complex mask: `|M| = tanh(|O|)` with the phase of `O`.
pub fn bounded_mask(tape: &mut Tape<'_>, o: Var) -> Var {
    tape.bounded_mask(o)
}

/// Scalar form of [`bounded_mask`].
pub fn bounded_mask_value(o: C64) -> C64 {
    crate::ctensor::tape::bounded_mask_scalar(o)
}

/// Geometry helper for stride/kernel/padding convolutions.
pub fn conv_geom(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeom {
    ConvGeom {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        output_padding: 0,
    }
}
