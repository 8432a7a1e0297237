use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_10;

use super::kernels::{self, ConvGeom};
use super::{CTensor, ParamId, ParamStore};
use crate::error::shape_err;
use crate::fft::Fft;
use crate::{Error, Result, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-feature statistics saved by a batch-norm node for its backward rule.
#[derive(Debug, Clone)]
struct BnCache {
    /// Normalized input, real and imaginary parts normalized separately.
    xhat: Vec<C64>,
    /// `1/sqrt(var + eps)` for the real (re) and imaginary (im) parts.
    inv_std: Vec<C64>,
    training: bool,
}

#[derive(Debug, Clone)]
struct IstftCache {
    frame_len: usize,
    hop: usize,
    offset: usize,
    n_out: usize,
    window: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SplitMul(Var, Var),
    ScaleShift { a: Var, scale: C64 },
    Conj(Var),
    Affine { x: Var, w: Var, b: Option<Var>, batch: usize, n_in: usize, n_out: usize },
    Conv1d { x: Var, k: Var, b: Option<Var>, batch: usize, len: usize, geom: ConvGeom },
    ConvT1d { x: Var, k: Var, b: Option<Var>, batch: usize, len: usize, geom: ConvGeom },
    LeakyRelu(Var, f64),
    SplitSigmoid(Var),
    SplitTanh(Var),
    BoundedMask(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, batch: usize, cache: BnCache },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    Slice { a: Var, start: usize, rows: usize, cols: usize },
    StackRows(Vec<Var>),
    Rows { a: Var, start: usize },
    Reshape(Var),
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    RepeatRows { a: Var, times: usize, cols: usize },
    SumRowGroups { a: Var, group: usize, cols: usize },
    SumAll(Var),
    SumAbsSq(Var),
    Abs(Var),
    Istft { frames: Var, cache: IstftCache },
    SnrLoss { est: Var, target: Vec<f64>, err_energy: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<C64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter. Each entry
/// is the conjugate cogradient `dL/dw*`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Vec<C64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[C64]> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[C64])> {
        self.entries.iter().map(|(i, g)| (*i, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Recording of one forward computation over a borrowed [`ParamStore`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; backward walks it once in reverse.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    buffer_updates: Vec<(ParamId, Vec<C64>)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&r, rest)) => (r, rest.iter().product()),
        None => (1, 1),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh(r)/r` and `g'(r)/r` for the bounded mask, with series near zero.
fn mask_gain(r: f64) -> (f64, f64) {
    if r < 1e-4 {
        let r2 = r * r;
        (1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0, -2.0 / 3.0 + 8.0 * r2 / 15.0)
    } else {
        let t = r.tanh();
        // keep |o * g| <= 1 after rounding once tanh saturates
        let g = t.min(1.0 - 4.0 * f64::EPSILON) / r;
        let dg = ((1.0 - t * t) * r - t) / (r * r);
        (g, dg / r)
    }
}

/// Magnitude below which the bounded mask outputs exactly zero.
pub(crate) const MASK_EPS: f64 = 1e-12;

/// `tanh(|o|) · o/|o|`, zero for `|o| < 1e-12`.
pub(crate) fn bounded_mask_scalar(o: C64) -> C64 {
    let r = o.norm();
    if r < MASK_EPS {
        ZERO
    } else {
        o * mask_gain(r).0
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[C64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> CTensor {
        CTensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    /// Buffer (running statistic) updates recorded by training-mode layers.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<C64>)> {
        core::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, data: Vec<C64>) {
        self.buffer_updates.push((id, data));
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<C64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    // ----- leaves ---------------------------------------------------------

    pub fn constant(&mut self, t: CTensor) -> Var {
        let CTensor { shape, data, .. } = t;
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<C64>) -> Result<Var> {
        Ok(self.constant(CTensor::new(shape, data)?))
    }

    /// References a stored parameter without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Vec::new(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::Mul(a, b), &[a, b]))
    }

    /// Componentwise product of real parts and of imaginary parts,
    /// `re(a) re(b) + i im(a) im(b)`.
    pub fn split_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("split_mul", a, b)?;
        let d = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| C64::new(x.re * y.re, x.im * y.im))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), d, Op::SplitMul(a, b), &[a, b]))
    }

    /// `scale * a + shift` elementwise.
    pub fn scale_shift(&mut self, a: Var, scale: C64, shift: C64) -> Var {
        let d = self.value(a).iter().map(|x| scale * x + shift).collect();
        self.push(self.shape(a).to_vec(), d, Op::ScaleShift { a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: C64) -> Var {
        self.scale_shift(a, scale, ZERO)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.scale_shift(a, C64::new(-1.0, 0.0), C64::new(1.0, 0.0))
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let d = self.value(a).iter().map(|x| x.conj()).collect();
        self.push(self.shape(a).to_vec(), d, Op::Conj(a), &[a])
    }

    /// Leaky ReLU on real and imaginary parts independently.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let f = |v: f64| if v > 0.0 { v } else { slope * v };
        let d = self.value(a).iter().map(|x| C64::new(f(x.re), f(x.im))).collect();
        self.push(self.shape(a).to_vec(), d, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn split_sigmoid(&mut self, a: Var) -> Var {
        let d = self.value(a).iter().map(|x| C64::new(sigmoid(x.re), sigmoid(x.im))).collect();
        self.push(self.shape(a).to_vec(), d, Op::SplitSigmoid(a), &[a])
    }

    pub fn split_tanh(&mut self, a: Var) -> Var {
        let d = self.value(a).iter().map(|x| C64::new(x.re.tanh(), x.im.tanh())).collect();
        self.push(self.shape(a).to_vec(), d, Op::SplitTanh(a), &[a])
    }

    /// `tanh(|o|) * o/|o|`, zero where `|o| < 1e-12`.
    pub fn bounded_mask(&mut self, a: Var) -> Var {
        let d = self
            .value(a)
            .iter()
            .map(|&o| bounded_mask_scalar(o))
            .collect();
        self.push(self.shape(a).to_vec(), d, Op::BoundedMask(a), &[a])
    }

    /// Magnitude, returned with zero imaginary part.
    pub fn abs(&mut self, a: Var) -> Var {
        let d = self.value(a).iter().map(|x| C64::new(x.norm(), 0.0)).collect();
        self.push(self.shape(a).to_vec(), d, Op::Abs(a), &[a])
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(ZERO, |acc, x| acc + x);
        self.push(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    /// `sum |a_i|^2`, a real scalar.
    pub fn sum_abs_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x.norm_sqr()).sum();
        self.push(vec![1], vec![C64::new(s, 0.0)], Op::SumAbsSq(a), &[a])
    }

    // ----- dense layers ---------------------------------------------------

    /// `x [B, in] -> [B, out]` with `w [out, in]` and optional `b [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, n_in) = self.rows_cols(x);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != n_in {
            return Err(shape_err("affine weight", [0, n_in], ws));
        }
        let n_out = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != n_out {
                return Err(shape_err("affine bias", n_out, self.value(b).len()));
            }
        }
        let y = kernels::affine_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), batch, n_in, n_out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![batch, n_out], y, Op::Affine { x, w, b, batch, n_in, n_out }, &inputs))
    }

    fn check_conv(&self, op: &'static str, x: Var, k: Var, b: Option<Var>, geom: &ConvGeom, transposed: bool) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[1] != geom.in_ch {
            return Err(shape_err(op, ("B", geom.in_ch, "len"), xs));
        }
        let kshape = if transposed {
            [geom.in_ch, geom.out_ch, geom.kernel]
        } else {
            [geom.out_ch, geom.in_ch, geom.kernel]
        };
        if self.shape(k) != kshape {
            return Err(shape_err(op, kshape, self.shape(k)));
        }
        if let Some(b) = b {
            if self.value(b).len() != geom.out_ch {
                return Err(shape_err(op, geom.out_ch, self.value(b).len()));
            }
        }
        if geom.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok((xs[0], xs[2]))
    }

    /// Cross-correlation over `x [B, in_ch, len]` with `k [out_ch, in_ch, K]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (batch, len) = self.check_conv("conv1d", x, k, b, &geom, false)?;
        if geom.conv_out_len(len).is_none() {
            return Err(shape_err("conv1d length", geom.kernel, len + 2 * geom.padding));
        }
        let (y, lout) = kernels::conv1d_forward(self.value(x), self.value(k), b.map(|b| self.value(b)), batch, len, &geom);
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(vec![batch, geom.out_ch, lout], y, Op::Conv1d { x, k, b, batch, len, geom }, &inputs))
    }

    /// Transposed convolution with `k [in_ch, out_ch, K]`.
    pub fn conv_transpose1d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (batch, len) = self.check_conv("conv_transpose1d", x, k, b, &geom, true)?;
        if geom.transposed_out_len(len).is_none() || geom.output_padding >= geom.stride {
            return Err(Error::InvalidArgument("invalid transposed convolution geometry".into()));
        }
        let (y, lout) = kernels::conv_t1d_forward(self.value(x), self.value(k), b.map(|b| self.value(b)), batch, len, &geom);
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(vec![batch, geom.out_ch, lout], y, Op::ConvT1d { x, k, b, batch, len, geom }, &inputs))
    }

    /// Per-feature batch normalization of `x [B, F]`; real and imaginary
    /// parts are normalized independently, then `gamma * xhat + beta`.
    ///
    /// `running_mean` packs the two means as `re + i im`; `running_var`
    /// packs the two variances the same way. In training mode the batch
    /// statistics are used and the exponential moving averages are recorded
    /// as buffer updates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Var> {
        let (batch, feat) = self.rows_cols(x);
        for v in [gamma, beta] {
            if self.value(v).len() != feat {
                return Err(shape_err("batch_norm affine", feat, self.value(v).len()));
            }
        }
        if batch == 0 {
            return Err(Error::Empty("batch_norm batch"));
        }
        let rm = self.params.get(running_mean).data();
        let rv = self.params.get(running_var).data();
        if rm.len() != feat || rv.len() != feat {
            return Err(shape_err("batch_norm running stats", feat, rm.len()));
        }
        let xv = self.value(x);
        let (mean, var) = if training {
            let mut mean = vec![ZERO; feat];
            for row in xv.chunks_exact(feat) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v;
                }
            }
            let inv_b = 1.0 / batch as f64;
            mean.iter_mut().for_each(|m| *m *= inv_b);
            let mut var = vec![ZERO; feat];
            for row in xv.chunks_exact(feat) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    s.re += d.re * d.re;
                    s.im += d.im * d.im;
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_b);
            (mean, var)
        } else {
            (rm.to_vec(), rv.to_vec())
        };
        let inv_std: Vec<C64> = var
            .iter()
            .map(|v| C64::new(1.0 / (v.re.max(0.0) + eps).sqrt(), 1.0 / (v.im.max(0.0) + eps).sqrt()))
            .collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(feat) {
            for ((v, m), s) in row.iter().zip(&mean).zip(&inv_std) {
                xhat.push(C64::new((v.re - m.re) * s.re, (v.im - m.im) * s.im));
            }
        }
        let g = self.value(gamma);
        let bta = self.value(beta);
        let y: Vec<C64> = xhat
            .chunks_exact(feat)
            .flat_map(|row| row.iter().zip(g).zip(bta).map(|((h, g), b)| g * h + b))
            .collect();
        if training {
            let unbiased = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
            let new_mean = rm.iter().zip(&mean).map(|(r, m)| r * (1.0 - momentum) + m * momentum).collect();
            let new_var = rv
                .iter()
                .zip(&var)
                .map(|(r, v)| r * (1.0 - momentum) + v * (momentum * unbiased))
                .collect();
            self.record_buffer_update(running_mean, new_mean);
            self.record_buffer_update(running_var, new_var);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch,
                cache: BnCache { xhat, inv_std, training },
            },
            &[x, gamma, beta],
        ))
    }

    // ----- structure ------------------------------------------------------

    /// Concatenates along the trailing axes; every part is viewed as
    /// `[rows, n_i]` with a common `rows`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat parts"));
        };
        let rows = self.rows_cols(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(shape_err("concat rows", rows, r));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                d.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], d, Op::Concat { parts: widths, rows }, parts))
    }

    /// Columns `[start, start + len)` of `a` viewed as `[rows, cols]`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > cols {
            return Err(shape_err("slice_cols", cols, start + len));
        }
        let v = self.value(a);
        let d = (0..rows).flat_map(|r| v[r * cols + start..r * cols + start + len].iter().copied()).collect();
        Ok(self.push(vec![rows, len], d, Op::Slice { a, start, rows, cols }, &[a]))
    }

    /// Rows `[start, start + count)` along the first axis.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + count > rows {
            return Err(shape_err("rows", rows, start + count));
        }
        let d = self.value(a)[start * cols..(start + count) * cols].to_vec();
        let mut shape = self.shape(a).to_vec();
        shape[0] = count;
        Ok(self.push(shape, d, Op::Rows { a, start }, &[a]))
    }

    /// Concatenates along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("stack_rows parts"));
        };
        let tail: Vec<usize> = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut d = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err("stack_rows", &tail, &self.shape(p)[1..]));
            }
            rows += self.shape(p)[0];
            d.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, d, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", n, self.value(a).len()));
        }
        let d = self.value(a).to_vec();
        Ok(self.push(shape, d, Op::Reshape(a), &[a]))
    }

    /// Swaps the last two axes of a 3-D tensor: `[B, R, C] -> [B, C, R]`.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 3 {
            return Err(shape_err("transpose_last", "3 axes", shape));
        }
        let (batch, rows, cols) = (shape[0], shape[1], shape[2]);
        let v = self.value(a);
        let mut d = vec![ZERO; v.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    d[base + c * rows + r] = v[base + r * cols + c];
                }
            }
        }
        Ok(self.push(vec![batch, cols, rows], d, Op::Transpose { a, batch, rows, cols }, &[a]))
    }

    /// Each row repeated `times` times consecutively: `[R, C] -> [R*times, C]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (rows, cols) = self.rows_cols(a);
        let v = self.value(a);
        let mut d = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                d.extend_from_slice(&v[r * cols..(r + 1) * cols]);
            }
        }
        self.push(vec![rows * times, cols], d, Op::RepeatRows { a, times, cols }, &[a])
    }

    /// Sums consecutive groups of `group` rows: `[R*group, C] -> [R, C]`.
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if group == 0 || rows % group != 0 {
            return Err(shape_err("sum_row_groups", group, rows));
        }
        let v = self.value(a);
        let out_rows = rows / group;
        let mut d = vec![ZERO; out_rows * cols];
        for r in 0..out_rows {
            let dst = &mut d[r * cols..(r + 1) * cols];
            for g in 0..group {
                let src = &v[(r * group + g) * cols..(r * group + g + 1) * cols];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += *y;
                }
            }
        }
        Ok(self.push(vec![out_rows, cols], d, Op::SumRowGroups { a, group, cols }, &[a]))
    }

    // ----- signal ops -----------------------------------------------------

    /// Overlap-add synthesis of half-spectrum frames `[T, L/2+1]` into a
    /// real signal of `n_out` samples (returned with zero imaginary part).
    /// Frame `t` starts at sample `t*hop - offset`.
    pub fn istft(&mut self, frames: Var, window: &[f64], hop: usize, offset: usize, n_out: usize) -> Result<Var> {
        let frame_len = window.len();
        let bins = frame_len / 2 + 1;
        let (t_frames, cols) = self.rows_cols(frames);
        if cols != bins {
            return Err(shape_err("istft bins", bins, cols));
        }
        let fft = Fft::new(frame_len)?;
        let mut y = vec![ZERO; n_out];
        let v = self.value(frames);
        for t in 0..t_frames {
            let seg = fft.inverse_real(&v[t * bins..(t + 1) * bins]);
            let start = (t * hop) as isize - offset as isize;
            for (k, s) in seg.iter().enumerate() {
                let n = start + k as isize;
                if n >= 0 && (n as usize) < n_out {
                    y[n as usize].re += s * window[k];
                }
            }
        }
        let cache = IstftCache {
            frame_len,
            hop,
            offset,
            n_out,
            window: window.to_vec(),
        };
        Ok(self.push(vec![n_out], y, Op::Istft { frames, cache }, &[frames]))
    }

    /// SNR loss in dB, `-10 log10(|t|^2 / (|t - est|^2 + 1e-10 |t|^2))`.
    pub fn snr_loss(&mut self, est: Var, target: &[f64]) -> Result<Var> {
        let e = self.value(est);
        if e.len() != target.len() {
            return Err(shape_err("snr_loss", target.len(), e.len()));
        }
        let t_energy: f64 = target.iter().map(|v| v * v).sum();
        if !(t_energy > 0.0) {
            return Err(Error::InvalidArgument("snr_loss: zero-energy target".into()));
        }
        let err: f64 = e.iter().zip(target).map(|(e, t)| (C64::new(*t, 0.0) - e).norm_sqr()).sum();
        let err_energy = err + 1e-10 * t_energy;
        let j = 10.0 * err_energy.log10() - 10.0 * t_energy.log10();
        Ok(self.push(
            vec![1],
            vec![C64::new(j, 0.0)],
            Op::SnrLoss {
                est,
                target: target.to_vec(),
                err_energy,
            },
            &[est],
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a real scalar `loss`. Returns `dL/dw*` for every
    /// trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(alloc::format!("loss must be a scalar, has {} entries", lv.len())));
        }
        let l = lv[0];
        if l.im.abs() > 1e-12 * l.re.abs().max(1.0) {
            return Err(Error::Contract(alloc::format!("loss must be real, imaginary part {:e}", l.im)));
        }
        // adj holds dL/dRe + i dL/dIm, i.e. twice the conjugate cogradient.
        let mut adj: Vec<Option<Vec<C64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![C64::new(1.0, 0.0)]);
        let mut param_grads: Vec<(ParamId, Vec<C64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match param_grads.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => param_grads.push((*id, g)),
                },
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, |d| add_into(d, &g));
                    self.acc(&mut adj, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, |d| add_into(d, &g));
                    self.acc(&mut adj, *b, |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(bv).for_each(|((x, gy), y)| *x += gy * y.conj())
                    });
                    self.acc(&mut adj, *b, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((x, gy), y)| *x += gy * y.conj())
                    });
                }
                Op::SplitMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(bv).for_each(|((x, gy), y)| *x += C64::new(gy.re * y.re, gy.im * y.im))
                    });
                    self.acc(&mut adj, *b, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((x, gy), y)| *x += C64::new(gy.re * y.re, gy.im * y.im))
                    });
                }
                Op::ScaleShift { a, scale } => {
                    let s = scale.conj();
                    self.acc(&mut adj, *a, |d| d.iter_mut().zip(&g).for_each(|(x, gy)| *x += gy * s));
                }
                Op::Conj(a) => {
                    self.acc(&mut adj, *a, |d| d.iter_mut().zip(&g).for_each(|(x, gy)| *x += gy.conj()));
                }
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a);
                    let f = |v: f64| if v > 0.0 { 1.0 } else { *slope };
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(av)
                            .for_each(|((x, gy), v)| *x += C64::new(gy.re * f(v.re), gy.im * f(v.im)))
                    });
                }
                Op::SplitSigmoid(a) => {
                    let yv = &node.data;
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(yv).for_each(|((x, gy), y)| {
                            *x += C64::new(gy.re * y.re * (1.0 - y.re), gy.im * y.im * (1.0 - y.im))
                        })
                    });
                }
                Op::SplitTanh(a) => {
                    let yv = &node.data;
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(yv).for_each(|((x, gy), y)| {
                            *x += C64::new(gy.re * (1.0 - y.re * y.re), gy.im * (1.0 - y.im * y.im))
                        })
                    });
                }
                Op::BoundedMask(a) => {
                    let av = self.value(*a);
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((x, gy), o)| {
                            let r = o.norm();
                            if r < MASK_EPS {
                                // limit of tanh(r)/r at the origin
                                *x += gy;
                            } else {
                                let (gain, dg_over_r) = mask_gain(r);
                                let proj = (gy.conj() * o).re;
                                *x += gy * gain + o * (dg_over_r * proj);
                            }
                        })
                    });
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    self.acc(&mut adj, *a, |d| {
                        d.iter_mut().zip(&g).zip(av).for_each(|((x, gy), v)| {
                            let r = v.norm();
                            if r > 0.0 {
                                *x += v * (gy.re / r);
                            }
                        })
                    });
                }
                Op::SumAll(a) => {
                    let s = g[0];
                    self.acc(&mut adj, *a, |d| d.iter_mut().for_each(|x| *x += s));
                }
                Op::SumAbsSq(a) => {
                    let s = 2.0 * g[0].re;
                    let av = self.value(*a);
                    self.acc(&mut adj, *a, |d| d.iter_mut().zip(av).for_each(|(x, v)| *x += v * s));
                }
                Op::Affine { x, w, b, batch, n_in, n_out } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut gx = self.need(*x).then(|| vec![ZERO; xv.len()]);
                    let mut gw = self.need(*w).then(|| vec![ZERO; wv.len()]);
                    let mut gb = b.filter(|b| self.need(*b)).map(|_| vec![ZERO; *n_out]);
                    kernels::affine_backward(&g, xv, wv, *batch, *n_in, *n_out, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                    self.merge(&mut adj, *x, gx);
                    self.merge(&mut adj, *w, gw);
                    if let Some(b) = b {
                        self.merge(&mut adj, *b, gb);
                    }
                }
                Op::Conv1d { x, k, b, batch, len, geom } | Op::ConvT1d { x, k, b, batch, len, geom } => {
                    let (xv, kv) = (self.value(*x), self.value(*k));
                    let mut gx = self.need(*x).then(|| vec![ZERO; xv.len()]);
                    let mut gk = self.need(*k).then(|| vec![ZERO; kv.len()]);
                    let mut gb = b.filter(|b| self.need(*b)).map(|_| vec![ZERO; geom.out_ch]);
                    if matches!(node.op, Op::Conv1d { .. }) {
                        kernels::conv1d_backward(&g, xv, kv, *batch, *len, geom, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                    } else {
                        kernels::conv_t1d_backward(&g, xv, kv, *batch, *len, geom, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                    }
                    self.merge(&mut adj, *x, gx);
                    self.merge(&mut adj, *k, gk);
                    if let Some(b) = b {
                        self.merge(&mut adj, *b, gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, batch, cache } => {
                    let feat = cache.inv_std.len();
                    let gam = self.value(*gamma);
                    if self.need(*beta) {
                        let mut gb = vec![ZERO; feat];
                        for row in g.chunks_exact(feat) {
                            add_into(&mut gb, row);
                        }
                        self.merge(&mut adj, *beta, Some(gb));
                    }
                    if self.need(*gamma) {
                        let mut gg = vec![ZERO; feat];
                        for (row, xh) in g.chunks_exact(feat).zip(cache.xhat.chunks_exact(feat)) {
                            for ((a, gy), h) in gg.iter_mut().zip(row).zip(xh) {
                                *a += gy * h.conj();
                            }
                        }
                        self.merge(&mut adj, *gamma, Some(gg));
                    }
                    if self.need(*x) {
                        // adjoint of xhat, then the per-component normalization
                        let gxh: Vec<C64> = g
                            .chunks_exact(feat)
                            .flat_map(|row| row.iter().zip(gam).map(|(gy, ga)| gy * ga.conj()))
                            .collect();
                        let mut gx = vec![ZERO; gxh.len()];
                        if cache.training {
                            let inv_b = 1.0 / *batch as f64;
                            let mut mean_g = vec![ZERO; feat];
                            let mut mean_gx = vec![ZERO; feat];
                            for (row, xh) in gxh.chunks_exact(feat).zip(cache.xhat.chunks_exact(feat)) {
                                for f in 0..feat {
                                    mean_g[f] += row[f];
                                    mean_gx[f].re += row[f].re * xh[f].re;
                                    mean_gx[f].im += row[f].im * xh[f].im;
                                }
                            }
                            mean_g.iter_mut().chain(mean_gx.iter_mut()).for_each(|v| *v *= inv_b);
                            for ((out, row), xh) in gx.chunks_exact_mut(feat).zip(gxh.chunks_exact(feat)).zip(cache.xhat.chunks_exact(feat)) {
                                for f in 0..feat {
                                    let s = cache.inv_std[f];
                                    out[f] = C64::new(
                                        s.re * (row[f].re - mean_g[f].re - xh[f].re * mean_gx[f].re),
                                        s.im * (row[f].im - mean_g[f].im - xh[f].im * mean_gx[f].im),
                                    );
                                }
                            }
                        } else {
                            for (out, row) in gx.chunks_exact_mut(feat).zip(gxh.chunks_exact(feat)) {
                                for f in 0..feat {
                                    let s = cache.inv_std[f];
                                    out[f] = C64::new(s.re * row[f].re, s.im * row[f].im);
                                }
                            }
                        }
                        self.merge(&mut adj, *x, Some(gx));
                    }
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|(_, c)| c).sum();
                    let mut off = 0;
                    for &(p, c) in parts {
                        if self.need(p) {
                            self.acc(&mut adj, p, |d| {
                                for r in 0..*rows {
                                    add_into(&mut d[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                                }
                            });
                        }
                        off += c;
                    }
                }
                Op::Slice { a, start, rows, cols } => {
                    let len = g.len() / rows.max(&1);
                    self.acc(&mut adj, *a, |d| {
                        for r in 0..*rows {
                            add_into(&mut d[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                        }
                    });
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.need(p) {
                            self.acc(&mut adj, p, |d| add_into(d, &g[off..off + n]));
                        }
                        off += n;
                    }
                }
                Op::Rows { a, start } => {
                    let cols = rows_cols(&node.shape).1;
                    self.acc(&mut adj, *a, |d| add_into(&mut d[start * cols..start * cols + g.len()], &g));
                }
                Op::Reshape(a) => self.acc(&mut adj, *a, |d| add_into(d, &g)),
                Op::Transpose { a, batch, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    self.acc(&mut adj, *a, |d| {
                        for b in 0..*batch {
                            let base = b * rows * cols;
                            for r in 0..rows {
                                for c in 0..cols {
                                    d[base + r * cols + c] += g[base + c * rows + r];
                                }
                            }
                        }
                    });
                }
                Op::RepeatRows { a, times, cols } => {
                    self.acc(&mut adj, *a, |d| {
                        for (r, dst) in d.chunks_exact_mut(*cols).enumerate() {
                            for k in 0..*times {
                                let src = (r * times + k) * cols;
                                add_into(dst, &g[src..src + cols]);
                            }
                        }
                    });
                }
                Op::SumRowGroups { a, group, cols } => {
                    self.acc(&mut adj, *a, |d| {
                        for (r, dst) in d.chunks_exact_mut(*cols).enumerate() {
                            let src = (r / group) * cols;
                            add_into(dst, &g[src..src + cols]);
                        }
                    });
                }
                Op::Istft { frames, cache } => {
                    let l = cache.frame_len;
                    let bins = l / 2 + 1;
                    let fft = Fft::new(l)?;
                    let t_frames = self.value(*frames).len() / bins;
                    self.acc(&mut adj, *frames, |d| {
                        let mut seg = vec![0.0; l];
                        for t in 0..t_frames {
                            let start = (t * cache.hop) as isize - cache.offset as isize;
                            for (k, s) in seg.iter_mut().enumerate() {
                                let n = start + k as isize;
                                *s = if n >= 0 && (n as usize) < cache.n_out {
                                    g[n as usize].re * cache.window[k]
                                } else {
                                    0.0
                                };
                            }
                            let spec = fft.forward_real(&seg);
                            let dst = &mut d[t * bins..(t + 1) * bins];
                            let (edge, inner) = (1.0 / l as f64, 2.0 / l as f64);
                            dst[0].re += spec[0].re * edge;
                            dst[bins - 1].re += spec[bins - 1].re * edge;
                            for f in 1..bins - 1 {
                                dst[f] += spec[f] * inner;
                            }
                        }
                    });
                }
                Op::SnrLoss { est, target, err_energy } => {
                    let coef = g[0].re * 10.0 / (LN_10 * err_energy) * 2.0;
                    let ev = self.value(*est);
                    self.acc(&mut adj, *est, |d| {
                        d.iter_mut()
                            .zip(ev)
                            .zip(target)
                            .for_each(|((x, e), t)| *x += (e - C64::new(*t, 0.0)) * coef)
                    });
                }
            }
        }

        let mut entries: Vec<(ParamId, Vec<C64>)> = param_grads
            .into_iter()
            .map(|(id, mut g)| {
                g.iter_mut().for_each(|v| *v *= 0.5);
                (id, g)
            })
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries })
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, adj: &mut [Option<Vec<C64>>], v: Var, f: impl FnOnce(&mut [C64])) {
        if !self.need(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = adj[v.0].get_or_insert_with(|| vec![ZERO; n]);
        f(slot);
    }

    fn merge(&self, adj: &mut [Option<Vec<C64>>], v: Var, g: Option<Vec<C64>>) {
        let Some(g) = g else { return };
        if !self.need(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(d) => add_into(d, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn add_into(dst: &mut [C64], src: &[C64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::{ParamKind, ParamStore};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn one_param(v: C64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", ParamKind::Trainable, CTensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn abs_sq_gradient_is_w() {
        let (s, id) = one_param(c(1.0, 2.0));
        let mut t = Tape::new(&s);
        let w = t.param(id);
        let l = t.sum_abs_sq(w);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap()[0], c(1.0, 2.0));
    }

    #[test]
    fn real_part_of_product_gives_half_conjugate() {
        // L = Re(a w) with a = 2: dL/dw* = a*/2 = 1
        let (s, id) = one_param(c(0.3, -0.7));
        let mut t = Tape::new(&s);
        let w = t.param(id);
        let a = t.constant(CTensor::scalar(c(2.0, 0.0)));
        let p = t.mul(a, w).unwrap();
        // Re(z) = (z + z*)/2
        let pc = t.conj(p);
        let sum = t.add(p, pc).unwrap();
        let l = t.scale(sum, c(0.5, 0.0));
        let g = t.backward(l).unwrap();
        let gw = g.get(id).unwrap()[0];
        assert!((gw - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let (s, id) = one_param(c(1.0, 1.0));
        let mut t = Tape::new(&s);
        let _w = t.param(id);
        let k = t.constant(CTensor::scalar(c(3.0, 0.0)));
        let l = t.sum_abs_sq(k);
        let g = t.backward(l).unwrap();
        assert!(g.get(id).is_none());
    }

    #[test]
    fn non_scalar_or_complex_loss_rejected() {
        let (s, id) = one_param(c(1.0, 1.0));
        let mut t = Tape::new(&s);
        let w = t.param(id);
        let two = t.concat(&[w, w]).unwrap();
        assert!(matches!(t.backward(two), Err(Error::Contract(_))));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn bounded_mask_forward_cases() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant_from(vec![3], vec![c(0.0, 0.0), c(1000.0, 0.0), c(-3.0, 4.0)]).unwrap();
        let m = t.bounded_mask(x);
        let v = t.value(m);
        assert_eq!(v[0], c(0.0, 0.0));
        assert!((v[1] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((v[2].norm() - 5.0f64.tanh()).abs() < 1e-12);
        assert!((v[2].arg() - c(-3.0, 4.0).arg()).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_cases() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant_from(vec![3], vec![c(-1.0, 2.0), c(0.5, 0.25), c(-3.0, -4.0)]).unwrap();
        let y = t.leaky_relu(x, 0.2);
        let v = t.value(y).to_vec();
        assert!((v[0] - c(-0.2, 2.0)).norm() < 1e-15);
        assert_eq!(v[1], c(0.5, 0.25));
        let y = t.leaky_relu(x, 0.1);
        assert!((t.value(y)[2] - c(-0.3, -0.4)).norm() < 1e-15);
    }
}
