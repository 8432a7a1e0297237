use alloc::vec::Vec;

use super::{ParamStore, Tape, Var};
use crate::{Error, Result, C64};

/// Compares tape gradients against central differences.
///
/// `build` records the scalar loss on a fresh tape. For every trainable
/// tensor the real and imaginary parts of each entry are perturbed by `±h`
/// and the cogradient `(dL/dRe + i dL/dIm)/2` is assembled from the two
/// difference quotients. Returns the largest per-tensor relative error
/// `max|g_tape - g_fd| / max(max|g_fd|, 1e-6 * G, 1e-12)` where `G` is the
/// largest difference-quotient magnitude over all tensors. The floor keeps
/// tensors with an identically zero gradient (a bias followed by batch
/// normalization) from turning rounding noise into a relative error of 1.
pub fn finite_diff_check<F>(params: &mut ParamStore, h: f64, mut build: F) -> Result<f64>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(alloc::format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let mut eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        let v = tape.value(loss)[0].re;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        Ok(v)
    };

    let ids: Vec<_> = params.trainable_ids().collect();
    let mut per_tensor = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let tape_grad: Vec<C64> = grads.get(id).map_or_else(|| alloc::vec![C64::new(0.0, 0.0); n], |g| g.to_vec());
        let mut max_diff: f64 = 0.0;
        let mut max_fd: f64 = 0.0;
        for j in 0..n {
            let orig = params.get(id).data()[j];
            let mut quotient = |delta: C64, params: &mut ParamStore| -> Result<f64> {
                params.get_mut(id).data_mut()[j] = orig + delta;
                let plus = eval(params)?;
                params.get_mut(id).data_mut()[j] = orig - delta;
                let minus = eval(params)?;
                params.get_mut(id).data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let d_re = quotient(C64::new(h, 0.0), params)?;
            let d_im = quotient(C64::new(0.0, h), params)?;
            let fd = C64::new(d_re, d_im) * 0.5;
            max_diff = max_diff.max((tape_grad[j] - fd).norm());
            max_fd = max_fd.max(fd.norm());
        }
        per_tensor.push((max_diff, max_fd));
    }
    let global = per_tensor.iter().fold(0.0f64, |m, (_, f)| m.max(*f));
    let floor = (1e-6 * global).max(1e-12);
    Ok(per_tensor.iter().fold(0.0f64, |w, (d, f)| w.max(d / f.max(floor))))
}
