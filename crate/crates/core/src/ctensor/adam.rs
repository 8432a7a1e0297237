use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::{Error, Result, C64};

/// Adam moments and hyper-parameters. Real and imaginary parts of every
/// parameter are treated as independent reals, so both moments are stored
/// as `re + i im` pairs and the second moment stays nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    /// Indexed by parameter position in the store; `None` until first use.
    pub first_moment: Vec<Option<Vec<C64>>>,
    pub second_moment: Vec<Option<Vec<C64>>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// One Adam update of every trainable parameter; gradients are cleared
/// afterwards. Fails without touching anything if a trainable parameter has
/// no gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for id in params.trainable_ids() {
        if params.get(id).grad().is_none() {
            return Err(Error::MissingGradient(params.entry(id).name.clone()));
        }
    }
    let n = params.len();
    state.first_moment.resize(n, None);
    state.second_moment.resize(n, None);
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let tensor = params.get_mut(id);
        let len = tensor.len();
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = state.first_moment[id.index()].get_or_insert_with(|| vec![C64::new(0.0, 0.0); len]);
        let v = state.second_moment[id.index()].get_or_insert_with(|| vec![C64::new(0.0, 0.0); len]);
        for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            m.re = b1 * m.re + (1.0 - b1) * g.re;
            m.im = b1 * m.im + (1.0 - b1) * g.im;
            v.re = b2 * v.re + (1.0 - b2) * g.re * g.re;
            v.im = b2 * v.im + (1.0 - b2) * g.im * g.im;
            w.re -= lr * (m.re / bc1) / ((v.re / bc2).sqrt() + eps);
            w.im -= lr * (m.im / bc1) / ((v.im / bc2).sqrt() + eps);
        }
        tensor.clear_grad();
    }
    Ok(())
}
