//! Adam optimizer over [`ModelParams`].

use super::{Gradients, ModelParams, NnError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &ModelParams, config: AdamConfig) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, config }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Blocks absent from `grads` are left untouched, moments
/// included; the step counter advances by one regardless.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<(), NnError> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(NnError::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if grads.num_layers() != params.num_layers() || !state.m.same_layout(params) {
        return Err(NnError::Argument("optimizer state, gradients and parameters disagree in layout".into()));
    }
    for l in 1..=params.num_layers() {
        if let (Some(g), Some(p)) = (grads.block(l), params.block(l)) {
            if g.weight.shape() != p.weight.shape() || g.bias.shape() != p.bias.shape() {
                return Err(NnError::Argument(format!("gradient block {l} has the wrong shape")));
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for l in 1..=params.num_layers() {
        let Some(g) = grads.block(l) else { continue };
        let p = params.block_mut(l).expect("layout checked above");
        let m = state.m.block_mut(l).expect("layout checked above");
        let v = state.v.block_mut(l).expect("layout checked above");
        let parts = [
            (p.weight.data_mut(), m.weight.data_mut(), v.weight.data_mut(), g.weight.data()),
            (p.bias.data_mut(), m.bias.data_mut(), v.bias.data_mut(), g.bias.data()),
        ];
        for (pd, md, vd, gd) in parts {
            for (((pv, mv), vv), &gv) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(gd) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
