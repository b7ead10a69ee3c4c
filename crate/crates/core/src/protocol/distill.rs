//! Update steps for both distillation phases.
//!
//! Upload phase (server): the staged global model is trained on a client's
//! triplets. Its layers `2..=L` applied to `H1` form the student; its layers
//! `l+1..=L` applied to `Hl` form the teacher, held constant. Layer 1 of the
//! global model is never trained here.
//!
//! Download phase (client): the aggregated global model, frozen, acts as a
//! head on top of the client's own prefix `1..=l`; only the prefix receives
//! the distillation gradient. A cross-entropy step on the full local model
//! follows each distillation step.

use super::{KnowledgeTriplet, Optimizers, ProtocolError, Transfer};
use crate::data::Dataset;
use crate::nn::{
    adam_step, cross_entropy_grad, distill_kl_grad, forward_range, forward_suffix, mse_grad, tempered_softmax,
    AdamState, Gradients, KlOrder, ModelParams, ModelSpec, ParamRange, Tape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillSettings {
    pub tau: f64,
    pub ce_tau: f64,
    pub lr: f64,
    pub kl_order: KlOrder,
    pub transfer: Transfer,
}

/// Running means of the two loss terms over a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseLosses {
    kl_sum: f64,
    kl_steps: usize,
    ce_sum: f64,
    ce_steps: usize,
}

impl PhaseLosses {
    fn add_kl(&mut self, v: f64) {
        self.kl_sum += v;
        self.kl_steps += 1;
    }

    fn add_ce(&mut self, v: f64) {
        self.ce_sum += v;
        self.ce_steps += 1;
    }

    pub fn merge(&mut self, other: PhaseLosses) {
        self.kl_sum += other.kl_sum;
        self.kl_steps += other.kl_steps;
        self.ce_sum += other.ce_sum;
        self.ce_steps += other.ce_steps;
    }

    pub fn kl(&self) -> Option<f64> {
        (self.kl_steps > 0).then(|| self.kl_sum / self.kl_steps as f64)
    }

    pub fn ce(&self) -> Option<f64> {
        (self.ce_steps > 0).then(|| self.ce_sum / self.ce_steps as f64)
    }
}

/// The four soft-label tensors of one batch: `p` and `q` from the global
/// model before the upload phase, `v` and `t` from the aggregated model.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    pub p: Tensor,
    pub q: Tensor,
    pub v: Tensor,
    pub t: Tensor,
}

/// Download-phase targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerTargets {
    /// Soft labels of the full global path from `H1`.
    pub t: Tensor,
    /// Soft labels of the global head on `Hl`; diagnostic only.
    pub v: Tensor,
    /// Global layers `2..=l` applied to `H1`, for the feature-matching
    /// variant. `None` when `l = 1`.
    pub features: Option<Tensor>,
}

fn check_layer(spec: &ModelSpec, l: usize) -> Result<(), ProtocolError> {
    if l == 0 || l > spec.num_layers() {
        return Err(ProtocolError::Config(format!("boundary {l} outside 1..={}", spec.num_layers())));
    }
    Ok(())
}

/// `(p, q)`: the head's soft labels on `Hl` and the full path's on `H1`.
pub fn c2s_soft_labels(
    spec: &ModelSpec,
    global: &ModelParams,
    triplet: &KnowledgeTriplet,
    l: usize,
    tau: f64,
) -> Result<(Tensor, Tensor), ProtocolError> {
    check_layer(spec, l)?;
    let p = tempered_softmax(&forward_suffix(spec, global, &triplet.hl, l)?, tau)?;
    let q = tempered_softmax(&forward_range(spec, global, &triplet.h1, 1, spec.num_layers())?, tau)?;
    Ok((p, q))
}

/// Upload-phase distillation loss and its gradient with respect to global
/// layers `2..=L`. The teacher is computed first and never differentiated.
pub fn c2s_kl_loss_grad(
    spec: &ModelSpec,
    staged: &ModelParams,
    triplet: &KnowledgeTriplet,
    l: usize,
    tau: f64,
    order: KlOrder,
) -> Result<(f64, Gradients), ProtocolError> {
    check_layer(spec, l)?;
    let big_l = spec.num_layers();
    let teacher = tempered_softmax(&forward_suffix(spec, staged, &triplet.hl, l)?, tau)?;
    let mut tape = Tape::new();
    let logits = tape.forward(spec, staged, &triplet.h1, 1, big_l)?;
    let (loss, g) = distill_kl_grad(logits, &teacher, tau, order)?;
    let bw = tape.backward(spec, staged, &g, ParamRange::layers(2, big_l), false)?;
    Ok((loss, bw.grads))
}

/// One upload-phase distillation step. Returns the loss before the update,
/// or `None` when the feature-matching variant has nothing to train (`l = 1`).
pub fn c2s_kl_step(
    spec: &ModelSpec,
    staged: &mut ModelParams,
    triplet: &KnowledgeTriplet,
    l: usize,
    settings: &DistillSettings,
    opt: &mut AdamState,
) -> Result<Option<f64>, ProtocolError> {
    let (loss, grads) = match settings.transfer {
        Transfer::HeadModel => c2s_kl_loss_grad(spec, staged, triplet, l, settings.tau, settings.kl_order)?,
        Transfer::Mse => {
            check_layer(spec, l)?;
            if l == 1 {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let feat = tape.forward(spec, staged, &triplet.h1, 1, l)?;
            let (loss, g) = mse_grad(feat, &triplet.hl)?;
            (loss, tape.backward(spec, staged, &g, ParamRange::layers(2, l), false)?.grads)
        }
    };
    adam_step(staged, &grads, opt, settings.lr)?;
    Ok(Some(loss))
}

/// One upload-phase cross-entropy step on global layers `2..=L`.
pub fn c2s_ce_step(
    spec: &ModelSpec,
    staged: &mut ModelParams,
    triplet: &KnowledgeTriplet,
    settings: &DistillSettings,
    opt: &mut AdamState,
) -> Result<f64, ProtocolError> {
    let big_l = spec.num_layers();
    let mut tape = Tape::new();
    let logits = tape.forward(spec, staged, &triplet.h1, 1, big_l)?;
    let (loss, g) = cross_entropy_grad(logits, &triplet.labels, settings.ce_tau)?;
    let bw = tape.backward(spec, staged, &g, ParamRange::layers(2, big_l), false)?;
    adam_step(staged, &bw.grads, opt, settings.lr)?;
    Ok(loss)
}

/// One upload-phase epoch: a distillation step then a cross-entropy step per
/// triplet, in order.
pub fn c2s_distill(
    spec: &ModelSpec,
    staged: &mut ModelParams,
    triplets: &[KnowledgeTriplet],
    l: usize,
    settings: &DistillSettings,
    opt: &mut Optimizers,
) -> Result<PhaseLosses, ProtocolError> {
    let mut losses = PhaseLosses::default();
    for triplet in triplets {
        if let Some(kl) = c2s_kl_step(spec, staged, triplet, l, settings, opt.distill())? {
            losses.add_kl(kl);
        }
        losses.add_ce(c2s_ce_step(spec, staged, triplet, settings, &mut opt.main)?);
    }
    Ok(losses)
}

/// Download-phase targets computed with the aggregated global model.
pub fn s2c_targets(
    spec: &ModelSpec,
    global: &ModelParams,
    triplet: &KnowledgeTriplet,
    l: usize,
    tau: f64,
) -> Result<ServerTargets, ProtocolError> {
    check_layer(spec, l)?;
    let big_l = spec.num_layers();
    let t = tempered_softmax(&forward_range(spec, global, &triplet.h1, 1, big_l)?, tau)?;
    let v = tempered_softmax(&forward_suffix(spec, global, &triplet.hl, l)?, tau)?;
    let features = if l > 1 { Some(forward_range(spec, global, &triplet.h1, 1, l)?) } else { None };
    Ok(ServerTargets { t, v, features })
}

/// All four soft-label tensors for a batch.
pub fn soft_label_set(
    spec: &ModelSpec,
    global_before: &ModelParams,
    global_after: &ModelParams,
    triplet: &KnowledgeTriplet,
    l: usize,
    tau: f64,
) -> Result<SoftLabelSet, ProtocolError> {
    let (p, q) = c2s_soft_labels(spec, global_before, triplet, l, tau)?;
    let ServerTargets { t, v, .. } = s2c_targets(spec, global_after, triplet, l, tau)?;
    Ok(SoftLabelSet { p, q, v, t })
}

/// Download-phase distillation loss and its gradient with respect to local
/// layers `1..=l`, passing through the frozen global head.
#[allow(clippy::too_many_arguments)]
pub fn s2c_kl_loss_grad(
    spec: &ModelSpec,
    local: &ModelParams,
    global: &ModelParams,
    x: &Tensor,
    t: &Tensor,
    l: usize,
    tau: f64,
    order: KlOrder,
) -> Result<(f64, Gradients), ProtocolError> {
    check_layer(spec, l)?;
    let mut prefix = Tape::new();
    let h = prefix.forward(spec, local, x, 0, l)?.clone();
    let mut head = Tape::new();
    let logits = head.forward(spec, global, &h, l, spec.num_layers())?;
    let (loss, g) = distill_kl_grad(logits, t, tau, order)?;
    let dh = head.backward(spec, global, &g, ParamRange::none(), true)?.input_grad.expect("input gradient requested");
    let grads = prefix.backward(spec, local, &dh, ParamRange::layers(1, l), false)?.grads;
    Ok((loss, grads))
}

/// One download-phase epoch over the client's batches.
///
/// `batches[i]` must be the batch that produced `targets[i]`. The global
/// model is only read.
#[allow(clippy::too_many_arguments)]
pub fn s2c_distill(
    spec: &ModelSpec,
    local: &mut ModelParams,
    global: &ModelParams,
    data: &Dataset,
    batches: &[Vec<usize>],
    targets: &[ServerTargets],
    l: usize,
    settings: &DistillSettings,
    opt: &mut Optimizers,
) -> Result<PhaseLosses, ProtocolError> {
    if batches.len() != targets.len() {
        return Err(ProtocolError::Config(format!("{} batches but {} targets", batches.len(), targets.len())));
    }
    let mut losses = PhaseLosses::default();
    let mut tape = Tape::new();
    for (idx, target) in batches.iter().zip(targets) {
        let (x, y) = data.batch(idx);
        let kl = match settings.transfer {
            Transfer::HeadModel => {
                Some(s2c_kl_loss_grad(spec, local, global, &x, &target.t, l, settings.tau, settings.kl_order)?)
            }
            Transfer::Mse => match &target.features {
                Some(feat) => {
                    let h = tape.forward(spec, local, &x, 0, l)?;
                    let (loss, g) = mse_grad(h, feat)?;
                    Some((loss, tape.backward(spec, local, &g, ParamRange::layers(1, l), false)?.grads))
                }
                None => None,
            },
        };
        if let Some((loss, grads)) = kl {
            adam_step(local, &grads, opt.distill(), settings.lr)?;
            losses.add_kl(loss);
        }
        let logits = tape.forward(spec, local, &x, 0, spec.num_layers())?;
        let (loss, g) = cross_entropy_grad(logits, &y, settings.ce_tau)?;
        let bw = tape.backward(spec, local, &g, ParamRange::all(spec), false)?;
        adam_step(local, &bw.grads, &mut opt.main, settings.lr)?;
        losses.add_ce(loss);
    }
    Ok(losses)
}
