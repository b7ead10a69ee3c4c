use super::ProtocolError;
use crate::data::{batches, Dataset};
use crate::nn::{adam_step, cross_entropy_grad, forward, AdamState, ModelParams, ModelSpec, ParamRange, Tape};

const EVAL_CHUNK: usize = 512;

/// Runs `epochs` passes of cross-entropy training with Adam. Returns the mean
/// batch loss, or `None` when no step was taken.
#[allow(clippy::too_many_arguments)]
pub fn train_ce_epochs(
    spec: &ModelSpec,
    params: &mut ModelParams,
    opt: &mut AdamState,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    tau: f64,
    seed: u64,
) -> Result<Option<f64>, ProtocolError> {
    let mut tape = Tape::new();
    let (mut total, mut steps) = (0.0, 0usize);
    for epoch in 0..epochs {
        for idx in batches(data, batch_size, seed, epoch as u64)? {
            let (x, y) = data.batch(&idx);
            let logits = tape.forward(spec, params, &x, 0, spec.num_layers())?;
            let (loss, g) = cross_entropy_grad(logits, &y, tau)?;
            let bw = tape.backward(spec, params, &g, ParamRange::all(spec), false)?;
            adam_step(params, &bw.grads, opt, lr)?;
            total += loss;
            steps += 1;
        }
    }
    Ok((steps > 0).then(|| total / steps as f64))
}

/// Top-1 accuracy of `params` on `data`, in `[0, 1]`.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, data: &Dataset) -> Result<f64, ProtocolError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = forward(spec, params, &x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
