//! Reference protocols run under the same selection, batching and
//! evaluation as the distillation protocol: weight-averaging federated
//! learning, isolated local training, and two ablations of the distillation
//! protocol (a fixed boundary and feature matching without a head).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{ModelParams, ModelSpec};
use crate::protocol::{
    batch_seed, evaluate, run_round, select_clients, train_ce_epochs, BatchPhase, BoundaryRule, ClientRecord,
    ClientState, ProtocolConfig, ProtocolError, RoundRecord, ServerState, Transfer,
};

/// Protocol names accepted in run configurations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    #[default]
    Fedd2s,
    Fedd2sFixedLayer,
    Fedd2sMse,
    Fedavg,
    LocalOnly,
}

/// A protocol with its resolved parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolKind {
    Fedd2s,
    /// Distillation with a constant 1-based boundary.
    Fedd2sFixedLayer(usize),
    Fedd2sMse,
    Fedavg,
    LocalOnly,
}

/// Cross-entropy temperature used by the weight-sharing baselines.
const PLAIN_CE_TAU: f64 = 1.0;

/// One round of weight averaging: each selected client starts from the
/// global model and trains `epochs` passes of cross-entropy; the server
/// averages the results in id order and every client adopts the average.
pub fn fedavg_round(
    spec: &ModelSpec,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    cfg.validate()?;
    let selected = select_clients(clients, cfg.participation, cfg.seed, round)?;
    let global = &server.global;
    let trained: Vec<(usize, ModelParams, Option<f64>)> = clients
        .par_iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .map(|c| {
            let mut params = global.clone();
            let seed = batch_seed(cfg.seed, round, c.id, BatchPhase::Local);
            let loss = train_ce_epochs(
                spec,
                &mut params,
                &mut c.opt.main,
                &c.split.train,
                cfg.epochs,
                cfg.batch_size,
                cfg.lr,
                PLAIN_CE_TAU,
                seed,
            )
            .map_err(|e| wrap(e, round, c.id))?;
            Ok((c.id, params, loss))
        })
        .collect::<Result<_, ProtocolError>>()?;
    for (id, params, _) in &trained {
        server.staged.insert(*id, params.clone());
    }
    server.global = crate::protocol::aggregate_globals(&server.staged)?;
    server.staged.clear();
    server.round = round;
    for c in clients.iter_mut() {
        c.params = server.global.clone();
    }
    let losses: Vec<(usize, Option<f64>)> = trained.into_iter().map(|(id, _, l)| (id, l)).collect();
    evaluate_all(spec, clients, round, &losses)
}

/// One round of isolated training: every client trains `epochs` passes of
/// cross-entropy on its own data. Participation is ignored.
pub fn local_only_round(
    spec: &ModelSpec,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    cfg.validate()?;
    let losses: Vec<(usize, Option<f64>)> = clients
        .par_iter_mut()
        .map(|c| {
            c.participation += 1;
            let seed = batch_seed(cfg.seed, round, c.id, BatchPhase::Local);
            let loss = train_ce_epochs(
                spec,
                &mut c.params,
                &mut c.opt.main,
                &c.split.train,
                cfg.epochs,
                cfg.batch_size,
                cfg.lr,
                PLAIN_CE_TAU,
                seed,
            )
            .map_err(|e| wrap(e, round, c.id))?;
            Ok((c.id, loss))
        })
        .collect::<Result<_, ProtocolError>>()?;
    evaluate_all(spec, clients, round, &losses)
}

/// The distillation round with the boundary pinned to `layer`.
pub fn fixed_layer_round(
    spec: &ModelSpec,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    layer: usize,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    if layer == 0 || layer > spec.num_layers() || spec.is_flatten(layer) {
        return Err(ProtocolError::Config(format!("layer {layer} cannot be a distillation boundary")));
    }
    let cfg = ProtocolConfig { boundary: BoundaryRule::Fixed(layer), ..cfg.clone() };
    run_round(spec, server, clients, &cfg, round)
}

/// The distillation round with feature matching in place of the global head.
pub fn mse_round(
    spec: &ModelSpec,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    let cfg = ProtocolConfig { transfer: Transfer::Mse, ..cfg.clone() };
    run_round(spec, server, clients, &cfg, round)
}

/// Runs one round of `kind`.
pub fn protocol_round(
    kind: ProtocolKind,
    spec: &ModelSpec,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    match kind {
        ProtocolKind::Fedd2s => {
            let cfg = ProtocolConfig { boundary: BoundaryRule::Schedule, transfer: Transfer::HeadModel, ..cfg.clone() };
            run_round(spec, server, clients, &cfg, round)
        }
        ProtocolKind::Fedd2sFixedLayer(l) => {
            let cfg = ProtocolConfig { transfer: Transfer::HeadModel, ..cfg.clone() };
            fixed_layer_round(spec, server, clients, &cfg, l, round)
        }
        ProtocolKind::Fedd2sMse => {
            let cfg = ProtocolConfig { boundary: BoundaryRule::Schedule, ..cfg.clone() };
            mse_round(spec, server, clients, &cfg, round)
        }
        ProtocolKind::Fedavg => fedavg_round(spec, server, clients, cfg, round),
        ProtocolKind::LocalOnly => local_only_round(spec, clients, cfg, round),
    }
}

fn wrap(e: ProtocolError, round: u32, client: usize) -> ProtocolError {
    ProtocolError::Client { round, client, source: Box::new(e) }
}

fn evaluate_all(
    spec: &ModelSpec,
    clients: &[ClientState],
    round: u32,
    losses: &[(usize, Option<f64>)],
) -> Result<RoundRecord, ProtocolError> {
    let records = clients
        .par_iter()
        .map(|c| {
            let test_acc = evaluate(spec, &c.params, &c.split.test).map_err(|e| wrap(e, round, c.id))?;
            let trained = losses.iter().find(|(id, _)| *id == c.id);
            Ok(ClientRecord {
                client_id: c.id,
                selected: trained.is_some(),
                test_acc,
                distill_layer: None,
                loss_kl: None,
                loss_ce: trained.and_then(|(_, l)| *l),
            })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    Ok(RoundRecord::from_clients(round, records))
}
