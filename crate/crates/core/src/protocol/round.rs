use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    c2s_distill, decode_knowledge, encode_knowledge, evaluate, extract_local_knowledge, s2c_distill, s2c_targets,
    train_ce_epochs, ClientRecord, ClientState, KnowledgeTriplet, Optimizers, PhaseLosses, ProtocolConfig,
    ProtocolError, RoundRecord, ServerState, ServerTargets,
};
use crate::data::batches;
use crate::nn::{ModelParams, ModelSpec};
use crate::rng::{derive_seed, stream, Stream};

/// Which training pass a batch order belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum BatchPhase {
    Distill = 0,
    Local = 1,
    PreLocal = 2,
}

/// Seed for a client's batch orders in one round and phase; epochs are
/// passed separately to [`batches`].
pub fn batch_seed(seed: u64, round: u32, client: usize, phase: BatchPhase) -> u64 {
    derive_seed(seed, &[Stream::LocalTrain as u64, round as u64, client as u64, phase as u64])
}

/// Draws `max(1, round(rho · N))` distinct clients uniformly, returns their
/// ids ascending and increments their participation counters.
///
/// The draw depends only on `(seed, round, N, rho)`, so every protocol sees
/// the same participants.
pub fn select_clients(
    clients: &mut [ClientState],
    rho: f64,
    seed: u64,
    round: u32,
) -> Result<Vec<usize>, ProtocolError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(ProtocolError::Config(format!("participation must lie in (0, 1], got {rho}")));
    }
    let n = clients.len();
    if n == 0 {
        return Err(ProtocolError::Config("no clients".into()));
    }
    let count = ((rho * n as f64).round() as usize).clamp(1, n);
    let mut rng = stream(seed, Stream::Select, &[round as u64]);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        clients[i].participation += 1;
    }
    Ok(picked.iter().map(|&i| clients[i].id).collect())
}

/// Element-wise mean of the staged models, in client-id order.
pub fn aggregate_globals(staged: &BTreeMap<usize, ModelParams>) -> Result<ModelParams, ProtocolError> {
    if staged.is_empty() {
        return Err(ProtocolError::EmptyAggregation);
    }
    let models: Vec<&ModelParams> = staged.values().collect();
    Ok(ModelParams::mean(&models)?)
}

/// Batches and triplets for one distillation epoch.
struct EpochKnowledge {
    batches: Vec<Vec<usize>>,
    triplets: Vec<KnowledgeTriplet>,
}

struct Upload {
    layer: usize,
    epochs: Vec<EpochKnowledge>,
}

fn prepare_upload(
    spec: &ModelSpec,
    client: &mut ClientState,
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<Upload, ProtocolError> {
    let layer = cfg.layer_for(client.participation);
    if cfg.pre_local_epochs > 0 {
        let seed = batch_seed(cfg.seed, round, client.id, BatchPhase::PreLocal);
        train_ce_epochs(
            spec,
            &mut client.params,
            &mut client.opt.main,
            &client.split.train,
            cfg.pre_local_epochs,
            cfg.batch_size,
            cfg.lr,
            cfg.ce_tau(),
            seed,
        )?;
    }
    let seed = batch_seed(cfg.seed, round, client.id, BatchPhase::Distill);
    let mut epochs = Vec::with_capacity(cfg.distill_epochs());
    for e in 0..cfg.distill_epochs() {
        let order = batches(&client.split.train, cfg.batch_size, seed, e as u64)?;
        let mut triplets = order
            .iter()
            .map(|b| extract_local_knowledge(spec, &client.params, &client.split.train, b, layer))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.wire_roundtrip {
            let bytes = encode_knowledge(client.id, layer, &triplets)?;
            triplets = decode_knowledge(&bytes)?.into_iter().map(|r| r.triplet).collect();
        }
        epochs.push(EpochKnowledge { batches: order, triplets });
    }
    Ok(Upload { layer, epochs })
}

fn download(
    spec: &ModelSpec,
    global: &ModelParams,
    client: &mut ClientState,
    up: &Upload,
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<PhaseLosses, ProtocolError> {
    let settings = cfg.settings();
    let mut losses = PhaseLosses::default();
    for epoch in &up.epochs {
        let targets = epoch
            .triplets
            .iter()
            .map(|t| s2c_targets(spec, global, t, up.layer, settings.tau))
            .collect::<Result<Vec<ServerTargets>, _>>()?;
        if let Some(first) = targets.first() {
            log::debug!("round {round} client {}: head soft labels row 0 {:?}", client.id, first.v.row(0));
        }
        losses.merge(s2c_distill(
            spec,
            &mut client.params,
            global,
            &client.split.train,
            &epoch.batches,
            &targets,
            up.layer,
            &settings,
            &mut client.opt,
        )?);
    }
    Ok(losses)
}

/// Runs one communication round of the distillation protocol and evaluates
/// every client afterwards.
pub fn run_round(
    spec: &ModelSpec,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: u32,
) -> Result<RoundRecord, ProtocolError> {
    cfg.validate()?;
    let selected = select_clients(clients, cfg.participation, cfg.seed, round)?;
    let is_selected = |id: usize| selected.binary_search(&id).is_ok();
    let settings = cfg.settings();

    // Clients compute and upload their knowledge.
    let uploads: BTreeMap<usize, Upload> = clients
        .par_iter_mut()
        .filter(|c| is_selected(c.id))
        .map(|c| prepare_upload(spec, c, cfg, round).map(|u| (c.id, u)).map_err(|e| e.at(round, c.id)))
        .collect::<Result<_, _>>()?;

    // Server trains one staged copy of the global model per client.
    let global = &server.global;
    let staged: Vec<(usize, ModelParams, PhaseLosses)> = uploads
        .par_iter()
        .map(|(&id, up)| {
            let mut model = global.clone();
            let mut opt = Optimizers::new(&model, cfg.separate_distill_optimizer);
            let mut losses = PhaseLosses::default();
            for epoch in &up.epochs {
                let l = c2s_distill(spec, &mut model, &epoch.triplets, up.layer, &settings, &mut opt)
                    .map_err(|e| e.at(round, id))?;
                losses.merge(l);
            }
            Ok((id, model, losses))
        })
        .collect::<Result<_, ProtocolError>>()?;
    for (id, model, losses) in staged {
        log::debug!("round {round} client {id}: server kl {:?} ce {:?}", losses.kl(), losses.ce());
        server.staged.insert(id, model);
    }
    server.global = aggregate_globals(&server.staged)?;
    server.staged.clear();
    server.round = round;

    // Clients distill from the aggregated model.
    let global = &server.global;
    let client_losses: BTreeMap<usize, PhaseLosses> = clients
        .par_iter_mut()
        .filter(|c| is_selected(c.id))
        .map(|c| {
            let up = &uploads[&c.id];
            download(spec, global, c, up, cfg, round).map(|l| (c.id, l)).map_err(|e| e.at(round, c.id))
        })
        .collect::<Result<_, _>>()?;

    let records = clients
        .par_iter()
        .map(|c| {
            let acc = evaluate(spec, &c.params, &c.split.test).map_err(|e| e.at(round, c.id))?;
            let losses = client_losses.get(&c.id);
            Ok(ClientRecord {
                client_id: c.id,
                selected: losses.is_some(),
                test_acc: acc,
                distill_layer: uploads.get(&c.id).map(|u| u.layer),
                loss_kl: losses.and_then(PhaseLosses::kl),
                loss_ce: losses.and_then(PhaseLosses::ce),
            })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    Ok(RoundRecord::from_clients(round, records))
}
