use std::time::Instant;

use super::{ExperimentError, MetricsLog, RunConfig};
use crate::baselines::protocol_round;
use crate::data::{dirichlet_partition, train_test_split, Dataset, TEST_FRACTION};
use crate::nn::{ModelParams, ModelSpec};
use crate::protocol::{evaluate, ClientRecord, ClientState, ProtocolError, RoundRecord, ServerState};
use crate::rng::{derive_seed, stream, Stream};

/// Model, server and clients ready for round 1.
#[derive(Clone, Debug)]
pub struct Federation {
    pub spec: ModelSpec,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    /// Evaluates every client without training.
    pub fn evaluate_all(&self, round: u32) -> Result<RoundRecord, ProtocolError> {
        let records = self
            .clients
            .iter()
            .map(|c| {
                Ok(ClientRecord {
                    client_id: c.id,
                    selected: false,
                    test_acc: evaluate(&self.spec, &c.params, &c.split.test)?,
                    distill_layer: None,
                    loss_kl: None,
                    loss_ce: None,
                })
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        Ok(RoundRecord::from_clients(round, records))
    }
}

/// Partitions `ds`, splits every client's share and gives the server and all
/// clients the same initial weights.
pub fn build_federation(cfg: &RunConfig, ds: &Dataset) -> Result<Federation, ExperimentError> {
    let spec = cfg.model_spec(ds)?;
    let plan = dirichlet_partition(ds, cfg.clients, cfg.alpha, cfg.seed)?;
    let init = ModelParams::init(&spec, &mut stream(cfg.seed, Stream::Init, &[]));
    let clients = plan
        .clients
        .iter()
        .enumerate()
        .map(|(id, idx)| {
            let share = ds.subset(idx);
            let split = train_test_split(&share, TEST_FRACTION, derive_seed(cfg.seed, &[id as u64]))?;
            Ok(ClientState::new(id, init.clone(), split, cfg.separate_distill_optimizer))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(Federation { spec, server: ServerState::new(init), clients })
}

/// Loads the configured dataset and runs the configured protocol.
pub fn run_training(cfg: &RunConfig) -> Result<MetricsLog, ExperimentError> {
    let ds = cfg.load_dataset()?;
    run_training_on(cfg, &ds)
}

/// Runs the configured protocol on an already loaded dataset.
pub fn run_training_on(cfg: &RunConfig, ds: &Dataset) -> Result<MetricsLog, ExperimentError> {
    let spec = cfg.model_spec(ds)?;
    let cfg = cfg.resolved(&spec)?;
    let mut fed = build_federation(&cfg, ds)?;
    let kind = cfg.protocol_kind(&spec)?;
    let pcfg = cfg.protocol_config(&spec)?;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize + 1);
    rounds.push(fed.evaluate_all(0)?);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let mut rec = protocol_round(kind, &fed.spec, &mut fed.server, &mut fed.clients, &pcfg, round)?;
        if cfg.record_wall_clock {
            rec.wall_clock_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        log::info!("round {round}: mean accuracy {:.4}", rec.mean_accuracy());
        rounds.push(rec);
    }
    Ok(MetricsLog { config: Some(cfg), rounds })
}
