//! Two-phase federated distillation: client-to-server head training,
//! server aggregation, and server-to-client prefix distillation, with a
//! deep-to-shallow schedule for the distillation boundary.

mod distill;
mod knowledge;
mod local;
mod record;
mod round;
mod schedule;
mod state;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::{KlOrder, NnError};

pub use distill::{
    c2s_ce_step, c2s_distill, c2s_kl_loss_grad, c2s_kl_step, c2s_soft_labels, s2c_distill, s2c_kl_loss_grad,
    s2c_targets, soft_label_set, DistillSettings, PhaseLosses, ServerTargets, SoftLabelSet,
};
pub use knowledge::{decode_knowledge, encode_knowledge, extract_local_knowledge, KnowledgeTriplet, WireRecord};
pub use local::{evaluate, train_ce_epochs};
pub use record::{mean_selected, ClientRecord, RoundRecord};
pub use round::{aggregate_globals, batch_seed, run_round, select_clients, BatchPhase};
pub use schedule::{distillation_layer, preset_names, DropConfig, DropRate};
pub use state::{ClientState, Optimizers, ServerState};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("malformed knowledge record at byte {offset}: {msg}")]
    Wire { offset: usize, msg: String },
    #[error("no client models to aggregate")]
    EmptyAggregation,
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: u32,
        client: usize,
        #[source]
        source: Box<ProtocolError>,
    },
}

impl ProtocolError {
    fn at(self, round: u32, client: usize) -> Self {
        ProtocolError::Client { round, client, source: Box::new(self) }
    }
}

/// What is distilled across the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transfer {
    /// Soft labels produced by running the global head on intermediate
    /// features.
    HeadModel,
    /// Squared error between intermediate features, without a head.
    Mse,
}

/// How the boundary is chosen each participation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryRule {
    Schedule,
    Fixed(usize),
}

/// Hyperparameters of a distillation run.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub participation: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub kl_order: KlOrder,
    /// Divide logits by the temperature in the cross-entropy terms too.
    pub temper_ce: bool,
    /// Plain cross-entropy epochs each selected client runs before
    /// extracting knowledge.
    pub pre_local_epochs: usize,
    pub drop: DropConfig,
    pub boundary: BoundaryRule,
    pub transfer: Transfer,
    /// Give distillation steps their own Adam state instead of sharing the
    /// cross-entropy one.
    pub separate_distill_optimizer: bool,
    /// Serialize and parse every knowledge upload.
    pub wire_roundtrip: bool,
    pub seed: u64,
}

impl ProtocolConfig {
    /// Temperature used in cross-entropy terms.
    pub fn ce_tau(&self) -> f64 {
        if self.temper_ce {
            self.temperature
        } else {
            1.0
        }
    }

    /// Distillation epochs per round; each runs one distillation step and one
    /// cross-entropy step per batch, so the budget matches `epochs` passes.
    pub fn distill_epochs(&self) -> usize {
        self.epochs.div_ceil(2)
    }

    pub fn settings(&self) -> DistillSettings {
        DistillSettings {
            tau: self.temperature,
            ce_tau: self.ce_tau(),
            lr: self.lr,
            kl_order: self.kl_order,
            transfer: self.transfer,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(ProtocolError::Config(format!("participation must lie in (0, 1], got {}", self.participation)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ProtocolError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ProtocolError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ProtocolError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Boundary for a client on its `z`-th participation.
    pub fn layer_for(&self, z: u32) -> usize {
        match self.boundary {
            BoundaryRule::Schedule => distillation_layer(z, &self.drop),
            BoundaryRule::Fixed(l) => l,
        }
    }
}
