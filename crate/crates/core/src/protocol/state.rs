use std::collections::BTreeMap;

use crate::data::ClientSplit;
use crate::nn::{AdamState, ModelParams};

/// Everything a client keeps between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub params: ModelParams,
    pub split: ClientSplit,
    /// Number of rounds this client has been selected for (`Zⁿ`).
    pub participation: u32,
    pub opt: Optimizers,
}

impl ClientState {
    pub fn new(id: usize, params: ModelParams, split: ClientSplit, separate_distill_optimizer: bool) -> Self {
        let opt = Optimizers::new(&params, separate_distill_optimizer);
        Self { id, params, split, participation: 0, opt }
    }
}

/// Adam state for one model: a single state shared by every loss, or an
/// extra state reserved for distillation steps.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub main: AdamState,
    pub distill: Option<AdamState>,
}

impl Optimizers {
    pub fn new(params: &ModelParams, separate_distill: bool) -> Self {
        Self { main: AdamState::new(params), distill: separate_distill.then(|| AdamState::new(params)) }
    }

    /// State used by distillation steps.
    pub fn distill(&mut self) -> &mut AdamState {
        match &mut self.distill {
            Some(d) => d,
            None => &mut self.main,
        }
    }
}

/// Server-side models.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ModelParams,
    /// Per-client copies of the global model during the upload phase.
    pub staged: BTreeMap<usize, ModelParams>,
    pub round: u32,
}

impl ServerState {
    pub fn new(global: ModelParams) -> Self {
        Self { global, staged: BTreeMap::new(), round: 0 }
    }
}
