use serde::{Deserialize, Serialize};

/// One client's line in a round's log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub selected: bool,
    /// Fraction of the client's test set classified correctly.
    pub test_acc: f64,
    /// 1-based boundary used this round, if the client distilled.
    pub distill_layer: Option<usize>,
    /// Mean client-side distillation loss over the round's steps.
    pub loss_kl: Option<f64>,
    /// Mean client-side cross-entropy over the round's steps.
    pub loss_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub mean_loss_kl: Option<f64>,
    pub mean_loss_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl RoundRecord {
    /// Builds a record from per-client lines sorted by id; round means cover
    /// selected clients that reported a loss.
    pub fn from_clients(round: u32, mut clients: Vec<ClientRecord>) -> Self {
        clients.sort_by_key(|c| c.client_id);
        let selected = clients.iter().filter(|c| c.selected).map(|c| c.client_id).collect();
        let mean_loss_kl = mean_selected(&clients, |c| c.loss_kl);
        let mean_loss_ce = mean_selected(&clients, |c| c.loss_ce);
        Self { round, selected, clients, mean_loss_kl, mean_loss_ce, wall_clock_ms: None }
    }

    /// Mean test accuracy over all clients, in `[0, 1]`.
    pub fn mean_accuracy(&self) -> f64 {
        if self.clients.is_empty() {
            return 0.0;
        }
        self.clients.iter().map(|c| c.test_acc).sum::<f64>() / self.clients.len() as f64
    }
}

/// Mean of `field` over selected clients where it is present, in id order.
pub fn mean_selected(clients: &[ClientRecord], field: impl Fn(&ClientRecord) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = clients.iter().filter(|c| c.selected).filter_map(field).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
