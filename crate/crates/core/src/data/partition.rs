//! Dirichlet non-iid partitioning with equal per-client quotas.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::rng::{stream, Stream};

/// Per-client index lists into a parent dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
    /// Samples left over after every client received its quota.
    pub discarded: Vec<usize>,
}

impl PartitionPlan {
    /// Per-client class histograms.
    pub fn histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.num_classes()];
                for &i in idx {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }
}

/// Draws a point from the symmetric Dirichlet `Dir(alpha · 1_k)` via
/// normalized Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // Every Gamma draw underflowed (tiny alpha): the limit is a vertex.
        let hot = rng.random_range(0..k);
        draws.iter_mut().enumerate().for_each(|(j, d)| *d = if j == hot { 1.0 } else { 0.0 });
    }
    draws
}

/// Splits `ds` across `n_clients` with per-client class mixes drawn from
/// `Dir(alpha)`. Every client receives `⌊|ds| / n_clients⌋` samples.
///
/// Class targets are `round(d_j · quota)`, trimmed from the largest targets
/// if they overshoot the quota. Targets a depleted class pool cannot meet are
/// backfilled one sample at a time from whichever class pool is currently
/// largest.
pub fn dirichlet_partition(ds: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan, DataError> {
    if n_clients < 1 {
        return Err(DataError::Argument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::Argument(format!("alpha must be positive, got {alpha}")));
    }
    let quota = ds.len() / n_clients;
    if quota == 0 {
        return Err(DataError::Argument(format!("{} samples cannot be shared by {n_clients} clients", ds.len())));
    }
    let classes = ds.num_classes();
    let mut rng = stream(seed, Stream::Partition, &[]);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut clients = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mix = sample_dirichlet(&mut rng, alpha, classes);
        let mut targets: Vec<usize> = mix.iter().map(|d| (d * quota as f64).round() as usize).collect();
        let mut total: usize = targets.iter().sum();
        while total > quota {
            let j = argmax(&targets);
            targets[j] -= 1;
            total -= 1;
        }
        let mut taken = Vec::with_capacity(quota);
        for (j, &want) in targets.iter().enumerate() {
            let pool = &mut pools[j];
            let keep = pool.len() - want.min(pool.len());
            taken.extend(pool.drain(keep..));
        }
        while taken.len() < quota {
            let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
            let j = argmax(&sizes);
            match pools[j].pop() {
                Some(i) => taken.push(i),
                None => {
                    return Err(DataError::Partition(format!(
                        "class pools exhausted after {} of {quota} samples",
                        taken.len()
                    )))
                }
            }
        }
        taken.sort_unstable();
        clients.push(taken);
    }
    let mut discarded: Vec<usize> = pools.into_iter().flatten().collect();
    discarded.sort_unstable();
    Ok(PartitionPlan { alpha, seed, clients, discarded })
}

/// First index of the maximum.
fn argmax(v: &[usize]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}
