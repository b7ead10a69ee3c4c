//! Per-client train/test splits and seeded mini-batch orders.

use rand::seq::SliceRandom;

use super::{DataError, Dataset};
use crate::rng::{stream, Stream};

pub const TEST_FRACTION: f64 = 0.2;

/// A client's local train and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Positions in the client dataset that went to `train`, ascending.
    pub train_indices: Vec<usize>,
    /// Positions in the client dataset that went to `test`, ascending.
    pub test_indices: Vec<usize>,
}

/// Holds out `⌊fraction · K⌋` samples (at least one) for testing.
///
/// Stratified by class when every present class has at least two samples,
/// otherwise a plain random draw.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<ClientSplit, DataError> {
    if ds.len() < 5 {
        return Err(DataError::Argument(format!("need at least 5 samples to split, got {}", ds.len())));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Argument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let k = ds.len();
    let n_test = ((k as f64 * test_fraction).floor() as usize).max(1);
    let mut rng = stream(seed, Stream::Split, &[]);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let stratify = by_class.iter().all(|c| c.is_empty() || c.len() >= 2);

    let mut test = Vec::with_capacity(n_test);
    if stratify {
        // Largest-remainder apportionment of n_test over classes, keeping at
        // least one training sample per class.
        let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * n_test as f64 / k as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..by_class.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let mut assigned: usize = quota.iter().sum();
        for &c in order.iter().cycle().take(order.len() * 4) {
            if assigned >= n_test {
                break;
            }
            if !by_class[c].is_empty() && quota[c] + 1 < by_class[c].len() {
                quota[c] += 1;
                assigned += 1;
            }
        }
        for (c, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng);
            let q = quota[c].min(members.len().saturating_sub(1));
            test.extend_from_slice(&members[..q]);
        }
        if test.len() < n_test {
            let mut rest: Vec<usize> = (0..k).filter(|i| !test.contains(i)).collect();
            rest.shuffle(&mut rng);
            let need = n_test - test.len();
            test.extend_from_slice(&rest[..need]);
        }
    } else {
        let mut all: Vec<usize> = (0..k).collect();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..n_test]);
    }
    test.sort_unstable();
    let mut is_test = vec![false; k];
    test.iter().for_each(|&i| is_test[i] = true);
    let train: Vec<usize> = (0..k).filter(|&i| !is_test[i]).collect();
    Ok(ClientSplit { train: ds.subset(&train), test: ds.subset(&test), train_indices: train, test_indices: test })
}

/// Seeded permutation of `0..len` for `(seed, epoch)`, chunked into batches;
/// the final partial batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Argument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, Stream::Batch, &[epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    batch_indices(ds.len(), batch_size, seed, epoch)
}
