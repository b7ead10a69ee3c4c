use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};
use crate::nn::Tensor;
use crate::rng::{stream, Stream};

/// Unit-variance Gaussian clusters whose centers sit `separation` apart.
///
/// With `classes <= dims` the centers are scaled basis vectors, so every pair
/// is exactly `separation` apart; otherwise random directions of the same
/// norm are used. Values are min-max scaled into `[0, 1]` and each sample is
/// laid out as a `(s, s, 1)` grid when `dims = s²`, else `(1, dims, 1)`.
/// Sample `i` belongs to class `i % classes`.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes == 0 || per_class == 0 || dims == 0 {
        return Err(DataError::Argument("classes, per_class and dims must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Argument(format!("separation must be non-negative, got {separation}")));
    }
    let mut rng = stream(seed, Stream::Synth, &[]);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dims {
                (0..dims).map(|d| if d == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let n = classes * per_class;
    let mut values = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &center in &centers[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.push(center + noise);
        }
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    let side = (dims as f64).sqrt().round() as usize;
    let shape = if side * side == dims { vec![n, side, side, 1] } else { vec![n, 1, dims, 1] };
    let inputs = Tensor::new(shape, values).map_err(|e| DataError::Argument(e.to_string()))?;
    Dataset::new(inputs, labels, classes)
}
