use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TrainError;

/// Per-class split of item indices into `(train, test)`: each class sends
/// `round(n / 10)` items (at least one, at most `n - 1`) to the test side.
/// Both lists come back sorted.
pub fn stratified_split_indices(labels: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        let n = idx.len();
        if n < 2 {
            return Err(TrainError::ClassTooSmall { class, count: n });
        }
        idx.shuffle(&mut rng);
        let n_test = ((n as f64 / 10.0).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// 9:1 stratified split of `items` by `label`, deterministic in `seed`.
pub fn stratified_split<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let labels: Vec<usize> = items.iter().map(label).collect();
    let (tr, te) = stratified_split_indices(&labels, seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        te.into_iter().map(|i| items[i].clone()).collect(),
    ))
}
