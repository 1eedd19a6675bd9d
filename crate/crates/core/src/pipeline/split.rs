use rand::seq::SliceRandom;
use thiserror::Error;

use super::config::SplitPart;
use crate::rng::{keyed, Stream};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot split an empty dataset")]
pub struct EmptyDataset;

/// Seeded shuffle, then the first `round(train_frac * n)` items train and the
/// rest test. Both halves keep the shuffled order.
pub fn split_dataset<T>(items: Vec<T>, train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), EmptyDataset> {
    if items.is_empty() {
        return Err(EmptyDataset);
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(seed, Stream::Split, &[]));
    let n_train = ((train_frac * n as f64).round() as usize).min(n);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index drawn once");
    let train: Vec<T> = order[..n_train].iter().map(&mut take).collect();
    let test: Vec<T> = order[n_train..].iter().map(&mut take).collect();
    Ok((train, test))
}

/// The requested part of the seeded split.
pub fn select_part<T>(items: Vec<T>, part: SplitPart, train_frac: f64, seed: u64) -> Result<Vec<T>, EmptyDataset> {
    let (train, test) = split_dataset(items, train_frac, seed)?;
    Ok(match part {
        SplitPart::Train => train,
        SplitPart::Test => test,
        SplitPart::All => train.into_iter().chain(test).collect(),
    })
}
