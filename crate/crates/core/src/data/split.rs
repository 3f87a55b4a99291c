//! Patient-level train/test splitting.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::SampleRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

/// Shuffles patients with `seed` and moves them, whole, into train until the
/// train share of images first reaches `train_fraction`. The last patient
/// always stays in test so neither side is empty.
///
/// Both sides keep the input's record order.
pub fn patient_level_split(records: &[SampleRecord], train_fraction: f64, seed: u64) -> Result<SplitResult> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let c = counts.entry(r.patient_id.as_str()).or_insert(0);
        if *c == 0 {
            patients.push(&r.patient_id);
        }
        *c += 1;
    }
    if patients.len() < 2 {
        return Err(Error::SplitImpossible(format!(
            "need at least 2 distinct patients, found {}",
            patients.len()
        )));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = train_fraction * records.len() as f64;
    let mut in_train: HashMap<&str, bool> = HashMap::new();
    let mut taken = 0usize;
    for (i, p) in patients.iter().enumerate() {
        let reached = taken as f64 >= target;
        let last = i + 1 == patients.len();
        let goes_train = !reached && !last;
        if goes_train {
            taken += counts[p];
        }
        in_train.insert(p, goes_train);
    }
    let (train, test): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| in_train[r.patient_id.as_str()]);
    Ok(SplitResult {
        train,
        test,
        split_seed: seed,
        train_fraction,
    })
}
