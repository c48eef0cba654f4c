//! Class balancing with source-stratified sampling, and per-class train/test
//! splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::record::{ClipRecord, Label, SourceDataset};
use crate::error::{ensure, Result};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

/// Splits `total` seats proportionally to `weights` using largest-remainder
/// rounding; ties go to the earlier key.
pub fn largest_remainder<K: Ord + Clone>(weights: &BTreeMap<K, usize>, total: usize) -> BTreeMap<K, usize> {
    let sum: usize = weights.values().sum();
    if sum == 0 {
        return weights.keys().map(|k| (k.clone(), 0)).collect();
    }
    let mut quotas: BTreeMap<K, usize> = BTreeMap::new();
    let mut remainders = Vec::with_capacity(weights.len());
    for (i, (k, &w)) in weights.iter().enumerate() {
        let exact = total as u128 * w as u128;
        quotas.insert(k.clone(), (exact / sum as u128) as usize);
        remainders.push((exact % sum as u128, i, k.clone()));
    }
    let assigned: usize = quotas.values().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, _, k) in remainders.into_iter().take(total - assigned) {
        *quotas.get_mut(&k).expect("known key") += 1;
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Split {
    pub train: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
    /// Attentive clips drawn from each source.
    pub attentive_quotas: BTreeMap<SourceDataset, usize>,
}

/// Keeps every distracted clip, samples as many attentive clips stratified by
/// source, then splits each class `floor(fraction * D)` / remainder.
/// Erroneous and unlabeled clips are excluded.
pub fn balance_and_split(clips: &[ClipRecord], seed: u64, train_fraction: f64) -> Result<Split> {
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train fraction must be in (0, 1)"
    );
    let mut sorted: Vec<&ClipRecord> = clips.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let distracted: Vec<&ClipRecord> = sorted
        .iter()
        .copied()
        .filter(|c| c.label == Label::Distracted)
        .collect();
    let mut attentive: BTreeMap<SourceDataset, Vec<&ClipRecord>> = BTreeMap::new();
    for clip in sorted.iter().filter(|c| c.label == Label::Attentive) {
        attentive.entry(clip.source_dataset).or_default().push(clip);
    }
    let d = distracted.len();
    let a: usize = attentive.values().map(Vec::len).sum();
    ensure!(d > 0, "no distracted clips to balance against");
    ensure!(d <= a, "{d} distracted clips but only {a} attentive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = attentive.iter().map(|(k, v)| (*k, v.len())).collect();
    let quotas = largest_remainder(&sizes, d);
    let mut chosen = Vec::with_capacity(d);
    for (source, pool) in &mut attentive {
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..quotas[source]]);
    }

    let train_per_class = (train_fraction * d as f64).floor() as usize;
    let mut split = Split {
        train: Vec::with_capacity(2 * train_per_class),
        test: Vec::with_capacity(2 * (d - train_per_class)),
        attentive_quotas: quotas,
    };
    for mut class in [distracted, chosen] {
        class.shuffle(&mut rng);
        split.train.extend(class[..train_per_class].iter().map(|&c| c.clone()));
        split.test.extend(class[train_per_class..].iter().map(|&c| c.clone()));
    }
    Ok(split)
}
