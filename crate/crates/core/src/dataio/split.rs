//! Train/validation/test partitions and class weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const MIN_SPLIT_EPOCHS: usize = 10;

/// One epoch of one recording in a recording list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpochRef {
    pub recording: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSplit {
    pub train: Vec<EpochRef>,
    pub val: Vec<EpochRef>,
    pub test: Vec<EpochRef>,
}

/// Whether [`make_split`] shuffles individual epochs or whole subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Epoch,
    Subject,
}

fn all_refs(recordings: &[Recording]) -> Vec<EpochRef> {
    recordings
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| (0..rec.n_epochs()).map(move |epoch| EpochRef { recording: r, epoch }))
        .collect()
}

fn cut_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    Ok((n_train, n_val))
}

/// Shuffled three-way partition of every epoch in `recordings`.
pub fn make_split(
    recordings: &[Recording],
    fractions: (f64, f64, f64),
    seed: u64,
    unit: SplitUnit,
) -> Result<EpochSplit> {
    let refs = all_refs(recordings);
    if refs.len() < MIN_SPLIT_EPOCHS {
        return Err(Error::TooFewEpochs { needed: MIN_SPLIT_EPOCHS, got: refs.len() });
    }
    let mut rng = rng_for(seed, "split");
    match unit {
        SplitUnit::Epoch => {
            let mut refs = refs;
            refs.shuffle(&mut rng);
            let (n_train, n_val) = cut_sizes(refs.len(), fractions)?;
            let test = refs.split_off(n_train + n_val);
            let val = refs.split_off(n_train);
            Ok(EpochSplit { train: refs, val, test })
        }
        SplitUnit::Subject => {
            let mut subjects = subject_groups(recordings).into_values().collect::<Vec<_>>();
            if subjects.len() < 3 {
                return Err(Error::TooFewSubjects { needed: 3, got: subjects.len() });
            }
            subjects.shuffle(&mut rng);
            let (n_train, n_val) = cut_sizes(subjects.len(), fractions)?;
            let gather = |group: &[Vec<usize>]| -> Vec<EpochRef> {
                let wanted: Vec<usize> = group.iter().flatten().copied().collect();
                refs.iter().filter(|r| wanted.contains(&r.recording)).copied().collect()
            };
            Ok(EpochSplit {
                train: gather(&subjects[..n_train]),
                val: gather(&subjects[n_train..n_train + n_val]),
                test: gather(&subjects[n_train + n_val..]),
            })
        }
    }
}

/// Recording indices grouped by subject id; a subject may own several nights.
fn subject_groups(recordings: &[Recording]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in recordings.iter().enumerate() {
        out.entry(r.subject_id.clone()).or_default().push(i);
    }
    out
}

/// Subject-level cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
    /// Share of non-test epochs used for training; the rest validate.
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn fold_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..self.fold_count).map(|k| self.fold_subjects(k).len()).collect()
    }

    /// Test = subjects of `fold`; the remaining epochs are shuffled and cut
    /// into train/val at `train_fraction`.
    pub fn fold_split(&self, recordings: &[Recording], fold: usize) -> Result<EpochSplit> {
        if fold >= self.fold_count {
            return Err(Error::InvalidConfig(format!("fold {fold} of {}", self.fold_count)));
        }
        let mut rest = Vec::new();
        let mut test = Vec::new();
        for r in all_refs(recordings) {
            let subject = &recordings[r.recording].subject_id;
            match self.assignments.get(subject) {
                Some(&f) if f == fold => test.push(r),
                Some(_) => rest.push(r),
                None => return Err(Error::InvalidConfig(format!("subject {subject} is not in the fold plan"))),
            }
        }
        let mut rng = rng_for(crate::rng::derive_indexed(self.seed, "fold-split", fold as u64), "shuffle");
        rest.shuffle(&mut rng);
        let n_train = (self.train_fraction * rest.len() as f64).round() as usize;
        let val = rest.split_off(n_train.min(rest.len()));
        Ok(EpochSplit { train: rest, val, test })
    }
}

pub fn make_subject_folds(recordings: &[Recording], k: usize, seed: u64) -> Result<SplitPlan> {
    if k == 0 {
        return Err(Error::InvalidConfig("fold count must be positive".into()));
    }
    let mut subjects: Vec<String> = subject_groups(recordings).into_keys().collect();
    if subjects.len() < k {
        return Err(Error::TooFewSubjects { needed: k, got: subjects.len() });
    }
    subjects.shuffle(&mut rng_for(seed, "subject-folds"));
    let assignments = subjects.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Ok(SplitPlan { fold_count: k, assignments, train_fraction: 0.8, seed })
}

/// Inverse-frequency weights `N / (K * n_j)` over categories `0..k`.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, k });
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingCategory(missing));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (k as f64 * c as f64)).collect())
}
