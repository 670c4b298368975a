use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::io::SplitManifest;
use super::Report;

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.2, 0.3, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Report>,
    pub val: Vec<Report>,
    pub test: Vec<Report>,
    pub manifest: SplitManifest,
}

/// Partitions patients (not reports) into train/val/test. Patient counts are
/// `round(r·n)` for train and validation, the remainder for test.
pub fn split_by_patient(reports: &[Report], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", "must be nonnegative and sum to 1"));
    }
    let patients: BTreeSet<&str> = reports.iter().map(|r| r.patient_id.as_str()).collect();
    let n = patients.len();
    if n < 3 {
        return Err(Error::TooFewPatients { needed: 3, got: n });
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut ids = [Vec::new(), Vec::new(), Vec::new()];
    for (i, p) in order.into_iter().enumerate() {
        let slot = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        ids[slot].push(p.to_string());
    }
    for v in &mut ids {
        v.sort();
    }
    let part = |k: usize| -> Vec<Report> {
        reports
            .iter()
            .filter(|r| ids[k].binary_search(&r.patient_id).is_ok())
            .cloned()
            .collect()
    };
    let (train, val, test) = (part(0), part(1), part(2));
    let [train_ids, val_ids, test_ids] = ids;
    Ok(Splits {
        train,
        val,
        test,
        manifest: SplitManifest {
            seed,
            ratios: [a, b, c],
            train: train_ids,
            val: val_ids,
            test: test_ids,
        },
    })
}

/// Duplicates minority-class items round-robin (in their original order)
/// until both classes have equal counts, then shuffles the result. In the
/// intended use the minority class is the positive one.
pub fn upsample_minority<T: Clone>(items: &[T], is_positive: impl Fn(&T) -> bool, seed: u64) -> Result<Vec<T>> {
    let (pos, neg): (Vec<&T>, Vec<&T>) = items.iter().partition(|x| is_positive(x));
    if pos.is_empty() {
        return Err(Error::SingleClass("all negative"));
    }
    if neg.is_empty() {
        return Err(Error::SingleClass("all positive"));
    }
    let (minority, majority) = if pos.len() <= neg.len() {
        (&pos, &neg)
    } else {
        (&neg, &pos)
    };
    let mut out: Vec<T> = items.to_vec();
    for i in 0..majority.len() - minority.len() {
        out.push(minority[i % minority.len()].clone());
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Balances `train` on `organ`'s label by duplicating positive reports.
pub fn upsample_positive(train: &[Report], organ: &str, seed: u64) -> Result<Vec<Report>> {
    for r in train {
        r.label(organ)?;
    }
    upsample_minority(train, |r| r.labels[organ] == 1, seed)
}
