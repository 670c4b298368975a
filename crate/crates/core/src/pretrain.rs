//! Masked-token pretraining of the encoder backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{is_backbone, mlm_loss_on, EncoderModel, TokenBatch, CLS_ID, MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean masked-token loss over each block of `LOSS_WINDOW` steps.
    pub loss_curve: Vec<f64>,
}

pub const LOSS_WINDOW: usize = 50;

/// Replaces each non-special token with `[MASK]` at rate `mask_rate` and
/// records the original id. At least one position per batch is masked.
pub fn mask_batch(seqs: &[&[u32]], mask_rate: f64, rng: &mut impl Rng) -> TokenBatch {
    let mut batch = TokenBatch::from_sequences(seqs);
    let mut targets = vec![None; batch.ids.len()];
    let candidates: Vec<usize> = (0..batch.ids.len())
        .filter(|&i| !matches!(batch.ids[i], PAD_ID | CLS_ID))
        .collect();
    for &i in &candidates {
        if rng.random_bool(mask_rate) {
            targets[i] = Some(batch.ids[i]);
            batch.ids[i] = MASK_ID;
        }
    }
    if targets.iter().all(Option::is_none) {
        if let Some(&i) = candidates.get(rng.random_range(0..candidates.len().max(1))) {
            targets[i] = Some(batch.ids[i]);
            batch.ids[i] = MASK_ID;
        }
    }
    batch.mlm_targets = Some(targets);
    batch
}

/// Trains every backbone parameter on the masked-token objective for a fixed
/// number of steps, cycling through shuffled passes over `seqs`.
pub fn pretrain_mlm(model: &mut EncoderModel, seqs: &[Vec<u32>], config: &PretrainConfig) -> Result<PretrainReport> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&config.mask_rate) || config.mask_rate == 0.0 {
        return Err(Error::config("pretrain.mask_rate", "must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    model.params_mut().set_trainable_where(is_backbone);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut window = Vec::new();
    let mut loss_curve = Vec::new();
    let cfg = model.config().clone();
    for _ in 0..config.steps {
        let mut picked = Vec::with_capacity(config.batch_size);
        while picked.len() < config.batch_size.min(seqs.len()) {
            if cursor == order.len() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(seqs[order[cursor]].as_slice());
            cursor += 1;
        }
        let batch = mask_batch(&picked, config.mask_rate, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = model.params().bind(&mut tape, true);
        let loss = match mlm_loss_on(&mut tape, &cfg, &bound, &batch, Some(&mut rng)) {
            Ok(l) => l,
            // only [CLS] tokens in this batch
            Err(Error::NoMaskedPositions) => continue,
            Err(e) => return Err(e),
        };
        window.push(tape.scalar(loss) as f64);
        tape.backward(loss)?;
        model.params_mut().collect_grads(&tape, &bound);
        model.params_mut().adam_step(&mut adam)?;
        if window.len() == LOSS_WINDOW {
            loss_curve.push(window.iter().sum::<f64>() / LOSS_WINDOW as f64);
            window.clear();
        }
    }
    if !window.is_empty() {
        loss_curve.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    model.params_mut().set_all_trainable(true);
    Ok(PretrainReport {
        steps: config.steps,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_skips_special_tokens_and_never_empties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = [CLS_ID, 10, 11, 12];
        let b = [CLS_ID, 13];
        let batch = mask_batch(&[&a, &b], 1e-9, &mut rng);
        let t = batch.mlm_targets.unwrap();
        assert_eq!(t.iter().filter(|x| x.is_some()).count(), 1);
        for (i, x) in t.iter().enumerate() {
            if x.is_some() {
                assert_eq!(batch.ids[i], MASK_ID);
                assert!(i % 4 != 0 && i != 6 && i != 7);
            }
        }
        let all = mask_batch(&[&a], 1.0, &mut rng);
        assert_eq!(&all.ids, &[CLS_ID, MASK_ID, MASK_ID, MASK_ID]);
    }
}
