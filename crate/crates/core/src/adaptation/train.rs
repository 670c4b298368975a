use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    classifier_logits_on, encode_on, layer_prompts_on, sigmoid, ModelConfig, TokenBatch, PROMPT_KEY, PROMPT_VALUE,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::mixture::{self, BankLayout};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor, Var};

use super::Example;

/// Optimization budget and evaluation cadence of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation passes per epoch (1 on small data, 10 on large data).
    pub evals_per_epoch: usize,
    /// Stop after this many evaluations without a new best validation F1.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            evals_per_epoch: 1,
            patience: None,
            max_steps: None,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.evals_per_epoch == 0 {
            return Err(Error::config("evals_per_epoch", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a positive number"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Fractional epoch at which the evaluation ran.
    pub epoch: f64,
    pub step: usize,
    pub val_f1: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FitOutcome {
    pub curve: Vec<EvalPoint>,
    /// Index into `curve` of the restored checkpoint.
    pub best: Option<usize>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// How trainable tensors feed the classifier.
#[derive(Debug, Clone)]
pub(crate) enum Route {
    /// Plain encoder; prompts absent.
    Direct,
    /// `prompt.key` / `prompt.value` injected at every layer.
    Prompt,
    /// Prompts composed from a frozen bank by the mixture block.
    Mixture {
        bank: Tensor,
        pooled: Tensor,
        layout: BankLayout,
    },
}

/// A model split into frozen and trainable tensors plus the route that
/// turns them into classifier logits.
#[derive(Debug, Clone)]
pub(crate) struct Adapter {
    pub config: ModelConfig,
    pub frozen: ParamStore,
    pub trainable: ParamStore,
    pub route: Route,
}

const PREDICT_BATCH: usize = 64;

impl Adapter {
    pub fn logits_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        batch: &TokenBatch,
        track: bool,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Bound)> {
        let mut bound = self.frozen.bind(tape, false);
        bound.extend(self.trainable.bind(tape, track));
        let prompts = match &self.route {
            Route::Direct => None,
            Route::Prompt => Some(layer_prompts_on(
                tape,
                bound.get(PROMPT_KEY)?,
                bound.get(PROMPT_VALUE)?,
            )?),
            Route::Mixture { bank, pooled, layout } => {
                let bank = tape.param(bank, false);
                let pooled = tape.param(pooled, false);
                let composed = mixture::mixture_prompts_on(tape, &bound, pooled, bank, *layout)?;
                Some(layer_prompts_on(tape, composed.key, composed.value)?)
            }
        };
        let h = encode_on(tape, &self.config, &bound, batch, prompts.as_deref(), dropout)?;
        Ok((classifier_logits_on(tape, &bound, h)?, bound))
    }

    fn train_step(&mut self, batch: &TokenBatch, labels: &[f64], adam: &mut Adam, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let dropout: Option<&mut dyn RngCore> = if self.config.dropout > 0.0 { Some(rng) } else { None };
        let (logits, bound) = self.logits_on(&mut tape, batch, true, dropout)?;
        let loss = tape.bce_with_logits(logits, labels)?;
        let value = tape.scalar(loss) as f64;
        tape.backward(loss)?;
        self.trainable.collect_grads(&tape, &bound);
        self.trainable.adam_step(adam)?;
        Ok(value)
    }

    pub fn predict(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(PREDICT_BATCH) {
            let batch = TokenBatch::from_sequences(chunk);
            let mut tape = Tape::<f32>::new();
            let (logits, _) = self.logits_on(&mut tape, &batch, false, None)?;
            out.extend(tape.value(logits).iter().map(|&l| sigmoid(l as f64)));
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &[Example]) -> Result<MetricsReport> {
        let seqs: Vec<Vec<u32>> = data.iter().map(|e| e.tokens.clone()).collect();
        let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
        MetricsReport::from_probabilities(&self.predict(&seqs)?, &labels)
    }
}

/// Minibatch Adam on BCE with validation-F1 checkpointing. The trainable
/// tensors are restored to the earliest evaluation with the highest F1.
pub(crate) fn fit(adapter: &mut Adapter, train: &[Example], val: &[Example], hyper: &Hyper) -> Result<FitOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    adapter.trainable.set_all_trainable(true);
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let n_batches = train.len().div_ceil(hyper.batch_size);
    let e = hyper.evals_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut best: Option<(usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut stopped_early = false;
    'epochs: for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for (j, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| train[i].tokens.as_slice()).collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| f64::from(u8::from(train[i].label))).collect();
            let batch = TokenBatch::from_sequences(&seqs);
            loss_sum += adapter.train_step(&batch, &labels, &mut adam, &mut rng)?;
            loss_n += 1;
            steps += 1;
            let out_of_steps = hyper.max_steps.is_some_and(|m| steps >= m);
            let eval_here = (j + 1) * e / n_batches > j * e / n_batches;
            if eval_here || out_of_steps {
                let f1 = adapter.evaluate(val)?.f1;
                curve.push(EvalPoint {
                    epoch: epoch as f64 + (j + 1) as f64 / n_batches as f64,
                    step: steps,
                    val_f1: f1,
                    train_loss: loss_sum / loss_n as f64,
                });
                loss_sum = 0.0;
                loss_n = 0;
                let improved = best.as_ref().is_none_or(|(b, _)| f1 > curve[*b].val_f1);
                if improved {
                    best = Some((curve.len() - 1, adapter.trainable.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if hyper.patience.is_some_and(|p| since_best >= p) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if out_of_steps {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    let best = best.map(|(i, snapshot)| {
        adapter.trainable = snapshot;
        i
    });
    adapter.trainable.clear_grads();
    Ok(FitOutcome {
        curve,
        best,
        steps,
        stopped_early,
    })
}
