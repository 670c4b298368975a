//! Target-task prompts composed from frozen source-task prompts.
//!
//! Each source prompt is max-pooled to a `d`-vector, projected by `W_K` and
//! layer-normalized into a key `k_i`. A trainable query `q` scores the keys
//! with the scaled dot product `s_i = q·k_i / (e·d)`, and the weights are the
//! degree-2 polynomial normalization `w_i = s_i² / Σ_j s_j²`. The target
//! prompt is `Σ_j w_j P_j`, one scalar per source applied to every layer's
//! key and value prompts.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    check_splits, fit, method_trainable, run_hyper, AdaptationResult, Adapter, Example, Hyper, Method, Route,
};
use crate::encoder::{is_backbone, EncoderModel, PromptSet, INIT_STD};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::params::{Bound, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tape, Tensor, Var, POLY2_GUARD};

pub const PREFIX: &str = "mixture.";
pub const WK: &str = "mixture.wk";
pub const QUERY: &str = "mixture.q";
pub const NORM_GAIN: &str = "mixture.norm.gain";
pub const NORM_BIAS: &str = "mixture.norm.bias";
const NORM_EPS: f64 = 1e-5;

pub fn module_shapes(d: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (WK.to_string(), vec![d, d]),
        (QUERY.to_string(), vec![d]),
        (NORM_GAIN.to_string(), vec![d]),
        (NORM_BIAS.to_string(), vec![d]),
    ]
}

/// Frozen source prompts, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePromptBank {
    entries: Vec<(String, PromptSet)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankLayout {
    pub layers: usize,
    pub pl: usize,
    pub d: usize,
}

impl BankLayout {
    fn entry_len(&self) -> usize {
        2 * self.layers * self.pl * self.d
    }
}

impl SourcePromptBank {
    pub fn new(entries: Vec<(String, PromptSet)>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::config("bank", "needs at least one source prompt"))?;
        let shape = first.1.key.shape().to_vec();
        if first.1.is_empty() {
            return Err(Error::config("bank", "source prompts need pl >= 1"));
        }
        let mut names = HashSet::new();
        for (name, p) in &entries {
            if !names.insert(name.as_str()) {
                return Err(Error::config("bank", format!("duplicate task `{name}`")));
            }
            if p.key.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "bank",
                    left: shape.clone(),
                    right: p.key.shape().to_vec(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, PromptSet)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn layout(&self) -> BankLayout {
        let p = &self.entries[0].1;
        BankLayout {
            layers: p.layers(),
            pl: p.len(),
            d: p.d_model(),
        }
    }

    /// `[n, 2·L·pl·d]`: each row is an entry's keys followed by its values.
    pub fn flat(&self) -> Tensor {
        let m = self.layout().entry_len();
        let mut data = Vec::with_capacity(self.len() * m);
        for (_, p) in &self.entries {
            data.extend_from_slice(p.key.data());
            data.extend_from_slice(p.value.data());
        }
        Tensor::new(vec![self.len(), m], data).expect("bank rows share one shape")
    }

    /// `[n, d]` pooled representations.
    pub fn pooled(&self) -> Tensor {
        let d = self.layout().d;
        let data = self
            .entries
            .iter()
            .flat_map(|(_, p)| pool_prompt(p).into_data())
            .collect();
        Tensor::new(vec![self.len(), d], data).expect("pooled rows are d long")
    }

    pub fn digest(&self) -> String {
        let mut store = ParamStore::new();
        for (name, p) in &self.entries {
            store.insert(format!("{name}.key"), p.key.clone());
            store.insert(format!("{name}.value"), p.value.clone());
        }
        store.digest()
    }

    /// One prompt file per entry under `dir`, plus `bank.txt` listing the
    /// task names in order.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (i, (name, p)) in self.entries.iter().enumerate() {
            p.save(dir.join(format!("source_{i:02}.bin")))?;
            index.push_str(name);
            index.push('\n');
        }
        std::fs::write(dir.join("bank.txt"), index)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = std::fs::read_to_string(dir.join("bank.txt"))?;
        let entries = index
            .lines()
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, name)| {
                Ok((
                    name.to_string(),
                    PromptSet::load(dir.join(format!("source_{i:02}.bin")))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }
}

/// Per-channel maximum over layers, the key/value pair, and prompt positions.
pub fn pool_prompt(p: &PromptSet) -> Tensor {
    let d = p.d_model();
    let mut out = vec![f32::NEG_INFINITY; d];
    for row in p.key.data().chunks(d).chain(p.value.data().chunks(d)) {
        for (o, &x) in out.iter_mut().zip(row) {
            if x > *o {
                *o = x;
            }
        }
    }
    if p.is_empty() {
        out.fill(0.0);
    }
    Tensor::new(vec![d], out).expect("d values")
}

/// Trainable attention block: `W_K [d, d]`, `q [d]`, and the key layer
/// norm's gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModule {
    pub params: ParamStore,
}

impl MixtureModule {
    /// `q ~ N(0, 0.02)`, `W_K ~ N(0, 1/d)`, unit gain, zero bias.
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(WK, Tensor::randn(&[d, d], (1.0 / d as f32).sqrt(), &mut rng));
        params.insert(QUERY, Tensor::randn(&[d], INIT_STD, &mut rng));
        params.insert(NORM_GAIN, Tensor::filled(&[d], 1.0));
        params.insert(NORM_BIAS, Tensor::zeros(&[d]));
        Self { params }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, _) in module_shapes(store.get(QUERY)?.numel()) {
            let mut t = store.get(&name)?.clone();
            t.clear_grad();
            params.insert(name, t);
        }
        Ok(Self { params })
    }

    pub fn d_model(&self) -> usize {
        self.params.get(QUERY).map(Tensor::numel).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights(pub Vec<f64>);

/// Plain degree-2 normalization of already-scaled dot products, with the
/// uniform fallback when `Σ s²` is below `guard`.
pub fn poly2_weights(scaled: &[f64], guard: f64) -> MixtureWeights {
    let z: f64 = scaled.iter().map(|s| s * s).sum();
    let n = scaled.len() as f64;
    MixtureWeights(if z < guard {
        vec![1.0 / n; scaled.len()]
    } else {
        scaled.iter().map(|s| s * s / z).collect()
    })
}

pub(crate) struct Composed {
    pub key: Var,
    pub value: Var,
    pub weights: Var,
    pub scaled: Var,
}

/// Mixture path on a tape: `pooled [n, d]` and `bank [n, 2·L·pl·d]` are
/// constants; `bound` supplies the mixture parameters. The uniform fallback
/// triggers when the unscaled `Σ (q·k_j)²` drops below `1e-12`.
pub(crate) fn mixture_prompts_on<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    pooled: Var,
    bank: Var,
    layout: BankLayout,
) -> Result<Composed> {
    let n = tape.shape(pooled)[0];
    let d = layout.d;
    let projected = tape.matmul(pooled, bound.get(WK)?)?;
    let keys = tape.layer_norm(projected, bound.get(NORM_GAIN)?, bound.get(NORM_BIAS)?, NORM_EPS)?;
    let q = tape.reshape(bound.get(QUERY)?, &[d, 1])?;
    let dots = tape.matmul(keys, q)?;
    let dots = tape.reshape(dots, &[n])?;
    let scale = 1.0 / (std::f64::consts::E * d as f64);
    let scaled = tape.scale(dots, scale);
    let weights = tape.poly2_normalize_guarded(scaled, POLY2_GUARD * scale * scale)?;
    let w_row = tape.reshape(weights, &[1, n])?;
    let target = tape.matmul(w_row, bank)?;
    let target = tape.reshape(target, &[2, layout.layers, layout.pl, d])?;
    let key = tape.narrow(target, 0, 1)?;
    let key = tape.reshape(key, &[layout.layers, layout.pl, d])?;
    let value = tape.narrow(target, 1, 1)?;
    let value = tape.reshape(value, &[layout.layers, layout.pl, d])?;
    Ok(Composed {
        key,
        value,
        weights,
        scaled,
    })
}

fn check_module(module: &MixtureModule, bank: &SourcePromptBank) -> Result<()> {
    if module.d_model() != bank.layout().d {
        return Err(Error::ShapeMismatch {
            op: "mixture",
            left: vec![module.d_model()],
            right: vec![bank.layout().d],
        });
    }
    Ok(())
}

/// Weights and scaled dot products `q·k_i/(e·d)`, computed in `f64`.
pub fn mixture_scores(module: &MixtureModule, bank: &SourcePromptBank) -> Result<(MixtureWeights, Vec<f64>)> {
    check_module(module, bank)?;
    let mut tape = Tape::<f64>::new();
    let bound = module.params.bind(&mut tape, false);
    let pooled = tape.param(&bank.pooled(), false);
    let flat = tape.param(&bank.flat(), false);
    let c = mixture_prompts_on(&mut tape, &bound, pooled, flat, bank.layout())?;
    Ok((
        MixtureWeights(tape.value(c.weights).to_vec()),
        tape.value(c.scaled).to_vec(),
    ))
}

pub fn mixture_weights(module: &MixtureModule, bank: &SourcePromptBank) -> Result<MixtureWeights> {
    Ok(mixture_scores(module, bank)?.0)
}

/// `Σ_j w_j P_j` over keys and values of every layer, accumulated in `f64`.
pub fn compose_target(w: &MixtureWeights, bank: &SourcePromptBank) -> Result<PromptSet> {
    if w.0.len() != bank.len() {
        return Err(Error::ShapeMismatch {
            op: "compose_target",
            left: vec![w.0.len()],
            right: vec![bank.len()],
        });
    }
    let shape = bank.entries[0].1.key.shape().to_vec();
    let combine = |pick: fn(&PromptSet) -> &Tensor| {
        let mut acc = vec![0.0f64; pick(&bank.entries[0].1).numel()];
        for (wj, (_, p)) in w.0.iter().zip(&bank.entries) {
            for (a, &x) in acc.iter_mut().zip(pick(p).data()) {
                *a += wj * x as f64;
            }
        }
        Tensor::new(shape.clone(), acc.into_iter().map(|x| x as f32).collect())
    };
    PromptSet::new(combine(|p| &p.key)?, combine(|p| &p.value)?)
}

/// A trained multi-task model: frozen backbone with the new head, the
/// mixture block, and the frozen bank it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskModel {
    pub model: EncoderModel,
    pub module: MixtureModule,
    pub bank: SourcePromptBank,
}

pub(crate) fn mixture_adapter(model: &EncoderModel, module: &MixtureModule, bank: &SourcePromptBank) -> Adapter {
    let mut frozen = ParamStore::new();
    let mut trainable = module.params.clone();
    for (name, t) in model.params().iter() {
        if is_backbone(name) {
            frozen.insert(name, t.clone());
        } else {
            trainable.insert(name, t.clone());
        }
    }
    Adapter {
        config: model.config().clone(),
        frozen,
        trainable,
        route: Route::Mixture {
            bank: bank.flat(),
            pooled: bank.pooled(),
            layout: bank.layout(),
        },
    }
}

impl MultitaskModel {
    /// Probabilities through the live mixture path.
    pub fn classify(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        mixture_adapter(&self.model, &self.module, &self.bank).predict(seqs)
    }

    pub fn evaluate(&self, data: &[Example]) -> Result<MetricsReport> {
        mixture_adapter(&self.model, &self.module, &self.bank).evaluate(data)
    }

    pub fn weights(&self) -> Result<MixtureWeights> {
        mixture_weights(&self.module, &self.bank)
    }

    /// The composed target prompt, computed by the same `f32` path the live
    /// forward uses so inference with it is bit-identical.
    pub fn export_target_prompt(&self) -> Result<PromptSet> {
        let mut tape = Tape::<f32>::new();
        let bound = self.module.params.bind(&mut tape, false);
        let pooled = tape.param(&self.bank.pooled(), false);
        let flat = tape.param(&self.bank.flat(), false);
        let c = mixture_prompts_on(&mut tape, &bound, pooled, flat, self.bank.layout())?;
        PromptSet::new(tape.to_tensor(c.key), tape.to_tensor(c.value))
    }
}

/// Trains `W_K`, `q`, the key layer norm and a fresh classifier head; the
/// backbone and every source prompt stay frozen.
pub fn train_multitask_target(
    model: &EncoderModel,
    bank: &SourcePromptBank,
    train: &[Example],
    val: &[Example],
    hyper: &Hyper,
) -> Result<(MultitaskModel, AdaptationResult)> {
    let cfg = model.config();
    let layout = bank.layout();
    if layout.d != cfg.d_model || layout.layers != cfg.layers {
        return Err(Error::ShapeMismatch {
            op: "multitask",
            left: vec![layout.layers, layout.d],
            right: vec![cfg.layers, cfg.d_model],
        });
    }
    let warnings = check_splits(train, val)?;
    hyper.validate()?;
    let trainable = method_trainable(Method::Multitask, cfg, layout.pl, bank.len());
    let mut start = model.clone();
    start.reset_classifier(derive_seed(hyper.seed, 1));
    let module = MixtureModule::new(cfg.d_model, derive_seed(hyper.seed, 4));
    let mut adapter = mixture_adapter(&start, &module, bank);
    let fit = fit(&mut adapter, train, val, &run_hyper(hyper))?;
    let module = MixtureModule::from_store(&adapter.trainable)?;
    for name in ["classifier.weight", "classifier.bias"] {
        let mut t = adapter.trainable.get(name)?.clone();
        t.clear_grad();
        start.params_mut().insert(name, t);
    }
    Ok((
        MultitaskModel {
            model: start,
            module,
            bank: bank.clone(),
        },
        AdaptationResult::from_fit(Method::Multitask, fit, trainable, warnings),
    ))
}
