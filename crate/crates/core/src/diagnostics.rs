//! Finite-difference checks of the autodiff engine, the classifier forward
//! and the mixture path, shared by the CLI and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{
    classifier_logits_on, encode_on, layer_prompts_on, EncoderModel, ModelConfig, PromptSet, TokenBatch, CLS_ID,
};
use crate::error::Result;
use crate::mixture::{self, SourcePromptBank};
use crate::params::Bound;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var, DEFAULT_STEP};

/// Relative error every check must stay under.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("sized")
}

/// Fixed random weighting so every output element reaches the loss.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = tape.constant(tape.shape(x).to_vec(), w)?;
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

/// One check per differentiable tape operation.
pub fn primitive_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, 3, 4], &mut rng);
    let y = uniform(&[2, 3, 4], &mut rng);
    let w = uniform(&[4, 3], &mut rng);
    let v4 = uniform(&[4], &mut rng);
    let g4 = uniform(&[4], &mut rng);
    let kt = uniform(&[2, 5, 4], &mut rng);
    let bt = uniform(&[2, 4, 5], &mut rng);
    let table = uniform(&[6, 4], &mut rng);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![x.clone(), w.clone()],
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o, 1)
            }),
        ),
        (
            "matmul_nt",
            vec![x.clone(), kt],
            Box::new(|t, v| {
                let o = t.matmul_nt(v[0], v[1])?;
                project(t, o, 2)
            }),
        ),
        (
            "bmm",
            vec![x.clone(), bt],
            Box::new(|t, v| {
                let o = t.bmm(v[0], v[1])?;
                project(t, o, 3)
            }),
        ),
        (
            "add",
            vec![x.clone(), y.clone()],
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                project(t, o, 4)
            }),
        ),
        (
            "mul",
            vec![x.clone(), y.clone()],
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1])?;
                project(t, o, 5)
            }),
        ),
        (
            "add_bias",
            vec![x.clone(), v4.clone()],
            Box::new(|t, v| {
                let o = t.add_bias(v[0], v[1])?;
                project(t, o, 6)
            }),
        ),
        (
            "scale",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                project(t, o, 7)
            }),
        ),
        (
            "square",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.square(v[0]);
                project(t, o, 8)
            }),
        ),
        (
            "gelu",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.gelu(v[0]);
                project(t, o, 9)
            }),
        ),
        (
            "softmax_rows",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.softmax_rows(v[0])?;
                project(t, o, 10)
            }),
        ),
        (
            "masked_softmax",
            vec![x.clone()],
            Box::new(|t, v| {
                let keep = [true, false, true, true, true, true, false, true];
                let o = t.masked_softmax(v[0], &keep)?;
                project(t, o, 11)
            }),
        ),
        (
            "layer_norm",
            vec![x.clone(), g4, v4.clone()],
            Box::new(|t, v| {
                let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, o, 12)
            }),
        ),
        (
            "concat",
            vec![x.clone(), y],
            Box::new(|t, v| {
                let o = t.concat(v[0], v[1], 1)?;
                project(t, o, 13)
            }),
        ),
        (
            "permute",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.permute(v[0], &[2, 0, 1])?;
                project(t, o, 14)
            }),
        ),
        (
            "reshape",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.reshape(v[0], &[6, 4])?;
                project(t, o, 15)
            }),
        ),
        (
            "gather_rows",
            vec![table.clone()],
            Box::new(|t, v| {
                let o = t.gather_rows(v[0], &[0, 3, 3, 5, 1])?;
                project(t, o, 16)
            }),
        ),
        (
            "broadcast",
            vec![w.clone()],
            Box::new(|t, v| {
                let o = t.broadcast(v[0], 3);
                project(t, o, 17)
            }),
        ),
        (
            "narrow",
            vec![table.clone()],
            Box::new(|t, v| {
                let o = t.narrow(v[0], 2, 3)?;
                project(t, o, 18)
            }),
        ),
        (
            "max_pool_to_vector",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.max_pool_to_vector(v[0])?;
                project(t, o, 19)
            }),
        ),
        (
            "mean",
            vec![x],
            Box::new(|t, v| {
                let o = t.square(v[0]);
                t.mean(o)
            }),
        ),
        (
            "bce_with_logits",
            vec![w],
            Box::new(|t, v| {
                let o = t.scale(v[0], 3.0);
                t.bce_with_logits(o, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
            }),
        ),
        (
            "cross_entropy",
            vec![table],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 1, 2, 3, 3, 1])),
        ),
        (
            "poly2_normalize",
            vec![v4],
            Box::new(|t, v| {
                let o = t.poly2_normalize(v[0])?;
                project(t, o, 20)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(NamedCheck {
                name: name.to_string(),
                report: grad_check(|t, v| f(t, v), &inputs, DEFAULT_STEP, None, seed)?,
            })
        })
        .collect()
}

/// Random model with every parameter nudged by up to ±0.3, so attention and
/// layer norms sit away from their symmetric initial point.
pub fn scrambled_model(config: &ModelConfig, seed: u64) -> Result<EncoderModel> {
    let mut model = EncoderModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3f32..0.3);
        }
    }
    Ok(model)
}

fn check_batch(config: &ModelConfig) -> (TokenBatch, Vec<f64>) {
    let v = config.vocab_size as u32;
    let len = config.max_len.min(4);
    let seqs: Vec<Vec<u32>> = (0..2u32)
        .map(|b| {
            let mut s = vec![CLS_ID];
            s.extend((1..len as u32).map(|i| 4 + (b * 7 + i * 3) % (v - 4).max(1)));
            s
        })
        .collect();
    (TokenBatch::from_sequences(&seqs), vec![1.0, 0.0])
}

/// Gradient of the classification loss with respect to every encoder
/// parameter and a `pl`-token prompt set (skipped when `pl` is 0).
pub fn classifier_check(config: &ModelConfig, pl: usize, seed: u64, max_coords: Option<usize>) -> Result<NamedCheck> {
    config.validate()?;
    let model = scrambled_model(config, seed)?;
    let (batch, labels) = check_batch(config);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    if pl > 0 {
        let p = PromptSet::random(config.layers, pl, config.d_model, seed + 1);
        inputs.push(p.key);
        inputs.push(p.value);
    }
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mut bound = Bound::default();
        for (n, &v) in names.iter().zip(vars) {
            bound.insert(n.clone(), v);
        }
        let prompts = match pl {
            0 => None,
            _ => Some(layer_prompts_on(tape, vars[names.len()], vars[names.len() + 1])?),
        };
        let h = encode_on(tape, config, &bound, &batch, prompts.as_deref(), None)?;
        let logits = classifier_logits_on(tape, &bound, h)?;
        tape.bce_with_logits(logits, &labels)
    };
    Ok(NamedCheck {
        name: "classifier".into(),
        report: grad_check(f, &inputs, DEFAULT_STEP, max_coords, seed)?,
    })
}

/// Gradient of the classification loss through weights, composition and
/// prompt injection, with respect to the mixture block and classifier head.
pub fn mixture_check(
    config: &ModelConfig,
    n_sources: usize,
    pl: usize,
    seed: u64,
    max_coords: Option<usize>,
) -> Result<NamedCheck> {
    config.validate()?;
    let model = scrambled_model(config, seed)?;
    let (batch, labels) = check_batch(config);
    let bank = SourcePromptBank::new(
        (0..n_sources)
            .map(|j| {
                let mut p = PromptSet::random(config.layers, pl.max(1), config.d_model, seed + 10 + j as u64);
                for x in p.key.data_mut().iter_mut().chain(p.value.data_mut()) {
                    *x *= 25.0;
                }
                (format!("source{j}"), p)
            })
            .collect(),
    )?;
    let mut module = mixture::MixtureModule::new(config.d_model, seed + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    for (_, t) in module.params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5f32..0.5);
        }
    }
    let mut names: Vec<String> = module.params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = module.params.iter().map(|(_, t)| t.clone()).collect();
    for name in ["classifier.weight", "classifier.bias"] {
        names.push(name.into());
        inputs.push(model.params().get(name)?.clone());
    }
    let (pooled, flat, layout) = (bank.pooled(), bank.flat(), bank.layout());
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mut bound = model.params().bind(tape, false);
        for (n, &v) in names.iter().zip(vars) {
            bound.insert(n.clone(), v);
        }
        let pooled = tape.param(&pooled, false);
        let flat = tape.param(&flat, false);
        let c = mixture::mixture_prompts_on(tape, &bound, pooled, flat, layout)?;
        let prompts = layer_prompts_on(tape, c.key, c.value)?;
        let h = encode_on(tape, config, &bound, &batch, Some(&prompts), None)?;
        let logits = classifier_logits_on(tape, &bound, h)?;
        tape.bce_with_logits(logits, &labels)
    };
    Ok(NamedCheck {
        name: "mixture".into(),
        report: grad_check(f, &inputs, DEFAULT_STEP, max_coords, seed)?,
    })
}
