use std::collections::BTreeSet;

use crate::encoder::{ModelConfig, PROMPT_KEY as KEY_NAME, PROMPT_VALUE as VALUE_NAME};
use crate::error::{Error, Result};
use crate::mixture;

use super::Method;

/// Named tensor shapes of everything a run touches.
pub type Shapes = Vec<(String, Vec<usize>)>;

/// Split of parameter names into trained and frozen sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParameterPartition {
    pub fn new(trainable: BTreeSet<String>, frozen: BTreeSet<String>) -> Result<Self> {
        if let Some(n) = trainable.intersection(&frozen).next() {
            return Err(Error::config(
                "partition",
                format!("`{n}` is both trainable and frozen"),
            ));
        }
        Ok(Self { trainable, frozen })
    }

    /// The partition each method trains under, over `shapes`.
    pub fn for_method(method: Method, shapes: &Shapes) -> Self {
        let trains = |name: &str| match method {
            Method::Finetune => true,
            Method::PromptTune => name.starts_with("classifier.") || name == KEY_NAME || name == VALUE_NAME,
            Method::Multitask => name.starts_with("classifier.") || name.starts_with(mixture::PREFIX),
        };
        let (t, f): (Vec<&String>, Vec<&String>) = shapes.iter().map(|(n, _)| n).partition(|n| trains(n));
        Self {
            trainable: t.into_iter().cloned().collect(),
            frozen: f.into_iter().cloned().collect(),
        }
    }

    /// Every name is known and every tensor in `shapes` is covered.
    pub fn validate(&self, shapes: &Shapes) -> Result<()> {
        let known: BTreeSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        for n in self.trainable.iter().chain(&self.frozen) {
            if !known.contains(n.as_str()) {
                return Err(Error::UnknownParameter(n.clone()));
            }
        }
        if let Some(n) = known
            .iter()
            .find(|n| !self.trainable.contains(**n) && !self.frozen.contains(**n))
        {
            return Err(Error::config(
                "partition",
                format!("`{n}` is neither trainable nor frozen"),
            ));
        }
        Ok(())
    }
}

/// Exact number of trainable values. Names in the trainable set must exist
/// in `shapes`.
pub fn count_trainable(partition: &ParameterPartition, shapes: &Shapes) -> Result<usize> {
    partition
        .trainable
        .iter()
        .map(|name| {
            shapes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.iter().product::<usize>())
                .ok_or_else(|| Error::UnknownParameter(name.clone()))
        })
        .sum()
}

/// Shapes of the encoder plus the method's extra tensors: a `[L, pl, d]`
/// key/value prompt pair for prompt tuning, or `n_sources` frozen source
/// prompts and the mixture attention block for the multi-task method.
pub fn artifact_shapes(method: Method, config: &ModelConfig, pl: usize, n_sources: usize) -> Shapes {
    let mut shapes = config.parameter_shapes();
    let (l, d) = (config.layers, config.d_model);
    match method {
        Method::Finetune => {}
        Method::PromptTune => {
            shapes.push((KEY_NAME.to_string(), vec![l, pl, d]));
            shapes.push((VALUE_NAME.to_string(), vec![l, pl, d]));
        }
        Method::Multitask => {
            for j in 0..n_sources {
                shapes.push((format!("bank.{j}.key"), vec![l, pl, d]));
                shapes.push((format!("bank.{j}.value"), vec![l, pl, d]));
            }
            shapes.extend(mixture::module_shapes(d));
        }
    }
    shapes
}

/// Trainable count of `method` at the given sizes.
pub fn method_trainable(method: Method, config: &ModelConfig, pl: usize, n_sources: usize) -> usize {
    let shapes = artifact_shapes(method, config, pl, n_sources);
    let p = ParameterPartition::for_method(method, &shapes);
    count_trainable(&p, &shapes).expect("partition built from the same shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_partition_counts_zero() {
        let shapes = ModelConfig::default().parameter_shapes();
        assert_eq!(count_trainable(&ParameterPartition::default(), &shapes).unwrap(), 0);
    }

    #[test]
    fn unknown_names_are_rejected() {
        let shapes = ModelConfig::default().parameter_shapes();
        let p = ParameterPartition::new(["nope".to_string()].into(), BTreeSet::new()).unwrap();
        assert!(matches!(count_trainable(&p, &shapes), Err(Error::UnknownParameter(_))));
        assert!(p.validate(&shapes).is_err());
        assert!(ParameterPartition::new(["a".into()].into(), ["a".into()].into()).is_err());
    }

    #[test]
    fn method_partitions_cover_everything() {
        let cfg = ModelConfig::default();
        for m in [Method::Finetune, Method::PromptTune, Method::Multitask] {
            let shapes = artifact_shapes(m, &cfg, 4, 3);
            ParameterPartition::for_method(m, &shapes).validate(&shapes).unwrap();
        }
    }
}
