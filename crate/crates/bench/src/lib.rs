//! Fixtures shared by the benchmarks.

use mept_core::data::{generate, make_mixture, Example};
use mept_core::{Batch, GeneratorSpec, Model, ModelConfig, ParamGroup, RoutingMode};

/// Default-sized model with a frozen backbone, as trained in the mixture runs.
pub fn model(mode: RoutingMode) -> Model {
    let mut m = Model::new(ModelConfig { max_seq_len: 32, routing_mode: mode, ..ModelConfig::default() })
        .expect("default config is valid");
    m.set_trainable(|g| g != ParamGroup::Backbone);
    m
}

/// First `n` training examples of the default task mixture.
pub fn examples(n: usize) -> Vec<Example> {
    let ds = generate(&GeneratorSpec::default(), 0).expect("default spec is valid");
    let mut set = make_mixture(&ds.tasks, 0).expect("default mixture");
    set.train.truncate(n);
    set.train
}

pub fn batch(n: usize) -> Batch {
    Batch::from_examples(&examples(n), 32)
}
