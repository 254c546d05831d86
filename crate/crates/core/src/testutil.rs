//! Small fixtures shared by unit tests.

use crate::model::{Model, ModelConfig, Tokenizer};
use crate::seqdata::{synth_planted_dataset, Dataset, SynthSpec};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        seq_len: 12,
        kmer: 3,
        bpe_vocab: 16,
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ff: 24,
        n_experts: 2,
        expert_segments: 2,
        expert_heads: 2,
        expert_ff: 12,
        classifier_hidden: 5,
        ..ModelConfig::toy(16)
    }
}

pub fn tiny_tokenizer() -> Tokenizer {
    let corpus = ["ACGTACGTACGT", "AAAACCCCGGGG", "ACACACACGTGT"];
    Tokenizer {
        k: 3,
        bpe: crate::seqdata::train_bpe(&corpus, 16).unwrap(),
    }
}

pub fn tiny_model(seed: u64) -> Model<f64> {
    Model::new(tiny_config(), tiny_tokenizer(), seed).unwrap()
}

/// Planted dataset whose length matches [`tiny_config`].
pub fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        name: "tiny".into(),
        n_pos: n,
        n_neg: n,
        length: 12,
        core_pos: 7,
        tract_pos: 1,
        test_fraction: 0.25,
        ..SynthSpec::default()
    };
    synth_planted_dataset(&spec, seed).unwrap()
}
