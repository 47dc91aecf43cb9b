#![allow(dead_code)]

use metatts::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use metatts::model::{EmbMode, FastSpeech, ModelConfig};

/// A corpus and model small enough for finite-difference checks.
pub fn tiny_corpus_config() -> CorpusConfig {
    CorpusConfig { n_phonemes: 4, n_mel: 2, min_len: 2, max_len: 4, ..CorpusConfig::default() }
}

pub fn tiny_model_config(mode: EmbMode) -> ModelConfig {
    ModelConfig {
        hidden_dim: 2,
        n_encoder_blocks: 0,
        n_decoder_blocks: 0,
        n_heads: 1,
        ffn_dim: 2,
        predictor_dim: 2,
        n_phonemes: 4,
        n_mel: 2,
        spk_emb_dim: 2,
        emb_mode: mode,
        n_bins: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_setup(n_speakers: usize, seed: u64) -> (Corpus, FastSpeech) {
    let c = generate_corpus(n_speakers, 10, seed, Split::Train, &tiny_corpus_config()).unwrap();
    (c, FastSpeech::new(tiny_model_config(EmbMode::Table)).unwrap())
}

/// Small but complete model: attention blocks in both stacks.
pub fn small_model_config(mode: EmbMode) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        n_heads: 2,
        ffn_dim: 16,
        predictor_dim: 8,
        spk_emb_dim: 8,
        emb_mode: mode,
        ..ModelConfig::default()
    }
}
