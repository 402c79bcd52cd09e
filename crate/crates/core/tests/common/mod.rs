#![allow(dead_code)]

pub mod gradcheck;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpad::corpus::{encode_all, EmbeddingTable, LabeledDocument, PreprocessRules, Vocabulary};
use mpad::model::{Mpad, MpadConfig, PreparedDocument, Variant};

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "at", "by",
    "from", "that", "this", "it", "be", "are", "or", "an", "not", "but", "some", "more",
];

fn class_word(class: usize, k: usize) -> String {
    format!("k{class}w{k}")
}

/// Labeled texts where each class has its own keywords mixed into shared
/// filler words. Documents have between `sentences.0` and `sentences.1`
/// sentences.
pub fn synthetic_texts(
    n: usize,
    classes: usize,
    sentences: (usize, usize),
    seed: u64,
) -> Vec<(usize, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % classes;
            let k = rng.gen_range(sentences.0..=sentences.1);
            let text: Vec<String> = (0..k)
                .map(|_| {
                    let len = rng.gen_range(4..=9);
                    let mut words: Vec<String> = (0..len)
                        .map(|_| {
                            if rng.gen_bool(0.35) {
                                class_word(label, rng.gen_range(0..6))
                            } else {
                                FILLER.choose(&mut rng).unwrap().to_string()
                            }
                        })
                        .collect();
                    if !words.iter().any(|w| w.starts_with('k')) {
                        words[0] = class_word(label, rng.gen_range(0..6));
                    }
                    format!("{} .", words.join(" "))
                })
                .collect();
            (label, text.join(" "))
        })
        .collect()
}

pub struct Corpus {
    pub docs: Vec<LabeledDocument>,
    pub vocab: Vocabulary,
}

pub fn synthetic_corpus(n: usize, classes: usize, sentences: (usize, usize), seed: u64) -> Corpus {
    let rules = PreprocessRules::default();
    let docs: Vec<LabeledDocument> = synthetic_texts(n, classes, sentences, seed)
        .into_iter()
        .map(|(label, text)| LabeledDocument::new(label, &text, &rules).unwrap())
        .collect();
    let vocab = Vocabulary::build(&docs, 1).unwrap();
    Corpus { docs, vocab }
}

pub fn small_config(variant: Variant, classes: usize) -> MpadConfig {
    MpadConfig {
        hidden_dim: 16,
        embedding_dim: 12,
        num_classes: classes,
        variant,
        ..MpadConfig::default()
    }
}

pub fn build_model(corpus: &Corpus, config: MpadConfig, seed: u64) -> Mpad {
    let table = EmbeddingTable::random(corpus.vocab.len(), config.embedding_dim, seed).unwrap();
    Mpad::new(config, table.vectors, seed).unwrap()
}

pub fn prepare(model: &Mpad, corpus: &Corpus) -> Vec<PreparedDocument> {
    encode_all(&corpus.docs, &corpus.vocab)
        .iter()
        .map(|d| model.prepare(d).unwrap())
        .collect()
}

pub fn write_tsv(path: &std::path::Path, rows: &[(usize, String)]) {
    let body: String = rows
        .iter()
        .map(|(label, text)| format!("class{label}\t{text}\n"))
        .collect();
    std::fs::write(path, body).unwrap();
}
