//! Text ingestion: tokenization, sentence splitting, vocabularies, embedding
//! tables and the tab-separated dataset format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_INDEX: usize = 0;

/// Bound of the uniform distribution used for vectors missing from the
/// embedding file.
pub const OOV_INIT_BOUND: f64 = 0.25;

const CONTRACTIONS: [&str; 6] = ["'s", "'ve", "n't", "'re", "'d", "'ll"];
const PUNCTUATION: [char; 6] = [',', '.', '!', '?', '(', ')'];

/// Text cleaning rules, applied in this order:
///
/// 1. lowercase (optional);
/// 2. every character that is neither alphanumeric nor one of
///    `( ) , . ! ? ' `` ` becomes a space;
/// 3. the contractions `'s 've n't 're 'd 'll` are split off the preceding
///    word (optional);
/// 4. `, . ! ? ( )` become standalone tokens (optional);
/// 5. split on whitespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessRules {
    pub lowercase: bool,
    pub split_contractions: bool,
    pub separate_punctuation: bool,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            lowercase: true,
            split_contractions: true,
            separate_punctuation: true,
        }
    }
}

pub fn tokenize(text: &str, rules: &PreprocessRules) -> Vec<String> {
    let lowered;
    let text = if rules.lowercase {
        lowered = text.to_lowercase();
        lowered.as_str()
    } else {
        text
    };
    let mut cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || PUNCTUATION.contains(&c) || c == '\'' || c == '`' {
                c
            } else {
                ' '
            }
        })
        .collect();
    if rules.split_contractions {
        for suffix in CONTRACTIONS {
            cleaned = cleaned.replace(suffix, &format!(" {suffix}"));
        }
    }
    if rules.separate_punctuation {
        let mut spaced = String::with_capacity(cleaned.len() + 16);
        for c in cleaned.chars() {
            if PUNCTUATION.contains(&c) {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        cleaned = spaced;
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Splits after `.`, `!` or `?` when the next character is whitespace.
/// Sentences are trimmed; blank ones are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_trimmed(&mut out, &text[start..end]);
                    start = end;
                }
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_owned());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDocument {
    pub label: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub sentences: Vec<Vec<String>>,
}

impl LabeledDocument {
    /// Returns `None` when nothing survives preprocessing.
    pub fn new(label: usize, text: &str, rules: &PreprocessRules) -> Option<Self> {
        let sentences: Vec<Vec<String>> = split_sentences(text)
            .iter()
            .map(|s| tokenize(s, rules))
            .filter(|s| !s.is_empty())
            .collect();
        if sentences.is_empty() {
            return None;
        }
        Some(Self {
            label,
            text: text.to_owned(),
            tokens: sentences.concat(),
            sentences,
        })
    }
}

/// Bidirectional token/index map. Index 0 is always [`UNK_TOKEN`].
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens seen fewer than `min_count` times map to UNK. Remaining tokens
    /// are ordered by decreasing count, then lexicographically.
    pub fn build(docs: &[LabeledDocument], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::InvalidArgument(
                "min_count must be at least 1".into(),
            ));
        }
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for t in &doc.tokens {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut unk_count = 0;
        let mut kept: Vec<(&str, usize)> = Vec::new();
        for (t, c) in freq {
            if c >= min_count {
                kept.push((t, c));
            } else {
                unk_count += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let entries = std::iter::once((UNK_TOKEN.to_owned(), unk_count))
            .chain(kept.into_iter().map(|(t, c)| (t.to_owned(), c)));
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        let mut index = HashMap::new();
        for (t, c) in entries {
            index.insert(t.clone(), tokens.len());
            tokens.push(t);
            counts.push(c);
        }
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn count(&self, index: usize) -> usize {
        self.counts[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t)).collect()
    }

    /// One `token<TAB>count` line per entry, in index order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            s.push_str(t);
            s.push('\t');
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |message: &str| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: message.to_owned(),
            };
            let (t, c) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>count"))?;
            let c = c.parse().map_err(|_| parse_err("invalid count"))?;
            entries.push((t.to_owned(), c));
        }
        if entries.first().map(|e| e.0.as_str()) != Some(UNK_TOKEN) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: format!("first entry must be {UNK_TOKEN}"),
            });
        }
        Ok(Self::from_entries(entries))
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// One embedding row per vocabulary index.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
    /// `true` where the row came from the embedding file.
    pub pretrained: Vec<bool>,
}

impl EmbeddingTable {
    /// Every row uniform in `[-0.25, 0.25]`, drawn row-major from a
    /// generator seeded with `seed`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            vectors: Matrix::uniform(vocab_size, dim, OOV_INIT_BOUND, &mut rng),
            pretrained: vec![false; vocab_size],
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of vocabulary entries initialized from the file.
    pub fn coverage(&self) -> usize {
        self.pretrained.iter().filter(|&&p| p).count()
    }
}

/// Reads a text embedding file (`V d` header, then `token v1 .. vd` lines).
/// Only exact token matches are used; the first occurrence wins.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path, vocab, dim, seed)
}

pub fn parse_embeddings(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed)?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let declared: usize = match fields.as_slice() {
        [_, d] => d
            .parse()
            .map_err(|_| parse_err(1, format!("invalid dimension {d:?}")))?,
        _ => return Err(parse_err(1, "header must be `count dim`".into())),
    };
    if declared != dim {
        return Err(Error::EmbeddingDim {
            expected: dim,
            found: declared,
        });
    }
    let mut row = Vec::with_capacity(dim);
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        row.clear();
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|_| parse_err(n + 1, format!("invalid number {p:?}")))?;
            row.push(v);
        }
        if row.len() != dim {
            return Err(parse_err(
                n + 1,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        if let Some(&ix) = vocab.index.get(token) {
            if ix != UNK_INDEX && !table.pretrained[ix] {
                table.vectors.row_mut(ix).copy_from_slice(&row);
                table.pretrained[ix] = true;
            }
        }
    }
    Ok(table)
}

/// Class names, indexed densely in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn get_or_insert(&mut self, name: &str) -> usize {
        self.get(name).unwrap_or_else(|| {
            self.names.push(name.to_owned());
            self.names.len() - 1
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub docs: Vec<LabeledDocument>,
    pub labels: LabelSet,
    /// Lines dropped because nothing survived preprocessing.
    pub skipped: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Reads `label<TAB>text` lines, assigning label indices by first
/// appearance.
pub fn load_dataset(path: &Path, rules: &PreprocessRules) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, rules, None)
}

/// Like [`load_dataset`] but with a fixed label set; unknown labels are an
/// error.
pub fn load_dataset_with_labels(
    path: &Path,
    rules: &PreprocessRules,
    labels: &LabelSet,
) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, rules, Some(labels))
}

pub fn parse_dataset(
    text: &str,
    path: &Path,
    rules: &PreprocessRules,
    fixed: Option<&LabelSet>,
) -> Result<Dataset> {
    let mut labels = fixed.cloned().unwrap_or_default();
    let mut docs = Vec::new();
    let mut skipped = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message,
        };
        let (name, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("missing tab between label and text".into()))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        let label = match fixed {
            Some(set) => set
                .get(name)
                .ok_or_else(|| parse_err(format!("unknown label {name:?}")))?,
            None => labels.get_or_insert(name),
        };
        match LabeledDocument::new(label, body, rules) {
            Some(doc) => docs.push(doc),
            None => {
                log::warn!(
                    "{}:{}: document empty after preprocessing, skipped",
                    path.display(),
                    n + 1
                );
                skipped += 1;
            }
        }
    }
    Ok(Dataset {
        docs,
        labels,
        skipped,
    })
}

/// A document mapped through a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDocument {
    pub label: usize,
    pub tokens: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
}

impl EncodedDocument {
    pub fn new(doc: &LabeledDocument, vocab: &Vocabulary) -> Self {
        Self {
            label: doc.label,
            tokens: vocab.encode(&doc.tokens),
            sentences: doc.sentences.iter().map(|s| vocab.encode(s)).collect(),
        }
    }
}

pub fn encode_all(docs: &[LabeledDocument], vocab: &Vocabulary) -> Vec<EncodedDocument> {
    docs.iter()
        .map(|d| EncodedDocument::new(d, vocab))
        .collect()
}
