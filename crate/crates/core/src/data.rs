//! Tokenization, vocabularies, dataset files and synthetic task generators.
//!
//! File formats:
//!
//! * Classification: one example per line, `<label>\t<text>`, UTF-8, `\n`
//!   line endings. The label is an arbitrary string without tabs; classes get
//!   dense ids in first-seen order.
//! * Span QA: one JSON object per line with fields `context` (string),
//!   `question` (string), `answer_start` and `answer_end` (inclusive token
//!   indices into the tokenized context).
//! * Embeddings: one vector per line, `token v1 … v_d`, whitespace
//!   separated.

use crate::cell::SeedRng;
use crate::error::{contract, Error, Result};
use crate::models::{LabeledExample, SpanExample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on Unicode whitespace. With `split_punct`, ASCII
/// punctuation characters become tokens of their own.
pub fn tokenize(text: &str, split_punct: bool) -> Vec<String> {
    let lower = text.to_lowercase();
    if !split_punct {
        return lower.split_whitespace().map(str::to_string).collect();
    }
    let mut out = Vec::new();
    for word in lower.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Only the reserved PAD and UNK entries.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Tokens in first-seen order.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut v = Self::new();
        for seq in sequences {
            for t in seq {
                v.insert(t);
            }
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(contract("vocabulary must start with <pad>, <unk>"));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(contract("duplicate vocabulary entry"));
        }
        Ok(Self { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A classification example before id mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub label: String,
    pub tokens: Vec<String>,
}

/// A span example before id mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanTextExample {
    pub context: Vec<String>,
    pub question: Vec<String>,
    pub answer_start: usize,
    pub answer_end: usize,
}

/// Label strings mapped to dense ids in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<String>,
}

impl LabelSet {
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out: Vec<String> = Vec::new();
        for l in labels {
            if !out.iter().any(|x| x == l) {
                out.push(l.to_string());
            }
        }
        Self { labels: out }
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn encode_labeled(examples: &[TextExample], vocab: &Vocab, labels: &LabelSet) -> Result<Vec<LabeledExample>> {
    examples
        .iter()
        .map(|e| {
            let label = labels
                .id(&e.label)
                .ok_or_else(|| contract(format!("unknown label {:?}", e.label)))?;
            Ok(LabeledExample {
                label,
                tokens: vocab.encode(&e.tokens),
            })
        })
        .collect()
}

pub fn encode_spans(examples: &[SpanTextExample], vocab: &Vocab) -> Vec<SpanExample> {
    examples
        .iter()
        .map(|e| SpanExample {
            context: vocab.encode(&e.context),
            question: vocab.encode(&e.question),
            start: e.answer_start,
            end: e.answer_end,
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    BufReader::new(f).lines().map(|l| l.map_err(Error::from)).collect()
}

/// Parses `<label>\t<text>` lines. Blank lines are ignored.
pub fn parse_classification_file(path: &Path) -> Result<Vec<TextExample>> {
    parse_classification_str(&std::fs::read_to_string(path)?)
}

pub fn parse_classification_str(text: &str) -> Result<Vec<TextExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            detail: "missing tab between label and text".into(),
        })?;
        let tokens = tokenize(body, false);
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                detail: "empty text".into(),
            });
        }
        out.push(TextExample {
            label: label.to_string(),
            tokens,
        });
    }
    Ok(out)
}

pub fn write_classification_file(path: &Path, examples: &[TextExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        writeln!(f, "{}\t{}", e.label, e.tokens.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SpanLine {
    context: String,
    question: String,
    answer_start: usize,
    answer_end: usize,
}

pub fn parse_span_file(path: &Path) -> Result<Vec<SpanTextExample>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpanLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let context = tokenize(&rec.context, false);
        let question = tokenize(&rec.question, false);
        if context.is_empty() || question.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                detail: "empty context or question".into(),
            });
        }
        if rec.answer_start > rec.answer_end || rec.answer_end >= context.len() {
            return Err(Error::Parse {
                line: line_no,
                detail: format!(
                    "answer [{}, {}] outside context of {} tokens",
                    rec.answer_start,
                    rec.answer_end,
                    context.len()
                ),
            });
        }
        out.push(SpanTextExample {
            context,
            question,
            answer_start: rec.answer_start,
            answer_end: rec.answer_end,
        });
    }
    Ok(out)
}

pub fn write_span_file(path: &Path, examples: &[SpanTextExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        let line = SpanLine {
            context: e.context.join(" "),
            question: e.question.join(" "),
            answer_start: e.answer_start,
            answer_end: e.answer_end,
        };
        writeln!(f, "{}", serde_json::to_string(&line)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Embedding table for `vocab`: rows found in the file are copied, others
/// are drawn from `N(0, 0.1²)` with `seed`, and the PAD row is zero.
pub fn load_embeddings(path: &Path, vocab: &Vocab, d_in: usize, seed: u64) -> Result<Tensor> {
    load_embeddings_str(&std::fs::read_to_string(path)?, vocab, d_in, seed)
}

pub fn load_embeddings_str(text: &str, vocab: &Vocab, d_in: usize, seed: u64) -> Result<Tensor> {
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    detail: format!("bad float {p:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d_in {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected {d_in} values, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id != UNK || token == UNK_TOKEN {
            found.entry(id).or_insert(values);
        }
    }
    let mut rng = SeedRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut data = Vec::with_capacity(vocab.len() * d_in);
    for id in 0..vocab.len() {
        // Always draw, so a row's random values do not depend on which
        // other tokens the file happens to contain.
        let random: Vec<f64> = (0..d_in).map(|_| normal.sample(&mut rng)).collect();
        if id == PAD {
            data.extend(std::iter::repeat_n(0.0, d_in));
        } else if let Some(v) = found.get(&id) {
            data.extend_from_slice(v);
        } else {
            data.extend(random);
        }
    }
    Tensor::matrix(vocab.len(), d_in, data)
}

pub fn keyword_token(j: usize) -> String {
    format!("key{j}")
}

pub fn filler_token(i: usize) -> String {
    format!("w{i}")
}

/// Keyword task: `len − 1` uniformly drawn filler tokens with one keyword
/// inserted at a uniform position; the label is the keyword's index.
/// Fillers use `vocab_size − n_keywords` distinct tokens.
pub fn gen_keyword_task(seed: u64, n_examples: usize, len: usize, vocab_size: usize, n_keywords: usize) -> Result<Vec<TextExample>> {
    if n_keywords < 2 {
        return Err(contract("keyword task needs at least 2 keywords"));
    }
    if len < 4 {
        return Err(contract("keyword task needs sequences of at least 4 tokens"));
    }
    if vocab_size <= n_keywords {
        return Err(contract(format!(
            "vocab_size {vocab_size} must exceed n_keywords {n_keywords}"
        )));
    }
    let n_fillers = vocab_size - n_keywords;
    let mut rng = SeedRng::seed_from_u64(seed);
    Ok((0..n_examples)
        .map(|_| {
            let key = rng.random_range(0..n_keywords);
            let pos = rng.random_range(0..len);
            let tokens = (0..len)
                .map(|t| {
                    if t == pos {
                        keyword_token(key)
                    } else {
                        filler_token(rng.random_range(0..n_fillers))
                    }
                })
                .collect();
            TextExample {
                label: key.to_string(),
                tokens,
            }
        })
        .collect())
}

pub const SPAN_MARKER: &str = "mark";

pub fn span_key_token(j: usize) -> String {
    format!("q{j}")
}

/// The two answer tokens belonging to key `j`.
pub fn span_answer_tokens(j: usize) -> [String; 2] {
    [format!("a{}", 2 * j), format!("a{}", 2 * j + 1)]
}

/// Span task. The question is one key token `q_j`. The context holds the
/// marker followed by key `j`'s two answer tokens, plus one distractor
/// block (marker and another key's answer) elsewhere; the remaining
/// positions are fillers. The gold span is the answer block of `q_j`.
pub fn gen_span_task(
    seed: u64,
    n_examples: usize,
    context_len: usize,
    vocab_size: usize,
    n_keys: usize,
) -> Result<Vec<SpanTextExample>> {
    if context_len < 8 {
        return Err(contract("span task needs contexts of at least 8 tokens"));
    }
    if n_keys < 2 {
        return Err(contract("span task needs at least 2 keys"));
    }
    let reserved = 1 + 3 * n_keys;
    if vocab_size <= reserved {
        return Err(contract(format!(
            "vocab_size {vocab_size} must exceed {reserved} (marker, keys, answers)"
        )));
    }
    let n_fillers = vocab_size - reserved;
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let key = rng.random_range(0..n_keys);
        let mut other = rng.random_range(0..n_keys - 1);
        if other >= key {
            other += 1;
        }
        // Two non-overlapping 3-token blocks.
        let slots = context_len / 3;
        let mut blocks: Vec<usize> = (0..slots).collect();
        blocks.shuffle(&mut rng);
        let spare = context_len - 3 * slots;
        let shift = rng.random_range(0..=spare);
        let (gold_at, distract_at) = (3 * blocks[0] + shift, 3 * blocks[1] + shift);
        let mut context: Vec<String> = (0..context_len)
            .map(|_| format!("f{}", rng.random_range(0..n_fillers)))
            .collect();
        for (at, k) in [(gold_at, key), (distract_at, other)] {
            let [a0, a1] = span_answer_tokens(k);
            context[at] = SPAN_MARKER.to_string();
            context[at + 1] = a0;
            context[at + 2] = a1;
        }
        out.push(SpanTextExample {
            context,
            question: vec![span_key_token(key)],
            answer_start: gold_at + 1,
            answer_end: gold_at + 2,
        });
    }
    Ok(out)
}

/// Applies the generating rule: find the marker followed by the question
/// key's answer tokens.
pub fn solve_span_by_rule(example: &SpanTextExample) -> Option<(usize, usize)> {
    let key: usize = example.question.first()?.strip_prefix('q')?.parse().ok()?;
    let [a0, a1] = span_answer_tokens(key);
    let c = &example.context;
    (0..c.len().saturating_sub(2))
        .find(|&i| c[i] == SPAN_MARKER && c[i + 1] == a0 && c[i + 2] == a1)
        .map(|i| (i + 1, i + 2))
}
