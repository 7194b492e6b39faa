//! Synthetic classification tasks with analytically known Bayes posteriors.
//!
//! Each class draws token sequences from a class-conditional distribution
//! over a shared content vocabulary. Classes own disjoint slices of the
//! vocabulary; an overlap parameter epsilon mixes every class-conditional
//! law with the uniform distribution over all content tokens, so epsilon 0
//! gives disjoint supports and epsilon 1 makes classes indistinguishable.
//! Because the generative parameters are stored, the exact posterior
//! P*(y|x) is computable for any content sequence, which turns calibration
//! measurements into checks against ground truth.

use crate::rng::{derive_seed, seeded};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Reserved special token ids; content ids start at [`Vocab::CONTENT_BASE`].
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

const DATASET_FORMAT: &str = "ebm-calib/dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("epsilon {0} outside [0, 1]")]
    EpsilonRange(f64),
    #[error("invalid task spec: {0}")]
    BadSpec(String),
    #[error("token id {0} is not a content token of this task")]
    NotContentToken(u32),
    #[error("unknown token string {0:?}")]
    UnknownToken(String),
    #[error("sequence impossible under every class")]
    ImpossibleSequence,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unsupported dataset version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

/// Token vocabulary: five reserved specials followed by content tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    strings: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub const CONTENT_BASE: u32 = 5;

    /// Build a vocabulary with `content` content tokens (`w0`, `w1`, ...).
    pub fn new(content: usize) -> Self {
        let mut strings: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>", "<mask>"]
            .iter()
            .map(|s| (*s).to_string())
            .collect();
        strings.extend((0..content).map(|i| format!("w{i}")));
        let lookup = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { strings, lookup }
    }

    pub fn size(&self) -> usize {
        self.strings.len()
    }

    pub fn content_size(&self) -> usize {
        self.strings.len() - Self::CONTENT_BASE as usize
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < Self::CONTENT_BASE
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.strings.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    /// Whitespace tokenization into ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, DataError> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| DataError::UnknownToken(t.to_string())))
            .collect()
    }

    /// Space-joined token strings; unknown ids render as `<unk:id>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map_or_else(|| format!("<unk:{i}>"), str::to_string)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Class-conditional token law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenDist {
    /// Tokens i.i.d. from a per-class unigram distribution.
    Unigram,
    /// First token unigram, then a per-class first-order Markov kernel.
    Markov,
}

/// Complete generative description of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_classes: usize,
    /// Number of content tokens (specials excluded).
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub dist: TokenDist,
    /// Class overlap in [0,1]: 0 disjoint supports, 1 identical laws.
    pub epsilon: f64,
    pub seed: u64,
    pub n_train: usize,
    /// Size of the dev pool, halved into dev and test.
    pub n_dev_pool: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            vocab_size: 64,
            len_min: 8,
            len_max: 16,
            dist: TokenDist::Unigram,
            epsilon: 0.5,
            seed: 0,
            n_train: 2000,
            n_dev_pool: 400,
        }
    }
}

/// Geometric decay rate of the Markov within-slice kernel.
const MARKOV_DECAY: f64 = 0.5;

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(DataError::EpsilonRange(self.epsilon));
        }
        let mut problems = Vec::new();
        if self.n_classes < 2 {
            problems.push("n_classes must be >= 2".to_string());
        }
        if self.n_classes > 0 && self.vocab_size < self.n_classes {
            problems.push("vocab_size must be >= n_classes".to_string());
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            problems.push("need 1 <= len_min <= len_max".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::BadSpec(problems.join("; ")))
        }
    }

    /// Content-index range `[start, end)` of the slice owned by `class`.
    pub fn slice(&self, class: usize) -> (usize, usize) {
        let s = self.vocab_size;
        let c = self.n_classes;
        (class * s / c, (class + 1) * s / c)
    }

    /// Unigram probability of content index `t` under `class`.
    pub fn unigram_prob(&self, class: usize, t: usize) -> f64 {
        let (lo, hi) = self.slice(class);
        let in_slice = if t >= lo && t < hi {
            (1.0 - self.epsilon) / (hi - lo) as f64
        } else {
            0.0
        };
        in_slice + self.epsilon / self.vocab_size as f64
    }

    /// Transition probability P(next | class, prev) over content indices.
    ///
    /// Within the class slice the kernel decays geometrically with cyclic
    /// distance from `prev`; a `prev` outside the slice anchors nothing, so
    /// the within-slice part falls back to uniform over the slice.
    pub fn transition_prob(&self, class: usize, prev: usize, next: usize) -> f64 {
        let (lo, hi) = self.slice(class);
        let m = hi - lo;
        let within = if next < lo || next >= hi {
            0.0
        } else if prev < lo || prev >= hi {
            1.0 / m as f64
        } else {
            let d_raw = (next as i64 - prev as i64).unsigned_abs() as usize;
            let d = d_raw.min(m - d_raw);
            // normalizer: sum over cyclic distances of r^d for a ring of m
            let mut norm = 0.0;
            for q in 0..m {
                let dd_raw = q.abs_diff(prev - lo);
                let dd = dd_raw.min(m - dd_raw);
                norm += MARKOV_DECAY.powi(dd as i32);
            }
            MARKOV_DECAY.powi(d as i32) / norm
        };
        (1.0 - self.epsilon) * within + self.epsilon / self.vocab_size as f64
    }

    /// Log-probability of the content-index sequence under `class`.
    pub fn log_likelihood(&self, class: usize, content_idx: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (i, &t) in content_idx.iter().enumerate() {
            let p = match self.dist {
                TokenDist::Unigram => self.unigram_prob(class, t),
                TokenDist::Markov => {
                    if i == 0 {
                        self.unigram_prob(class, t)
                    } else {
                        self.transition_prob(class, content_idx[i - 1], t)
                    }
                }
            };
            lp += p.ln(); // ln(0) = -inf marks impossible sequences
        }
        lp
    }
}

/// One labeled example; tokens are vocabulary ids of content tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Generated train/dev/test split plus the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

fn sample_index(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last // rounding leftovers land on the final index
}

fn sample_example(spec: &TaskSpec, seed: u64) -> Example {
    let mut rng = seeded(seed);
    let label = rng.gen_range(0..spec.n_classes);
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    let mut content_idx = Vec::with_capacity(len);
    for i in 0..len {
        let t = match spec.dist {
            TokenDist::Unigram => sample_index(
                &mut rng,
                (0..spec.vocab_size).map(|t| spec.unigram_prob(label, t)),
            ),
            TokenDist::Markov => {
                if i == 0 {
                    sample_index(
                        &mut rng,
                        (0..spec.vocab_size).map(|t| spec.unigram_prob(label, t)),
                    )
                } else {
                    let prev = content_idx[i - 1];
                    sample_index(
                        &mut rng,
                        (0..spec.vocab_size).map(|t| spec.transition_prob(label, prev, t)),
                    )
                }
            }
        };
        content_idx.push(t);
    }
    Example {
        tokens: content_idx
            .iter()
            .map(|&t| t as u32 + Vocab::CONTENT_BASE)
            .collect(),
        label,
    }
}

const TAG_TRAIN: u64 = 1;
const TAG_DEV_POOL: u64 = 2;

/// Sample a full split. Pure in (spec): every example derives its own seed
/// from the spec seed and its index, so generation order is irrelevant.
pub fn generate_task(spec: &TaskSpec) -> Result<DatasetSplit, DataError> {
    spec.validate()?;
    let train: Vec<Example> = (0..spec.n_train)
        .map(|i| sample_example(spec, derive_seed(spec.seed, &[TAG_TRAIN, i as u64])))
        .collect();
    let pool: Vec<Example> = (0..spec.n_dev_pool)
        .map(|i| sample_example(spec, derive_seed(spec.seed, &[TAG_DEV_POOL, i as u64])))
        .collect();
    let half = pool.len() / 2;
    let dev = pool[..half].to_vec();
    let test = pool[half..].to_vec();
    Ok(DatasetSplit {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}

/// Exact Bayes posterior P*(y|x) for a sequence of content-token ids,
/// computed in log space with a uniform class prior.
pub fn true_posterior(spec: &TaskSpec, tokens: &[u32]) -> Result<Vec<f64>, DataError> {
    let mut content_idx = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t < Vocab::CONTENT_BASE || (t - Vocab::CONTENT_BASE) as usize >= spec.vocab_size {
            return Err(DataError::NotContentToken(t));
        }
        content_idx.push((t - Vocab::CONTENT_BASE) as usize);
    }
    let logs: Vec<f64> = (0..spec.n_classes)
        .map(|y| spec.log_likelihood(y, &content_idx))
        .collect();
    let z = crate::autodiff::logsumexp_row(&logs);
    if !z.is_finite() {
        return Err(DataError::ImpossibleSequence);
    }
    Ok(logs.iter().map(|&l| (l - z).exp()).collect())
}

/// Write a split as JSONL: a header object, then one object per example in
/// train, dev, test order.
pub fn save_split(path: &Path, split: &DatasetSplit) -> Result<(), DataError> {
    #[derive(Serialize)]
    struct Header<'a> {
        format: &'static str,
        version: u32,
        spec: &'a TaskSpec,
        seed: u64,
        n_train: usize,
        n_dev: usize,
        n_test: usize,
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT,
        version: DATASET_VERSION,
        spec: &split.spec,
        seed: split.spec.seed,
        n_train: split.train.len(),
        n_dev: split.dev.len(),
        n_test: split.test.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json"))?;
    for ex in split.train.iter().chain(&split.dev).chain(&split.test) {
        writeln!(w, "{}", serde_json::to_string(ex).expect("example json"))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a split written by [`save_split`]; errors carry the 1-based line.
pub fn load_split(path: &Path) -> Result<DatasetSplit, DataError> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
        spec: TaskSpec,
        #[allow(dead_code)]
        seed: u64,
        n_train: usize,
        n_dev: usize,
        n_test: usize,
    }
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(DataError::Malformed {
        line: 1,
        msg: "empty file, expected header".to_string(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| DataError::Malformed {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(DataError::Malformed {
            line: 1,
            msg: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != DATASET_VERSION {
        return Err(DataError::Version {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let total = header.n_train + header.n_dev + header.n_test;
    let mut examples = Vec::with_capacity(total);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        examples.push(ex);
    }
    if examples.len() != total {
        return Err(DataError::Malformed {
            line: examples.len() + 2,
            msg: format!("expected {total} examples, found {}", examples.len()),
        });
    }
    let dev_start = header.n_train;
    let test_start = header.n_train + header.n_dev;
    Ok(DatasetSplit {
        spec: header.spec,
        train: examples[..dev_start].to_vec(),
        dev: examples[dev_start..test_start].to_vec(),
        test: examples[test_start..].to_vec(),
    })
}
