//! Autoregressive noise language model with masked-completion finetuning.
//!
//! The noise distribution P_N is a small decoder-only transformer trained to
//! reconstruct a full input sentence x from a masked copy x^m, serialized as
//! `BOS x^m SEP x EOS` with the loss on the x segment plus the terminating
//! EOS (termination must be learned for generation to stop). Noise samples
//! are drawn by masking a training input, conditioning on `BOS x^m SEP`, and
//! sampling the completion token-by-token with top-k renormalized sampling.
//!
//! Two forward paths exist: the tape path used for training, and an
//! incremental KV-cached path used for scoring and generation. Both apply
//! the same kernel calls in the same order, so they agree to around 1e-14.

use crate::autodiff::kernels;
use crate::autodiff::{logsumexp_row, softmax_row, AdamConfig, Tape, TensorId};
use crate::data::{Vocab, BOS, EOS, MASK, SEP};
use crate::model::{CoreConfig, Dropout, ModelError, ParamSet, Staged};
use crate::rng::{derive_seed, seeded};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("mask ratio {0} outside [0, 1]")]
    MaskRatio(f64),
    #[error("top-k {k} outside [1, {vocab}]")]
    BadK { k: usize, vocab: usize },
    #[error("sequence needs {needed} positions, model has {max}")]
    Overlong { needed: usize, max: usize },
    #[error("special token {0} in raw input")]
    SpecialInInput(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

impl From<crate::autodiff::TensorError> for NoiseError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}

/// Independent per-token masking policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_ratio: f64,
    pub mask_token_id: u32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            mask_token_id: MASK,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(NoiseError::MaskRatio(self.mask_ratio));
        }
        Ok(())
    }
}

/// Replace each token independently with the mask id, probability M.
pub fn mask_input(x: &[u32], spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    x.iter()
        .map(|&t| {
            if rng.gen::<f64>() < spec.mask_ratio {
                spec.mask_token_id
            } else {
                t
            }
        })
        .collect()
}

/// One generated noise sequence with its sampling log-probabilities, both
/// over the payload tokens only (the EOS decision contributes no factor, so
/// scores are comparable whether generation stopped by EOS or length cap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub source_index: usize,
    pub tokens: Vec<u32>,
    /// Sum of log renormalized top-k probabilities of the chosen tokens.
    pub log_prob: f64,
    /// Sum of log full-softmax probabilities of the chosen tokens; this is
    /// the untruncated log P_N(x) used by the general-form NCE loss.
    pub log_prob_full: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLmConfig {
    /// Total token-id space (specials included).
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for NoiseLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 69,
            max_seq_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 2,
            dropout: 0.1,
        }
    }
}

/// Training schedule for [`finetune_mlm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the corpus held out for perplexity tracking.
    pub holdout_frac: f64,
}

impl Default for LmSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            holdout_frac: 0.1,
        }
    }
}

/// Decoder-only transformer over the full token-id space.
pub struct NoiseLm {
    pub cfg: NoiseLmConfig,
    pub core: CoreConfig,
    pub params: ParamSet,
}

/// Resolved weight slices for the incremental path.
struct LmW<'a> {
    tok: &'a [f64],
    pos: &'a [f64],
    layers: Vec<LayerW<'a>>,
    lnf_g: &'a [f64],
    lnf_b: &'a [f64],
    out_w: &'a [f64],
    out_b: &'a [f64],
}

struct LayerW<'a> {
    ln1_g: &'a [f64],
    ln1_b: &'a [f64],
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    ln2_g: &'a [f64],
    ln2_b: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Cached keys and values per layer for incremental decoding.
pub struct LmCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

impl LmCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Layer norm matching the tape op's arithmetic exactly.
fn ln_row(row: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv_std = 1.0 / (var + 1e-5).sqrt();
    for j in 0..row.len() {
        out[j] = gamma[j] * ((row[j] - mean) * inv_std) + beta[j];
    }
}

impl NoiseLm {
    pub fn new(cfg: NoiseLmConfig, seed: u64) -> Self {
        let core = CoreConfig {
            prefix: "lm".into(),
            n_embed_rows: cfg.vocab_size,
            max_positions: cfg.max_seq_len,
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            ff_mult: cfg.ff_mult,
        };
        let mut params = ParamSet::new();
        core.register(&mut params, seed);
        params.add_glorot("lm.out.w", cfg.d_model, cfg.vocab_size, seed);
        params.add_zeros("lm.out.b", &[cfg.vocab_size]);
        Self { cfg, core, params }
    }

    fn check_ids(&self, seq: &[u32]) -> Result<(), NoiseError> {
        for &t in seq {
            if (t as usize) >= self.cfg.vocab_size {
                return Err(ModelError::OutOfVocab {
                    id: t,
                    vocab: self.cfg.vocab_size,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Tape path: logits at every position of `seq`, shape `[len, vocab]`.
    pub fn logits_all_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        seq: &[u32],
        drop: &mut Dropout,
    ) -> Result<TensorId, NoiseError> {
        self.check_ids(seq)?;
        if seq.is_empty() || seq.len() > self.cfg.max_seq_len {
            return Err(NoiseError::Overlong {
                needed: seq.len(),
                max: self.cfg.max_seq_len,
            });
        }
        let rows: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let emb = self.core.embed(tape, &self.params, st, &rows)?;
        let h = self.core.forward(tape, &self.params, st, emb, true, drop)?;
        let m = tape.matmul(h, st.id(&self.params, "lm.out.w"))?;
        Ok(tape.add_bias(m, st.id(&self.params, "lm.out.b"))?)
    }

    fn weights(&self) -> LmW<'_> {
        let p = &self.params;
        let layers = (0..self.cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("lm.l{l}.{s}");
                LayerW {
                    ln1_g: p.data(&n("ln1.g")),
                    ln1_b: p.data(&n("ln1.b")),
                    wq: p.data(&n("wq")),
                    bq: p.data(&n("bq")),
                    wk: p.data(&n("wk")),
                    bk: p.data(&n("bk")),
                    wv: p.data(&n("wv")),
                    bv: p.data(&n("bv")),
                    wo: p.data(&n("wo")),
                    bo: p.data(&n("bo")),
                    ln2_g: p.data(&n("ln2.g")),
                    ln2_b: p.data(&n("ln2.b")),
                    w1: p.data(&n("w1")),
                    b1: p.data(&n("b1")),
                    w2: p.data(&n("w2")),
                    b2: p.data(&n("b2")),
                }
            })
            .collect();
        LmW {
            tok: p.data("lm.tok_emb"),
            pos: p.data("lm.pos_emb"),
            layers,
            lnf_g: p.data("lm.lnf.g"),
            lnf_b: p.data("lm.lnf.b"),
            out_w: p.data("lm.out.w"),
            out_b: p.data("lm.out.b"),
        }
    }

    pub fn start_cache(&self) -> LmCache {
        LmCache {
            layers: vec![(Vec::new(), Vec::new()); self.cfg.n_layers],
            len: 0,
        }
    }

    /// Consume one token at the next position and return the logits for the
    /// following token. Mirrors the tape forward op-for-op.
    fn eval_step(&self, w: &LmW, cache: &mut LmCache, token: u32) -> Vec<f64> {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let pos = cache.len;
        debug_assert!(pos < self.cfg.max_seq_len, "cache overflow");
        let t = token as usize;

        let mut x: Vec<f64> = (0..d)
            .map(|j| w.tok[t * d + j] + w.pos[pos * d + j])
            .collect();
        let mut h = vec![0.0; d];
        for (l, lw) in w.layers.iter().enumerate() {
            ln_row(&x, lw.ln1_g, lw.ln1_b, &mut h);

            let mut q = vec![0.0; d];
            kernels::mm_nn(&h, lw.wq, 1, d, d, &mut q);
            for j in 0..d {
                q[j] += lw.bq[j];
            }
            let mut k = vec![0.0; d];
            kernels::mm_nn(&h, lw.wk, 1, d, d, &mut k);
            for j in 0..d {
                k[j] += lw.bk[j];
            }
            let mut v = vec![0.0; d];
            kernels::mm_nn(&h, lw.wv, 1, d, d, &mut v);
            for j in 0..d {
                v[j] += lw.bv[j];
            }
            let (kc, vc) = &mut cache.layers[l];
            kc.extend_from_slice(&k);
            vc.extend_from_slice(&v);
            let steps = pos + 1;

            let scale = 1.0 / (dh as f64).sqrt();
            let mut cat = vec![0.0; d];
            let mut scores = Vec::with_capacity(steps);
            let mut probs = vec![0.0; steps];
            for hd in 0..nh {
                let off = hd * dh;
                scores.clear();
                for s in 0..steps {
                    let krow = &kc[s * d + off..s * d + off + dh];
                    let qrow = &q[off..off + dh];
                    scores.push(qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                softmax_row(&scores, &mut probs[..steps]);
                // accumulate over cached positions in row order, matching
                // the tape's matmul accumulation order
                for (s, &p) in probs[..steps].iter().enumerate() {
                    let vrow = &vc[s * d + off..s * d + off + dh];
                    for j in 0..dh {
                        cat[off + j] += p * vrow[j];
                    }
                }
            }
            let mut proj = vec![0.0; d];
            kernels::mm_nn(&cat, lw.wo, 1, d, d, &mut proj);
            for j in 0..d {
                x[j] += proj[j] + lw.bo[j];
            }

            ln_row(&x, lw.ln2_g, lw.ln2_b, &mut h);
            let ffd = d * self.cfg.ff_mult;
            let mut f1 = vec![0.0; ffd];
            kernels::mm_nn(&h, lw.w1, 1, d, ffd, &mut f1);
            for j in 0..ffd {
                f1[j] = kernels::gelu(f1[j] + lw.b1[j]);
            }
            let mut f2 = vec![0.0; d];
            kernels::mm_nn(&f1, lw.w2, 1, ffd, d, &mut f2);
            for j in 0..d {
                x[j] += f2[j] + lw.b2[j];
            }
        }
        ln_row(&x, w.lnf_g, w.lnf_b, &mut h);
        let vsz = self.cfg.vocab_size;
        let mut logits = vec![0.0; vsz];
        kernels::mm_nn(&h, w.out_w, 1, d, vsz, &mut logits);
        for j in 0..vsz {
            logits[j] += w.out_b[j];
        }
        cache.len += 1;
        logits
    }

    fn prefix_of(xm: &[u32]) -> Vec<u32> {
        let mut p = Vec::with_capacity(xm.len() + 2);
        p.push(BOS);
        p.extend_from_slice(xm);
        p.push(SEP);
        p
    }

    fn check_budget(&self, needed: usize) -> Result<(), NoiseError> {
        if needed > self.cfg.max_seq_len {
            return Err(NoiseError::Overlong {
                needed,
                max: self.cfg.max_seq_len,
            });
        }
        Ok(())
    }

    /// Teacher-forced full-softmax log-probability of `x` given `BOS x^m SEP`.
    pub fn score_log_prob(&self, xm: &[u32], x: &[u32]) -> Result<f64, NoiseError> {
        self.scored(xm, x, None)
    }

    /// Teacher-forced log-probability under top-k renormalized sampling;
    /// tokens falling outside the top-k score negative infinity.
    pub fn score_log_prob_topk(&self, xm: &[u32], x: &[u32], k: usize) -> Result<f64, NoiseError> {
        self.check_k(k)?;
        self.scored(xm, x, Some(k))
    }

    fn scored(&self, xm: &[u32], x: &[u32], top_k: Option<usize>) -> Result<f64, NoiseError> {
        let prefix = Self::prefix_of(xm);
        self.check_ids(&prefix)?;
        self.check_ids(x)?;
        self.check_budget(prefix.len() + x.len())?;
        let w = self.weights();
        let mut cache = self.start_cache();
        for &t in &prefix[..prefix.len() - 1] {
            let _ = self.eval_step(&w, &mut cache, t);
        }
        let mut cur = *prefix.last().expect("prefix nonempty");
        let mut lp = 0.0;
        for (i, &target) in x.iter().enumerate() {
            let logits = self.eval_step(&w, &mut cache, cur);
            match top_k {
                None => {
                    let lse = logsumexp_row(&logits);
                    lp += logits[target as usize] - lse;
                }
                Some(k) => {
                    let pool = self.topk_pool(&logits, k, i == 0);
                    match pool.iter().position(|&(id, _)| id == target) {
                        Some(pi) => {
                            let pool_logits: Vec<f64> =
                                pool.iter().map(|&(_, lg)| lg).collect();
                            let lse = logsumexp_row(&pool_logits);
                            lp += pool_logits[pi] - lse;
                        }
                        None => return Ok(f64::NEG_INFINITY),
                    }
                }
            }
            cur = target;
        }
        Ok(lp)
    }

    fn check_k(&self, k: usize) -> Result<(), NoiseError> {
        if k < 1 || k > self.cfg.vocab_size {
            return Err(NoiseError::BadK {
                k,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Candidate pool for one sampling step: content tokens plus EOS (EOS
    /// excluded at the first step so payloads are nonempty), reduced to the
    /// top-k by logit with ties broken by id.
    fn topk_pool(&self, logits: &[f64], k: usize, first_step: bool) -> Vec<(u32, f64)> {
        let mut cands: Vec<(u32, f64)> = (Vocab::CONTENT_BASE as usize..self.cfg.vocab_size)
            .map(|i| (i as u32, logits[i]))
            .collect();
        if !first_step {
            cands.push((EOS, logits[EOS as usize]));
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        cands
    }

    /// Mask `x`, condition on `BOS x^m SEP`, and sample a completion.
    pub fn generate_noise(
        &self,
        x: &[u32],
        source_index: usize,
        mask: &MaskSpec,
        k: usize,
        seed: u64,
    ) -> Result<NoiseSample, NoiseError> {
        mask.validate()?;
        self.check_k(k)?;
        for &t in x {
            if t < Vocab::CONTENT_BASE {
                return Err(NoiseError::SpecialInInput(t));
            }
        }
        let mut rng = seeded(seed);
        let xm = mask_input(x, mask, &mut rng);
        let prefix = Self::prefix_of(&xm);
        self.check_ids(&prefix)?;
        let max_new = 2 * x.len();
        self.check_budget(prefix.len() + max_new)?;

        let w = self.weights();
        let mut cache = self.start_cache();
        for &t in &prefix[..prefix.len() - 1] {
            let _ = self.eval_step(&w, &mut cache, t);
        }
        let mut cur = *prefix.last().expect("prefix nonempty");
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut log_prob_full = 0.0;
        for i in 0..max_new {
            let logits = self.eval_step(&w, &mut cache, cur);
            let pool = self.topk_pool(&logits, k, i == 0);
            let chosen = if pool.len() == 1 {
                0
            } else {
                let pool_logits: Vec<f64> = pool.iter().map(|&(_, lg)| lg).collect();
                let mut probs = vec![0.0; pool_logits.len()];
                softmax_row(&pool_logits, &mut probs);
                sample_from(&mut rng, &probs)
            };
            let (tok, _) = pool[chosen];
            if tok == EOS {
                break;
            }
            let pool_logits: Vec<f64> = pool.iter().map(|&(_, lg)| lg).collect();
            let pool_lse = logsumexp_row(&pool_logits);
            log_prob += pool_logits[chosen] - pool_lse;
            log_prob_full += logits[tok as usize] - logsumexp_row(&logits);
            tokens.push(tok);
            cur = tok;
        }
        Ok(NoiseSample {
            source_index,
            tokens,
            log_prob,
            log_prob_full,
            seed,
        })
    }
}

fn sample_from(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Teacher-forced training sequence `BOS x^m SEP x EOS` plus the index of
/// the first position whose prediction is scored (the SEP position, which
/// predicts the first x token).
fn training_sequence(x: &[u32], xm: &[u32]) -> (Vec<u32>, usize) {
    let mut seq = Vec::with_capacity(2 * x.len() + 3);
    seq.push(BOS);
    seq.extend_from_slice(xm);
    seq.push(SEP);
    let first_scored = seq.len() - 1;
    seq.extend_from_slice(x);
    seq.push(EOS);
    (seq, first_scored)
}

const TAG_SHUFFLE: u64 = 0x51;
const TAG_MASK: u64 = 0x52;
const TAG_HOLDOUT_MASK: u64 = 0x53;

/// Finetune on masked-completion pairs; returns per-epoch held-out
/// perplexity (index 0 is the pre-training perplexity).
pub fn finetune_mlm(
    lm: &mut NoiseLm,
    corpus: &[Vec<u32>],
    mask: &MaskSpec,
    schedule: &LmSchedule,
) -> Result<Vec<f64>, NoiseError> {
    if corpus.is_empty() {
        return Err(NoiseError::EmptyCorpus);
    }
    mask.validate()?;
    let n_hold = ((corpus.len() as f64 * schedule.holdout_frac).ceil() as usize)
        .clamp(1, corpus.len().saturating_sub(1).max(1));
    let (train, held) = corpus.split_at(corpus.len() - n_hold);
    let train = if train.is_empty() { held } else { train };

    // fixed masks on the held-out set so perplexity moves only with weights
    let held_masked: Vec<(Vec<u32>, &Vec<u32>)> = held
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = seeded(derive_seed(schedule.seed, &[TAG_HOLDOUT_MASK, i as u64]));
            (mask_input(x, mask, &mut rng), x)
        })
        .collect();

    let mut ppls = vec![heldout_perplexity(lm, &held_masked)?];
    let adam = AdamConfig::with_lr(schedule.lr);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..schedule.epochs {
        let mut shuffle_rng = seeded(derive_seed(schedule.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(schedule.batch_size) {
            tape.clear();
            let st = lm.params.stage(&mut tape)?;
            let mut drop = Dropout::train(
                lm.cfg.dropout,
                derive_seed(schedule.seed, &[epoch as u64, chunk[0] as u64]),
            );
            let mut per_ex = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let x = &train[idx];
                let mut mrng = seeded(derive_seed(
                    schedule.seed,
                    &[TAG_MASK, epoch as u64, idx as u64],
                ));
                let xm = mask_input(x, mask, &mut mrng);
                let (seq, first) = training_sequence(x, &xm);
                per_ex.push(sequence_ce_t(lm, &mut tape, &st, &seq, first, &mut drop)?);
            }
            let stacked = tape.stack_scalars(&per_ex)?;
            let loss = tape.mean_all(stacked)?;
            tape.backward(loss)?;
            lm.params.apply_grads(&tape, &st, &adam);
        }
        ppls.push(heldout_perplexity(lm, &held_masked)?);
    }
    Ok(ppls)
}

/// Mean cross-entropy of predictions from `first_scored` onward, as a `[1]`
/// tape tensor: positions `first..len-1` predict tokens `first+1..len`.
fn sequence_ce_t(
    lm: &NoiseLm,
    tape: &mut Tape,
    st: &Staged,
    seq: &[u32],
    first_scored: usize,
    drop: &mut Dropout,
) -> Result<TensorId, NoiseError> {
    let logits = lm.logits_all_t(tape, st, &seq[..seq.len() - 1], drop)?;
    let lse = tape.logsumexp_last(logits)?;
    let vsz = lm.cfg.vocab_size;
    let mut terms = Vec::with_capacity(seq.len() - 1 - first_scored);
    for pos in first_scored..seq.len() - 1 {
        let target = seq[pos + 1] as usize;
        let l = tape.pick(lse, pos)?;
        let p = tape.pick(logits, pos * vsz + target)?;
        terms.push(tape.sub(l, p)?);
    }
    let stacked = tape.stack_scalars(&terms)?;
    Ok(tape.mean_all(stacked)?)
}

/// Token-level perplexity of the x-segment (plus EOS) predictions.
fn heldout_perplexity(
    lm: &NoiseLm,
    held_masked: &[(Vec<u32>, &Vec<u32>)],
) -> Result<f64, NoiseError> {
    let w = lm.weights();
    let mut nll = 0.0;
    let mut count = 0usize;
    for (xm, x) in held_masked {
        let (seq, first) = training_sequence(x, xm);
        lm.check_ids(&seq)?;
        lm.check_budget(seq.len())?;
        let mut cache = lm.start_cache();
        for t in 0..first {
            let _ = lm.eval_step(&w, &mut cache, seq[t]);
        }
        for pos in first..seq.len() - 1 {
            let logits = lm.eval_step(&w, &mut cache, seq[pos]);
            let lse = logsumexp_row(&logits);
            nll += lse - logits[seq[pos + 1] as usize];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Write noise samples as JSONL in slice order.
pub fn save_noise_cache(path: &Path, samples: &[NoiseSample]) -> Result<(), NoiseError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(s).expect("sample json"))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a noise cache; errors carry the 1-based line.
pub fn load_noise_cache(path: &Path) -> Result<Vec<NoiseSample>, NoiseError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| NoiseError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dropout;

    fn tiny_lm(vocab: usize, seed: u64) -> NoiseLm {
        NoiseLm::new(
            NoiseLmConfig {
                vocab_size: vocab,
                max_seq_len: 40,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                ff_mult: 2,
                dropout: 0.0,
            },
            seed,
        )
    }

    #[test]
    fn mask_fraction_concentrates() {
        let spec = MaskSpec::default();
        let x = vec![7u32; 100_000];
        let mut rng = seeded(404);
        let xm = mask_input(&x, &spec, &mut rng);
        assert_eq!(xm.len(), x.len());
        let frac = xm.iter().filter(|&&t| t == MASK).count() as f64 / 1e5;
        assert!((frac - 0.4).abs() < 0.01, "masked fraction {frac}");
        for (&a, &b) in x.iter().zip(&xm) {
            assert!(b == a || b == MASK);
        }

        let none = MaskSpec {
            mask_ratio: 0.0,
            ..spec
        };
        assert_eq!(mask_input(&x[..50], &none, &mut rng), &x[..50]);
        let all = MaskSpec {
            mask_ratio: 1.0,
            ..spec
        };
        assert!(mask_input(&x[..50], &all, &mut rng).iter().all(|&t| t == MASK));
    }

    #[test]
    fn incremental_path_matches_tape_path() {
        let lm = tiny_lm(12, 3);
        let seq: Vec<u32> = vec![BOS, 7, MASK, 9, SEP, 7, 8, 9, EOS, 5, 11, 6];
        let mut tape = Tape::new();
        let st = lm.params.stage(&mut tape).unwrap();
        let all = lm
            .logits_all_t(&mut tape, &st, &seq, &mut Dropout::Off)
            .unwrap();
        let tape_logits = tape.data(all).to_vec();

        let w = lm.weights();
        let mut cache = lm.start_cache();
        for (pos, &t) in seq.iter().enumerate() {
            let inc = lm.eval_step(&w, &mut cache, t);
            for j in 0..12 {
                let a = tape_logits[pos * 12 + j];
                let b = inc[j];
                assert!(
                    (a - b).abs() < 1e-12,
                    "pos {pos} vocab {j}: tape {a} vs incremental {b}"
                );
            }
        }
    }

    #[test]
    fn causality_perturbation() {
        let lm = tiny_lm(12, 5);
        let base: Vec<u32> = vec![BOS, 6, 7, 8, 9, 10];
        let run = |seq: &[u32]| {
            let mut tape = Tape::new();
            let st = lm.params.stage(&mut tape).unwrap();
            let id = lm
                .logits_all_t(&mut tape, &st, seq, &mut Dropout::Off)
                .unwrap();
            tape.data(id).to_vec()
        };
        let a = run(&base);
        for t in 1..base.len() {
            let mut perturbed = base.clone();
            perturbed[t] = 11;
            let b = run(&perturbed);
            // logits strictly before the perturbed position are unchanged
            for pos in 0..t {
                for j in 0..12 {
                    assert_eq!(
                        a[pos * 12 + j],
                        b[pos * 12 + j],
                        "perturbing {t} leaked into position {pos}"
                    );
                }
            }
            // the perturbed position itself must change somewhere
            assert!((0..12).any(|j| a[t * 12 + j] != b[t * 12 + j]));
        }
    }

    #[test]
    fn uniform_lm_scores_are_exact() {
        let mut lm = tiny_lm(10, 6);
        lm.params.data_mut("lm.out.w").fill(0.0);
        lm.params.data_mut("lm.out.b").fill(0.0);
        let xm = [MASK, 6, MASK];
        let x = [5u32, 6, 7];
        let lp = lm.score_log_prob(&xm, &x).unwrap();
        // each factor is exactly -ln 10
        let expect = -(10.0f64.ln()) - 10.0f64.ln() - 10.0f64.ln();
        assert_eq!(lp, expect);
        assert!((lp - (-3.0 * 10.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn score_is_monotone_in_length() {
        let lm = tiny_lm(12, 7);
        let xm = [5u32, MASK, 7];
        let mut prev = 0.0;
        for n in 1..6 {
            let x: Vec<u32> = (0..n).map(|i| 5 + (i as u32 % 7)).collect();
            let lp = lm.score_log_prob(&xm, &x).unwrap();
            assert!(lp <= prev + 1e-12, "lengthening increased log prob");
            prev = lp;
        }
    }

    #[test]
    fn score_matches_stepwise_recomposition() {
        // independent chain-rule recomposition with its own softmax code
        let lm = tiny_lm(12, 8);
        let xm = [5u32, MASK];
        let x = [6u32, 9, 11];
        let got = lm.score_log_prob(&xm, &x).unwrap();

        let w = lm.weights();
        let mut manual = 0.0;
        let mut consumed: Vec<u32> = vec![BOS, 5, MASK, SEP];
        for (i, &target) in x.iter().enumerate() {
            let mut cache = lm.start_cache();
            let mut logits = Vec::new();
            for &t in &consumed {
                logits = lm.eval_step(&w, &mut cache, t);
            }
            // plain softmax without max subtraction
            let denom: f64 = logits.iter().map(|&l| l.exp()).sum();
            manual += (logits[target as usize].exp() / denom).ln();
            consumed.push(target);
            let _ = i;
        }
        assert!((got - manual).abs() < 1e-10, "{got} vs {manual}");
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let lm = tiny_lm(12, 9);
        let x = [6u32, 7, 8, 9];
        let mask = MaskSpec {
            mask_ratio: 0.0,
            ..MaskSpec::default()
        };
        let a = lm.generate_noise(&x, 0, &mask, 1, 111).unwrap();
        let b = lm.generate_noise(&x, 0, &mask, 1, 999).unwrap();
        assert_eq!(a.tokens, b.tokens, "k=1 must ignore the seed");
        assert_eq!(a.log_prob, 0.0, "single-candidate pool has probability 1");
        assert!(!a.tokens.is_empty());
    }

    #[test]
    fn generation_respects_payload_contract() {
        let lm = tiny_lm(12, 10);
        let x = [5u32, 6, 7, 8, 9];
        for seed in 0..30 {
            let s = lm
                .generate_noise(&x, 3, &MaskSpec::default(), 5, seed)
                .unwrap();
            assert!(!s.tokens.is_empty());
            assert!(s.tokens.len() <= 2 * x.len());
            assert!(s.tokens.iter().all(|&t| t >= Vocab::CONTENT_BASE));
            assert!(s.log_prob <= 1e-12);
            assert!(s.log_prob_full <= 0.0);
            assert!(s.log_prob >= s.log_prob_full - 1e-9, "renormalized >= full");
            assert_eq!(s.source_index, 3);
        }
    }

    #[test]
    fn generation_log_probs_match_scorers() {
        let lm = tiny_lm(12, 11);
        let x = [5u32, 6, 7, 8];
        let mask = MaskSpec {
            mask_ratio: 0.0,
            ..MaskSpec::default()
        };
        for seed in 0..10 {
            let k = 4;
            let s = lm.generate_noise(&x, 0, &mask, k, seed).unwrap();
            // mask_ratio 0 makes the conditioning prefix exactly x
            let full = lm.score_log_prob(&x, &s.tokens).unwrap();
            assert!(
                (s.log_prob_full - full).abs() < 1e-10,
                "full: {} vs {}",
                s.log_prob_full,
                full
            );
            let topk = lm.score_log_prob_topk(&x, &s.tokens, k).unwrap();
            assert!(
                (s.log_prob - topk).abs() < 1e-10,
                "topk: {} vs {}",
                s.log_prob,
                topk
            );
        }
    }

    #[test]
    fn bad_k_rejected() {
        let lm = tiny_lm(12, 12);
        let x = [5u32, 6];
        assert!(matches!(
            lm.generate_noise(&x, 0, &MaskSpec::default(), 0, 1),
            Err(NoiseError::BadK { .. })
        ));
        assert!(matches!(
            lm.generate_noise(&x, 0, &MaskSpec::default(), 13, 1),
            Err(NoiseError::BadK { .. })
        ));
        assert!(lm.generate_noise(&x, 0, &MaskSpec::default(), 12, 1).is_ok());
    }

    #[test]
    fn uniform_lm_sampling_is_uniform_over_content() {
        // zeroed head: all candidates tied; k = full vocab keeps the whole
        // pool so the tie-break never excludes anyone
        let mut lm = tiny_lm(13, 13);
        lm.params.data_mut("lm.out.w").fill(0.0);
        lm.params.data_mut("lm.out.b").fill(0.0);
        let x = [5u32, 6, 7, 8, 9, 10];
        let mut counts = vec![0usize; 13];
        let mut total = 0usize;
        let mut seed = 0;
        while total < 100_000 {
            let s = lm
                .generate_noise(&x, 0, &MaskSpec::default(), 13, seed)
                .unwrap();
            for &t in &s.tokens {
                counts[t as usize] += 1;
                total += 1;
            }
            seed += 1;
        }
        // chi-square against uniform over the 8 content tokens
        let content: Vec<usize> = (5..13).map(|i| counts[i]).collect();
        let n: usize = content.iter().sum();
        let expected = n as f64 / 8.0;
        let chi2: f64 = content
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 7 degrees of freedom, alpha = 0.01 critical value
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts {content:?}");
        for i in 0..5 {
            assert_eq!(counts[i], 0, "special token {i} sampled");
        }
    }

    #[test]
    fn finetuning_reduces_heldout_perplexity() {
        let corpus: Vec<Vec<u32>> = (0..60)
            .map(|i| {
                let base = 5 + (i % 4) as u32;
                vec![base, base + 1, base + 2, base, base + 1, base + 2]
            })
            .collect();
        let mut lm = tiny_lm(12, 14);
        let sched = LmSchedule {
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            seed: 5,
            holdout_frac: 0.15,
        };
        let ppls = finetune_mlm(&mut lm, &corpus, &MaskSpec::default(), &sched).unwrap();
        assert_eq!(ppls.len(), 4);
        assert!(
            ppls.last().unwrap() < &ppls[0],
            "held-out perplexity should drop: {ppls:?}"
        );
    }

    #[test]
    fn zeroed_head_loss_is_log_vocab() {
        let mut lm = tiny_lm(10, 15);
        lm.params.data_mut("lm.out.w").fill(0.0);
        lm.params.data_mut("lm.out.b").fill(0.0);
        let held: Vec<(Vec<u32>, &Vec<u32>)> = Vec::new();
        drop(held);
        let x = vec![5u32, 6, 7];
        let xm = vec![MASK, 6, MASK];
        let binding = x.clone();
        let hm = vec![(xm, &binding)];
        let ppl = heldout_perplexity(&lm, &hm).unwrap();
        // uniform predictions give perplexity exactly vocab_size
        assert!((ppl - 10.0).abs() < 1e-9, "ppl {ppl}");
    }

    #[test]
    fn copy_task_is_learnable_without_masking() {
        // M = 0 turns completion into conditional copying
        let corpus: Vec<Vec<u32>> = (0..200)
            .map(|i| {
                let mut rng = seeded(derive_seed(77, &[i as u64]));
                (0..4).map(|_| rng.gen_range(5..11u32)).collect()
            })
            .collect();
        let mut lm = NoiseLm::new(
            NoiseLmConfig {
                vocab_size: 11,
                max_seq_len: 16,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ff_mult: 2,
                dropout: 0.0,
            },
            16,
        );
        let none = MaskSpec {
            mask_ratio: 0.0,
            ..MaskSpec::default()
        };
        let sched = LmSchedule {
            epochs: 12,
            batch_size: 16,
            lr: 3e-3,
            seed: 6,
            holdout_frac: 0.1,
        };
        finetune_mlm(&mut lm, &corpus, &none, &sched).unwrap();
        // teacher-forced argmax accuracy on the copy targets
        let w = lm.weights();
        let mut hits = 0usize;
        let mut total = 0usize;
        for x in corpus.iter().take(50) {
            let (seq, first) = training_sequence(x, x);
            let mut cache = lm.start_cache();
            for t in 0..first {
                let _ = lm.eval_step(&w, &mut cache, seq[t]);
            }
            for pos in first..seq.len() - 2 {
                let logits = lm.eval_step(&w, &mut cache, seq[pos]);
                let arg = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                if arg == seq[pos + 1] as usize {
                    hits += 1;
                }
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc > 0.9, "copy accuracy {acc}");
    }

    #[test]
    fn noise_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noise.jsonl");
        let samples = vec![
            NoiseSample {
                source_index: 0,
                tokens: vec![5, 6, 7],
                log_prob: -1.5,
                log_prob_full: -2.25,
                seed: 42,
            },
            NoiseSample {
                source_index: 3,
                tokens: vec![9],
                log_prob: 0.0,
                log_prob_full: -0.5,
                seed: 43,
            },
        ];
        save_noise_cache(&p, &samples).unwrap();
        assert_eq!(load_noise_cache(&p).unwrap(), samples);

        std::fs::write(&p, "{\"source_index\":0\nbroken").unwrap();
        assert!(matches!(
            load_noise_cache(&p),
            Err(NoiseError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut lm = tiny_lm(10, 17);
        assert!(matches!(
            finetune_mlm(&mut lm, &[], &MaskSpec::default(), &LmSchedule::default()),
            Err(NoiseError::EmptyCorpus)
        ));
    }
}
