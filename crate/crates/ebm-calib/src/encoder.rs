//! Transformer text encoder with a classifier head and a scalar energy head.
//!
//! The pooled representation enc(x) is the hidden state of a learned
//! classification row prepended to the token sequence (the row lives in the
//! embedding table past the vocabulary, so it can never collide with an
//! input id). The classifier head maps enc(x) to one logit per class; the
//! scalar head maps it to a single real used by the scalar energy variant.

use crate::autodiff::{Tape, TensorId};
use crate::model::{CoreConfig, Dropout, ModelError, ParamSet, Staged};
use serde::{Deserialize, Serialize};

/// Classifier head shape on top of enc(x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Linear,
    /// One hidden layer of width d_model with GELU.
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Total token-id space (specials included).
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub ff_mult: usize,
    pub head: HeadKind,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 69,
            max_seq_len: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_classes: 2,
            ff_mult: 2,
            head: HeadKind::Linear,
            dropout: 0.1,
        }
    }
}

/// Encoder weights plus config; the embedding table's extra last row is the
/// pooled classification token.
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub core: CoreConfig,
    pub params: ParamSet,
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Self {
        assert!(cfg.d_model % cfg.n_heads == 0, "heads must divide d_model");
        assert!(cfg.n_classes >= 2, "need at least two classes");
        let core = CoreConfig {
            prefix: "enc".into(),
            // one extra learned row for the pooled classification token
            n_embed_rows: cfg.vocab_size + 1,
            // position 0 is the classification row
            max_positions: cfg.max_seq_len + 1,
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            ff_mult: cfg.ff_mult,
        };
        let mut params = ParamSet::new();
        core.register(&mut params, seed);
        match cfg.head {
            HeadKind::Linear => {
                params.add_glorot("enc.head.w", cfg.d_model, cfg.n_classes, seed);
                params.add_zeros("enc.head.b", &[cfg.n_classes]);
            }
            HeadKind::Mlp => {
                params.add_glorot("enc.head.w1", cfg.d_model, cfg.d_model, seed);
                params.add_zeros("enc.head.b1", &[cfg.d_model]);
                params.add_glorot("enc.head.w2", cfg.d_model, cfg.n_classes, seed);
                params.add_zeros("enc.head.b2", &[cfg.n_classes]);
            }
        }
        params.add_glorot("enc.gs.w", cfg.d_model, 1, seed);
        params.add_zeros("enc.gs.b", &[1]);
        Self { cfg, core, params }
    }

    fn cls_row(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn validate_input(&self, x: &[u32]) -> Result<(), ModelError> {
        if x.is_empty() || x.len() > self.cfg.max_seq_len {
            return Err(ModelError::BadLength {
                len: x.len(),
                max: self.cfg.max_seq_len,
            });
        }
        for &t in x {
            if (t as usize) >= self.cfg.vocab_size {
                return Err(ModelError::OutOfVocab {
                    id: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Pooled representation enc(x) as a `[1, d_model]` tape tensor.
    pub fn encode_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        x: &[u32],
        drop: &mut Dropout,
    ) -> Result<TensorId, ModelError> {
        self.validate_input(x)?;
        let mut rows = Vec::with_capacity(x.len() + 1);
        rows.push(self.cls_row());
        rows.extend(x.iter().map(|&t| t as usize));
        let emb = self.core.embed(tape, &self.params, st, &rows)?;
        let h = self.core.forward(tape, &self.params, st, emb, false, drop)?;
        Ok(tape.slice_rows(h, 0, 1)?)
    }

    /// Classifier logits as a `[1, n_classes]` tape tensor.
    pub fn logits_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        x: &[u32],
        drop: &mut Dropout,
    ) -> Result<TensorId, ModelError> {
        let enc = self.encode_t(tape, st, x, drop)?;
        self.head_t(tape, st, enc)
    }

    /// Apply the classifier head to an already pooled `[1, d_model]` tensor.
    pub fn head_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        enc: TensorId,
    ) -> Result<TensorId, ModelError> {
        let ps = &self.params;
        let out = match self.cfg.head {
            HeadKind::Linear => {
                let m = tape.matmul(enc, st.id(ps, "enc.head.w"))?;
                tape.add_bias(m, st.id(ps, "enc.head.b"))?
            }
            HeadKind::Mlp => {
                let m = tape.matmul(enc, st.id(ps, "enc.head.w1"))?;
                let m = tape.add_bias(m, st.id(ps, "enc.head.b1"))?;
                let g = tape.gelu(m)?;
                let m = tape.matmul(g, st.id(ps, "enc.head.w2"))?;
                tape.add_bias(m, st.id(ps, "enc.head.b2"))?
            }
        };
        Ok(out)
    }

    /// Scalar head g_S(enc(x)) as a `[1, 1]` tape tensor.
    pub fn scalar_head_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        enc: TensorId,
    ) -> Result<TensorId, ModelError> {
        let ps = &self.params;
        let m = tape.matmul(enc, st.id(ps, "enc.gs.w"))?;
        Ok(tape.add_bias(m, st.id(ps, "enc.gs.b"))?)
    }

    /// Mean cross-entropy over a batch, built on the tape:
    /// mean_i [logsumexp(logits_i) - logits_i[label_i]].
    pub fn ce_loss_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        batch: &[(&[u32], usize)],
        drop: &mut Dropout,
    ) -> Result<TensorId, ModelError> {
        let mut per_example = Vec::with_capacity(batch.len());
        for &(x, label) in batch {
            per_example.push(self.ce_one_t(tape, st, x, label, drop)?);
        }
        let stacked = tape.stack_scalars(&per_example)?;
        Ok(tape.mean_all(stacked)?)
    }

    /// Cross-entropy of one example as a `[1]` tensor.
    pub fn ce_one_t(
        &self,
        tape: &mut Tape,
        st: &Staged,
        x: &[u32],
        label: usize,
        drop: &mut Dropout,
    ) -> Result<TensorId, ModelError> {
        if label >= self.cfg.n_classes {
            return Err(ModelError::InvalidLabel {
                label,
                n_classes: self.cfg.n_classes,
            });
        }
        let logits = self.logits_t(tape, st, x, drop)?;
        self.ce_from_logits_t(tape, logits, label)
    }

    /// Cross-entropy from an existing `[1, n_classes]` logits tensor.
    pub fn ce_from_logits_t(
        &self,
        tape: &mut Tape,
        logits: TensorId,
        label: usize,
    ) -> Result<TensorId, ModelError> {
        if label >= self.cfg.n_classes {
            return Err(ModelError::InvalidLabel {
                label,
                n_classes: self.cfg.n_classes,
            });
        }
        let lse = tape.logsumexp_last(logits)?;
        let lse = tape.pick(lse, 0)?;
        let picked = tape.pick(logits, label)?;
        Ok(tape.sub(lse, picked)?)
    }

    // ---- evaluation (fresh scratch tape, no dropout, no gradients) ----

    /// Logits as plain values.
    pub fn logits_vec(&self, x: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let st = self.params.stage(&mut tape)?;
        let id = self.logits_t(&mut tape, &st, x, &mut Dropout::Off)?;
        Ok(tape.data(id).to_vec())
    }

    /// enc(x) as plain values.
    pub fn encode_vec(&self, x: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let st = self.params.stage(&mut tape)?;
        let id = self.encode_t(&mut tape, &st, x, &mut Dropout::Off)?;
        Ok(tape.data(id).to_vec())
    }

    /// Softmax posterior over classes as plain values.
    pub fn posterior_vec(&self, x: &[u32]) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits_vec(x)?;
        let mut out = vec![0.0; logits.len()];
        crate::autodiff::softmax_row(&logits, &mut out);
        Ok(out)
    }
}
