//! Named parameter store and the shared pre-LN transformer core.
//!
//! [`ParamSet`] owns all weights of a model as named f64 tensors in a fixed
//! registration order (checkpoints and staging depend on that order).
//! During a training step the parameters are staged onto a [`Tape`] once as
//! gradient-requiring leaves; after one or more backward passes
//! [`ParamSet::apply_grads`] feeds the accumulated leaf gradients to Adam.
//!
//! [`CoreConfig`] builds the transformer trunk used by the encoder
//! (bidirectional) and the noise language model (causal): embeddings,
//! pre-LN multi-head attention and feed-forward blocks, and a final layer
//! norm.

use crate::autodiff::tape::Result as TapeResult;
use crate::autodiff::{AdamConfig, AdamState, Tape, TensorError, TensorId};
use crate::checkpoint::NamedTensor;
use crate::rng::{derive_seed, hash_str, seeded};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("sequence length {len} outside [1, {max}]")]
    BadLength { len: usize, max: usize },
    #[error("label {label} invalid for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    adam: AdamState,
}

/// All weights of one model, in registration order.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Tape leaf ids for one staging of a [`ParamSet`], aligned with its order.
pub struct Staged {
    ids: Vec<TensorId>,
}

impl Staged {
    pub fn id(&self, ps: &ParamSet, name: &str) -> TensorId {
        self.ids[ps.index[name]]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            adam: AdamState::new(data.len()),
            data,
        });
    }

    /// Glorot-uniform matrix `[rows, cols]`; the draw depends only on
    /// (seed, name), so adding parameters never reshuffles existing ones.
    pub fn add_glorot(&mut self, name: &str, rows: usize, cols: usize, seed: u64) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = seeded(derive_seed(seed, &[hash_str(name)]));
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.add(name, vec![rows, cols], data);
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.add(name, shape.to_vec(), vec![0.0; n]);
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.add(name, shape.to_vec(), vec![1.0; n]);
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.entries[self.index[name]].data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self.index[name];
        &mut self.entries[i].data
    }

    pub fn shape_of(&self, name: &str) -> &[usize] {
        &self.entries[self.index[name]].shape
    }

    /// Put every parameter on the tape as a gradient-requiring leaf.
    pub fn stage(&self, tape: &mut Tape) -> TapeResult<Staged> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            ids.push(tape.leaf(e.data.clone(), &e.shape, true)?);
        }
        Ok(Staged { ids })
    }

    /// Apply accumulated leaf gradients with Adam. Parameters whose leaves
    /// have no gradient are left untouched (their moments do not advance).
    pub fn apply_grads(&mut self, tape: &Tape, staged: &Staged, cfg: &AdamConfig) {
        for (e, &id) in self.entries.iter_mut().zip(&staged.ids) {
            if let Some(g) = tape.grad(id) {
                e.adam.step(cfg, &mut e.data, g);
            }
        }
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.clone(),
            })
            .collect()
    }

    /// Overwrite values from checkpoint tensors, matching by name.
    pub fn load_from(&mut self, tensors: &[NamedTensor]) -> Result<(), ModelError> {
        for e in &mut self.entries {
            let t = tensors
                .iter()
                .find(|t| t.name == e.name)
                .ok_or_else(|| ModelError::MissingTensor(e.name.clone()))?;
            if t.shape != e.shape {
                return Err(ModelError::TensorShape {
                    name: e.name.clone(),
                    expected: e.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            e.data.clone_from(&t.data);
        }
        Ok(())
    }

    /// Snapshot of raw values, aligned with registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.data.clone()).collect()
    }

    /// Restore values from a [`ParamSet::snapshot`]; optimizer state is kept.
    pub fn restore(&mut self, snap: &[Vec<f64>]) {
        assert_eq!(snap.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snap) {
            e.data.clone_from(s);
        }
    }
}

/// Inverted-keep-probability dropout; masks are sampled outside the tape so
/// they act as constants during backward.
pub enum Dropout {
    Off,
    On { p: f64, rng: ChaCha8Rng },
}

impl Dropout {
    pub fn train(p: f64, seed: u64) -> Self {
        if p == 0.0 {
            Self::Off
        } else {
            Self::On {
                p,
                rng: seeded(seed),
            }
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: TensorId) -> TapeResult<TensorId> {
        match self {
            Self::Off => Ok(x),
            Self::On { p, rng } => {
                let keep = 1.0 - *p;
                let n = tape.data(x).len();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let shape = tape.shape(x).to_vec();
                let m = tape.constant(mask, &shape)?;
                tape.mul(x, m)
            }
        }
    }
}

/// Shape of a transformer trunk; `prefix` namespaces its parameters.
#[derive(Debug, Clone)]
pub struct CoreConfig {
    pub prefix: String,
    /// Embedding-table rows; may exceed the vocabulary (extra learned rows).
    pub n_embed_rows: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
}

impl CoreConfig {
    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Register embeddings, blocks, and the final layer norm.
    pub fn register(&self, ps: &mut ParamSet, seed: u64) {
        assert!(self.d_model % self.n_heads == 0, "heads must divide d_model");
        let d = self.d_model;
        ps.add_glorot(&self.name("tok_emb"), self.n_embed_rows, d, seed);
        ps.add_glorot(&self.name("pos_emb"), self.max_positions, d, seed);
        for l in 0..self.n_layers {
            let p = |s: &str| self.name(&format!("l{l}.{s}"));
            ps.add_ones(&p("ln1.g"), &[d]);
            ps.add_zeros(&p("ln1.b"), &[d]);
            for w in ["wq", "wk", "wv", "wo"] {
                ps.add_glorot(&p(w), d, d, seed);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                ps.add_zeros(&p(b), &[d]);
            }
            ps.add_ones(&p("ln2.g"), &[d]);
            ps.add_zeros(&p("ln2.b"), &[d]);
            ps.add_glorot(&p("w1"), d, d * self.ff_mult, seed);
            ps.add_zeros(&p("b1"), &[d * self.ff_mult]);
            ps.add_glorot(&p("w2"), d * self.ff_mult, d, seed);
            ps.add_zeros(&p("b2"), &[d]);
        }
        ps.add_ones(&self.name("lnf.g"), &[d]);
        ps.add_zeros(&self.name("lnf.b"), &[d]);
    }

    /// Token + positional embedding rows for explicit row indices.
    pub fn embed(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        st: &Staged,
        rows: &[usize],
    ) -> TapeResult<TensorId> {
        let tok = tape.gather_rows(st.id(ps, &self.name("tok_emb")), rows)?;
        let pos = st.id(ps, &self.name("pos_emb"));
        let pos_rows = tape.slice_rows(pos, 0, rows.len())?;
        tape.add(tok, pos_rows)
    }

    /// Run the trunk over embedded input `[len, d]`; returns `[len, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        st: &Staged,
        mut x: TensorId,
        causal: bool,
        drop: &mut Dropout,
    ) -> TapeResult<TensorId> {
        let d = self.d_model;
        let dh = d / self.n_heads;
        x = drop.apply(tape, x)?;
        for l in 0..self.n_layers {
            let p = |s: &str| self.name(&format!("l{l}.{s}"));
            let ln1_g = st.id(ps, &p("ln1.g"));
            let ln1_b = st.id(ps, &p("ln1.b"));
            let h = tape.layer_norm(x, ln1_g, ln1_b)?;

            let q_all = {
                let m = tape.matmul(h, st.id(ps, &p("wq")))?;
                tape.add_bias(m, st.id(ps, &p("bq")))?
            };
            let k_all = {
                let m = tape.matmul(h, st.id(ps, &p("wk")))?;
                tape.add_bias(m, st.id(ps, &p("bk")))?
            };
            let v_all = {
                let m = tape.matmul(h, st.id(ps, &p("wv")))?;
                tape.add_bias(m, st.id(ps, &p("bv")))?
            };
            let mut heads = Vec::with_capacity(self.n_heads);
            for hd in 0..self.n_heads {
                let q = tape.slice_cols(q_all, hd * dh, dh)?;
                let k = tape.slice_cols(k_all, hd * dh, dh)?;
                let v = tape.slice_cols(v_all, hd * dh, dh)?;
                heads.push(tape.attention(q, k, v, causal)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let proj = {
                let m = tape.matmul(cat, st.id(ps, &p("wo")))?;
                tape.add_bias(m, st.id(ps, &p("bo")))?
            };
            let proj = drop.apply(tape, proj)?;
            x = tape.add(x, proj)?;

            let ln2_g = st.id(ps, &p("ln2.g"));
            let ln2_b = st.id(ps, &p("ln2.b"));
            let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
            let ff = {
                let m = tape.matmul(h2, st.id(ps, &p("w1")))?;
                let m = tape.add_bias(m, st.id(ps, &p("b1")))?;
                let g = tape.gelu(m)?;
                let m = tape.matmul(g, st.id(ps, &p("w2")))?;
                tape.add_bias(m, st.id(ps, &p("b2")))?
            };
            let ff = drop.apply(tape, ff)?;
            x = tape.add(x, ff)?;
        }
        let g = st.id(ps, &self.name("lnf.g"));
        let b = st.id(ps, &self.name("lnf.b"));
        tape.layer_norm(x, g, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn tiny_core() -> (CoreConfig, ParamSet) {
        let core = CoreConfig {
            prefix: "t".into(),
            n_embed_rows: 7,
            max_positions: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
        };
        let mut ps = ParamSet::new();
        core.register(&mut ps, 42);
        (core, ps)
    }

    #[test]
    fn registration_is_deterministic_and_named() {
        let (_, a) = tiny_core();
        let (_, b) = tiny_core();
        assert_eq!(a.n_params(), b.n_params());
        for name in a.names() {
            assert_eq!(a.data(name), b.data(name), "{name}");
        }
        assert!(a.names().any(|n| n == "t.l0.wq"));
        assert!(a.names().any(|n| n == "t.lnf.g"));
    }

    #[test]
    fn init_depends_on_name_not_registration_order() {
        let mut a = ParamSet::new();
        a.add_glorot("x", 3, 3, 7);
        a.add_glorot("y", 3, 3, 7);
        let mut b = ParamSet::new();
        b.add_glorot("y", 3, 3, 7);
        b.add_glorot("x", 3, 3, 7);
        assert_eq!(a.data("x"), b.data("x"));
        assert_eq!(a.data("y"), b.data("y"));
        assert_ne!(a.data("x"), a.data("y"));
    }

    #[test]
    fn forward_is_deterministic_without_dropout() {
        let (core, ps) = tiny_core();
        let run = || {
            let mut tape = Tape::new();
            let st = ps.stage(&mut tape).unwrap();
            let x = core.embed(&mut tape, &ps, &st, &[1, 4, 2]).unwrap();
            let y = core.forward(&mut tape, &ps, &st, x, false, &mut Dropout::Off).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params() {
        let (_, ps) = tiny_core();
        let tensors = ps.to_named_tensors();
        let (_, mut other) = tiny_core();
        other.data_mut("t.l0.wq")[0] += 1.0;
        other.load_from(&tensors).unwrap();
        for name in ps.names() {
            assert_eq!(ps.data(name), other.data(name));
        }
        let mut missing = tensors.clone();
        missing.retain(|t| t.name != "t.l0.wq");
        assert!(matches!(
            other.load_from(&missing),
            Err(ModelError::MissingTensor(_))
        ));
    }

    #[test]
    fn trunk_gradients_pass_fd() {
        // treat the embedded input as the differentiated leaf and run the
        // whole trunk on top of it
        let (core, ps) = tiny_core();
        let inputs = vec![(
            (0..24).map(|i| (i as f64 * 0.37).sin() * 0.5).collect::<Vec<f64>>(),
            vec![3, 8],
        )];
        for causal in [false, true] {
            let fails = check_gradients(&inputs, 1e-4, |tape, ids| {
                let st = ps.stage(tape).unwrap();
                let y = core
                    .forward(tape, &ps, &st, ids[0], causal, &mut Dropout::Off)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq).unwrap()
            });
            assert!(fails.is_empty(), "causal={causal}: {fails:?}");
        }
    }

    #[test]
    fn trunk_param_gradients_flow() {
        let (core, ps) = tiny_core();
        let mut tape = Tape::new();
        let st = ps.stage(&mut tape).unwrap();
        let x = core.embed(&mut tape, &ps, &st, &[0, 5, 3]).unwrap();
        let y = core.forward(&mut tape, &ps, &st, x, true, &mut Dropout::Off).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        tape.backward(loss).unwrap();
        for name in ps.names() {
            let id = st.id(&ps, name);
            let g = tape.grad(id);
            assert!(g.is_some(), "no gradient for {name}");
        }
        // gathered rows only: un-looked-up embedding rows get zero gradient
        let emb_grad = tape.grad(st.id(&ps, "t.tok_emb")).unwrap();
        let d = 8;
        assert!(emb_grad[1 * d..2 * d].iter().all(|&v| v == 0.0));
        assert!(emb_grad[5 * d..6 * d].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0; 1000], &[1000], true).unwrap();
        let mut drop = Dropout::train(0.4, 99);
        let y = drop.apply(&mut tape, x).unwrap();
        let vals = tape.data(y);
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        let kept: Vec<f64> = vals.iter().copied().filter(|&v| v != 0.0).collect();
        assert!((zeros as f64 / 1000.0 - 0.4).abs() < 0.06);
        for v in kept {
            assert!((v - 1.0 / 0.6).abs() < 1e-12);
        }
        // mean approximately preserved
        let mean: f64 = vals.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn adam_updates_only_touched_params() {
        let (core, mut ps) = tiny_core();
        let before_wq = ps.data("t.l0.wq").to_vec();
        let before_emb = ps.data("t.tok_emb").to_vec();
        let mut tape = Tape::new();
        let st = ps.stage(&mut tape).unwrap();
        // loss touches only the embedding table (gather of row 2)
        let x = tape.gather_rows(st.id(&ps, "t.tok_emb"), &[2]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        ps.apply_grads(&tape, &st, &AdamConfig::default());
        assert_eq!(ps.data("t.l0.wq"), &before_wq[..], "untouched stays put");
        assert_ne!(ps.data("t.tok_emb"), &before_emb[..]);
        let _ = core;
    }
}
