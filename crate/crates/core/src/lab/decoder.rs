//! Tiny autoregressive decoder used as a stand-in for a language model.
//!
//! State at step `t` is `E_tok[x_t] + Σ_{u ≤ t} E_hist[x_u]`; one
//! cross-attention block reads the fused visual features, its output is added
//! to the state, and a linear head produces next-token logits.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::favr::{attend_backward, attend_forward, AttentionCache, AttentionWeights};
use crate::matrix::{softmax_in_place, Matrix};

pub const BOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Special tokens first, then every distinct token in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = tokens.into_iter().collect();
        words.sort_unstable();
        words.dedup();
        let all: Vec<String> = ["<bos>", "<eos>"]
            .into_iter()
            .chain(words)
            .map(String::from)
            .collect();
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| {
                    Error::Config(format!("token {:?} not in vocabulary", t.as_ref()))
                })
            })
            .collect()
    }

    /// Space-joined text of the ids, specials omitted.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS && i != EOS)
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDecoder {
    /// `[V × h]`
    pub tok: Matrix,
    /// `[V × h]`
    pub hist: Matrix,
    /// Query `[h × h]`, key and value `[d × h]`.
    pub attn: AttentionWeights,
    /// `[h × V]`
    pub out: Matrix,
    pub out_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    inputs: Vec<usize>,
    states: Matrix,
    attn: AttentionCache,
    hidden: Matrix,
    probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub params: TinyDecoder,
    /// Gradient with respect to the visual features.
    pub features: Matrix,
}

impl TinyDecoder {
    pub fn init(
        seed: u64,
        vocab: usize,
        hidden: usize,
        feature_dim: usize,
        std: f64,
    ) -> Result<Self> {
        if vocab == 0 || hidden == 0 || feature_dim == 0 {
            return Err(Error::ShapeMismatch(
                "decoder dimensions must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, s: f64| -> Result<Matrix> {
            let n = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
            Ok(Matrix::from_fn(rows, cols, |_, _| n.sample(&mut rng)))
        };
        Ok(Self {
            tok: draw(vocab, hidden, std)?,
            hist: draw(vocab, hidden, std)?,
            attn: AttentionWeights {
                w_q: draw(hidden, hidden, 1.0 / (hidden as f64).sqrt())?,
                w_k: draw(feature_dim, hidden, 1.0 / (feature_dim as f64).sqrt())?,
                w_v: draw(feature_dim, hidden, 1.0 / (feature_dim as f64).sqrt())?,
            },
            out: draw(hidden, vocab, std)?,
            out_bias: vec![0.0; vocab],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok.rows()
    }

    pub fn hidden(&self) -> usize {
        self.tok.dim()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok: Matrix::zeros(self.tok.rows(), self.tok.dim()),
            hist: Matrix::zeros(self.hist.rows(), self.hist.dim()),
            attn: self.attn.zeros_like(),
            out: Matrix::zeros(self.out.rows(), self.out.dim()),
            out_bias: vec![0.0; self.out_bias.len()],
        }
    }

    pub fn axpy(&mut self, scale: f64, other: &TinyDecoder) -> Result<()> {
        self.tok.axpy(scale, &other.tok)?;
        self.hist.axpy(scale, &other.hist)?;
        self.attn.axpy(scale, &other.attn)?;
        self.out.axpy(scale, &other.out)?;
        self.out_bias
            .iter_mut()
            .zip(&other.out_bias)
            .for_each(|(a, b)| *a += scale * b);
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("tok", self.tok.data()),
            ("hist", self.hist.data()),
            ("w_q", self.attn.w_q.data()),
            ("w_k", self.attn.w_k.data()),
            ("w_v", self.attn.w_v.data()),
            ("out", self.out.data()),
            ("out_bias", &self.out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("tok", self.tok.data_mut()),
            ("hist", self.hist.data_mut()),
            ("w_q", self.attn.w_q.data_mut()),
            ("w_k", self.attn.w_k.data_mut()),
            ("w_v", self.attn.w_v.data_mut()),
            ("out", self.out.data_mut()),
            ("out_bias", &mut self.out_bias),
        ]
    }

    fn states(&self, inputs: &[usize]) -> Result<Matrix> {
        let h = self.hidden();
        let mut s = Matrix::zeros(inputs.len(), h);
        let mut acc = vec![0.0; h];
        for (t, &x) in inputs.iter().enumerate() {
            if x >= self.vocab_size() {
                return Err(Error::ShapeMismatch(format!(
                    "token id {x} outside vocabulary"
                )));
            }
            acc.iter_mut()
                .zip(self.hist.row(x))
                .for_each(|(a, v)| *a += v);
            for ((o, a), e) in s.row_mut(t).iter_mut().zip(&acc).zip(self.tok.row(x)) {
                *o = a + e;
            }
        }
        Ok(s)
    }

    /// Next-token probabilities `[T × V]` for each input position.
    pub fn forward(&self, inputs: &[usize], features: &Matrix) -> Result<(Matrix, DecoderCache)> {
        let states = self.states(inputs)?;
        let (ctx, attn) = attend_forward(&states, features, &self.attn)?;
        let mut hidden = states.clone();
        hidden.add_assign(&ctx)?;
        let mut probs = hidden.matmul(&self.out)?;
        for r in 0..probs.rows() {
            let row = probs.row_mut(r);
            row.iter_mut()
                .zip(&self.out_bias)
                .for_each(|(v, b)| *v += b);
            softmax_in_place(row);
        }
        let cache = DecoderCache {
            inputs: inputs.to_vec(),
            states,
            attn,
            hidden,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Per-token cross-entropy and the gradient of `Σ coef_t · CE_t`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        targets: &[usize],
        coefs: &[f64],
    ) -> Result<(Vec<f64>, DecoderGrads)> {
        let t_len = cache.inputs.len();
        if targets.len() != t_len || coefs.len() != t_len {
            return Err(Error::AlignmentError(format!(
                "{t_len} inputs, {} targets, {} coefficients",
                targets.len(),
                coefs.len()
            )));
        }
        let mut losses = Vec::with_capacity(t_len);
        let mut d_logits = cache.probs.clone();
        for (t, (&y, &c)) in targets.iter().zip(coefs).enumerate() {
            losses.push(-cache.probs.get(t, y).ln());
            let row = d_logits.row_mut(t);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= c);
        }

        let mut grads = self.zeros_like();
        grads.out = cache.hidden.t_matmul(&d_logits)?;
        for r in 0..t_len {
            grads
                .out_bias
                .iter_mut()
                .zip(d_logits.row(r))
                .for_each(|(g, v)| *g += v);
        }
        let d_hidden = d_logits.matmul_t(&self.out)?;
        let ag = attend_backward(&cache.attn, &self.attn, &d_hidden)?;
        grads.attn = ag.weights;
        let mut d_states = d_hidden;
        d_states.add_assign(&ag.queries)?;

        let mut suffix = vec![0.0; self.hidden()];
        for t in (0..t_len).rev() {
            let x = cache.inputs[t];
            let ds = d_states.row(t);
            grads
                .tok
                .row_mut(x)
                .iter_mut()
                .zip(ds)
                .for_each(|(g, v)| *g += v);
            suffix.iter_mut().zip(ds).for_each(|(a, v)| *a += v);
            grads
                .hist
                .row_mut(x)
                .iter_mut()
                .zip(&suffix)
                .for_each(|(g, v)| *g += v);
        }
        debug_assert_eq!(cache.states.rows(), t_len);
        Ok((
            losses,
            DecoderGrads {
                params: grads,
                features: ag.context,
            },
        ))
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
    pub fn greedy(&self, features: &Matrix, max_len: usize) -> Result<Vec<usize>> {
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let (probs, _) = self.forward(&inputs, features)?;
            let last = probs.row(probs.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
            inputs.push(next);
        }
        Ok(out)
    }
}
