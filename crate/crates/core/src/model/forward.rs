use indexmap::IndexMap;

use super::config::{HeadKind, ModelConfig};
use super::params::ParamStore;
use crate::array::Array;
use crate::autodiff::{AttentionSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Per-layer, per-head attention matrices from one eval-mode forward pass.
///
/// Weights are post-mask, post-softmax and pre-dropout. Rows above the
/// diagonal are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    /// `[layer][head][query][key]`, row-major.
    weights: Vec<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn from_weights(layers: usize, heads: usize, len: usize, weights: Vec<T>) -> Result<Self> {
        if weights.len() != layers * heads * len * len {
            return Err(Error::shape("attention_record", &[layers, heads, len, len], &[weights.len()]));
        }
        Ok(Self { layers, heads, len, weights })
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[T] {
        let n = self.len * self.len;
        let start = (layer * self.heads + head) * n;
        &self.weights[start..start + n]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[T] {
        &self.matrix(layer, head)[query * self.len..(query + 1) * self.len]
    }

    /// Attention row of the last position (the next-token prediction point).
    pub fn final_row(&self, layer: usize, head: usize) -> &[T] {
        self.row(layer, head, self.len - 1)
    }
}

/// Parameters bound to tape leaves.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("tensor {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Tape nodes produced by one forward pass.
pub struct TapeForward {
    /// `[batch, t, out]` head output (vocabulary logits or class logit).
    pub output: Var,
    /// Fused attention node of every block, for probability capture.
    pub attention: Vec<Var>,
    /// Residual stream entering block 0 (embeddings) and leaving each block.
    pub residual: Vec<Var>,
}

/// A configured transformer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, head: HeadKind, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, head, rng);
        Ok(Self { config, head, params })
    }

    pub fn from_params(config: ModelConfig, head: HeadKind, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config, head)?;
        Ok(Self { config, head, params })
    }

    /// Head swap for fine-tuning. The body is copied bit-for-bit.
    pub fn swap_head(&self, rng: &mut Rng) -> Result<Self> {
        let params = self.params.with_cls_head(&self.config, rng)?;
        Ok(Self { config: self.config.clone(), head: HeadKind::Cls, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), head: self.head, params: self.params.cast() }
    }

    /// Adds every tensor to the tape; `trainable` decides which ones
    /// accumulate gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.params.iter().map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable(name)))).collect();
        Bound { vars }
    }

    pub fn check_tokens(&self, tokens: &[usize], len: usize) -> Result<()> {
        if len > self.config.max_context {
            return Err(Error::ContextOverflow { len, max: self.config.max_context });
        }
        if len == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Vocabulary { index: bad, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Token plus position embeddings for `batch` sequences of length `len`.
    pub fn embed_tape(&self, tape: &mut Tape<T>, p: &Bound, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
        self.check_tokens(tokens, len)?;
        if tokens.len() != batch * len {
            return Err(Error::shape("embed", &[batch, len], &[tokens.len()]));
        }
        let tok = tape.embed(p.var("token_embedding"), tokens, &[batch, len])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embed(p.var("position_embedding"), &positions, &[len])?;
        tape.add(tok, pos)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = tape.matmul(x, weight)?;
        match bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    /// One pre-norm transformer block on `[batch, t, d]`. With `last_only`,
    /// only the final position's output is produced (`[batch, 1, d]`), which
    /// equals the last row of the full block output.
    #[allow(clippy::too_many_arguments)]
    pub fn block_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        block: usize,
        x: Var,
        last_only: bool,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let name = |s: &str| format!("blocks.{block}.{s}");
        let rate = self.config.dropout;
        let h = tape.layer_norm(x, p.var(&name("ln1.gain")), p.var(&name("ln1.bias")))?;
        let k = tape.matmul(h, p.var(&name("attn.key")))?;
        let v = tape.matmul(h, p.var(&name("attn.value")))?;
        let (hq, residual) = if last_only {
            let t = tape.shape(x)[1];
            (tape.slice_positions(h, t - 1, 1)?, tape.slice_positions(x, t - 1, 1)?)
        } else {
            (h, x)
        };
        let q = tape.matmul(hq, p.var(&name("attn.query")))?;
        let spec = AttentionSpec { heads: self.config.n_heads, dropout: rate };
        let attn = tape.causal_attention(q, k, v, spec, rng, mode)?;
        let a = self.linear(tape, attn, p.var(&name("attn.proj.weight")), Some(p.var(&name("attn.proj.bias"))))?;
        let a = tape.dropout(a, rate, rng, mode)?;
        let x = tape.add(residual, a)?;

        let h = tape.layer_norm(x, p.var(&name("ln2.gain")), p.var(&name("ln2.bias")))?;
        let f = self.linear(tape, h, p.var(&name("ffn.up.weight")), Some(p.var(&name("ffn.up.bias"))))?;
        let f = tape.relu(f);
        let f = self.linear(tape, f, p.var(&name("ffn.down.weight")), Some(p.var(&name("ffn.down.bias"))))?;
        let f = tape.dropout(f, rate, rng, mode)?;
        Ok((tape.add(x, f)?, attn))
    }

    /// Final layer norm followed by the installed head.
    pub fn head_tape(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p.var("final_ln.gain"), p.var("final_ln.bias"))?;
        let prefix = match self.head {
            HeadKind::Lm => "lm_head",
            HeadKind::Cls => "cls_head",
        };
        self.linear(tape, h, p.var(&format!("{prefix}.weight")), Some(p.var(&format!("{prefix}.bias"))))
    }

    /// Full forward over `batch` sequences of length `len` (row-major tokens).
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<TapeForward> {
        let mut x = self.embed_tape(tape, p, tokens, batch, len)?;
        let mut residual = vec![x];
        let mut attention = Vec::with_capacity(self.config.n_blocks);
        for b in 0..self.config.n_blocks {
            let (next, attn) = self.block_tape(tape, p, b, x, false, mode, rng)?;
            x = next;
            residual.push(x);
            attention.push(attn);
        }
        let output = self.head_tape(tape, p, x)?;
        Ok(TapeForward { output, attention, residual })
    }

    /// Collects attention probabilities of batch element 0.
    pub fn attention_record(&self, tape: &Tape<T>, fwd: &TapeForward) -> Result<AttentionRecord<T>> {
        let mut weights = Vec::new();
        let mut len = 0;
        for &a in &fwd.attention {
            let (probs, [_, heads, tq, tk]) =
                tape.attention_probs(a).ok_or_else(|| Error::Contract("not an attention node".into()))?;
            debug_assert_eq!(tq, tk);
            len = tk;
            weights.extend_from_slice(&probs[..heads * tq * tk]);
        }
        AttentionRecord::from_weights(fwd.attention.len(), self.config.n_heads, len, weights)
    }

    /// Single-sequence forward: logits `[t, vocab]` (or `[t, 1]` for the
    /// classification head) and the attention record.
    pub fn forward(&self, tokens: &[usize], mode: Mode, rng: &mut Rng) -> Result<(Array<T>, AttentionRecord<T>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let fwd = self.forward_tape(&mut tape, &p, tokens, 1, tokens.len(), mode, rng)?;
        let record = self.attention_record(&tape, &fwd)?;
        let out = tape.value(fwd.output).clone();
        let width = out.last_dim();
        Ok((out.reshape(&[tokens.len(), width])?, record))
    }

    /// Logits only, eval mode.
    pub fn logits(&self, tokens: &[usize]) -> Result<Array<T>> {
        Ok(self.forward(tokens, Mode::Eval, &mut Rng::new(0))?.0)
    }

    /// Residual-stream activations `[t, d_model]` at the input (stage 0) and
    /// after each block (stages 1..=n_blocks), eval mode.
    pub fn residual_stream(&self, tokens: &[usize]) -> Result<Vec<Array<T>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let fwd = self.forward_tape(&mut tape, &p, tokens, 1, tokens.len(), Mode::Eval, &mut Rng::new(0))?;
        fwd.residual
            .iter()
            .map(|v| tape.value(*v).clone().reshape(&[tokens.len(), self.config.d_model]))
            .collect()
    }

    /// Sigmoid of the classification logit at the final position.
    pub fn forward_classify(&self, tokens: &[usize], mode: Mode, rng: &mut Rng) -> Result<T> {
        if self.head != HeadKind::Cls {
            return Err(Error::Contract("classification needs the cls head".into()));
        }
        let (out, _) = self.forward(tokens, mode, rng)?;
        let z = out.data()[out.len() - 1];
        Ok(sigmoid(z))
    }

    /// Residual stream entering the final block, eval mode, `[batch, t, d]`.
    /// The frozen prefix of a fine-tuned model is a pure function of this.
    pub fn prefix_hidden(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Array<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let mut rng = Rng::new(0);
        let mut x = self.embed_tape(&mut tape, &p, tokens, batch, len)?;
        for b in 0..self.config.n_blocks - 1 {
            x = self.block_tape(&mut tape, &p, b, x, false, Mode::Eval, &mut rng)?.0;
        }
        Ok(tape.value(x).clone())
    }

    /// Class logit `[batch, 1, 1]` computed from the final block onward,
    /// evaluating only the last position.
    pub fn classify_from_prefix_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        hidden: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let last = self.config.n_blocks - 1;
        let (x, _) = self.block_tape(tape, p, last, hidden, true, mode, rng)?;
        self.head_tape(tape, p, x)
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}
