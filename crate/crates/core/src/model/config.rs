use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults give the 443,493-parameter model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab: usize,
    /// Maximum context length in tokens.
    pub max_context: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, n_blocks: 8, n_heads: 8, vocab: 101, max_context: 500, dropout: 0.2 }
    }
}

/// Output head installed on top of the final layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `d_model -> vocab` next-token logits.
    Lm,
    /// `d_model -> 1` logit, read at the final position through a sigmoid.
    Cls,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    /// Names and shapes of the tensors in one block, in checkpoint order.
    ///
    /// Query/key/value are stored as `d_model x d_model` matrices whose
    /// column block `h * d_k .. (h + 1) * d_k` is head `h`'s projection.
    pub fn block_shapes(&self, block: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ffn_width();
        let p = |s: &str| format!("blocks.{block}.{s}");
        vec![
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.query"), vec![d, d]),
            (p("attn.key"), vec![d, d]),
            (p("attn.value"), vec![d, d]),
            (p("attn.proj.weight"), vec![d, d]),
            (p("attn.proj.bias"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ffn.up.weight"), vec![d, f]),
            (p("ffn.up.bias"), vec![f]),
            (p("ffn.down.weight"), vec![f, d]),
            (p("ffn.down.bias"), vec![d]),
        ]
    }

    pub fn head_shapes(&self, head: HeadKind) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        match head {
            HeadKind::Lm => vec![("lm_head.weight".into(), vec![d, self.vocab]), ("lm_head.bias".into(), vec![self.vocab])],
            HeadKind::Cls => vec![("cls_head.weight".into(), vec![d, 1]), ("cls_head.bias".into(), vec![1])],
        }
    }

    /// Every trainable tensor, in checkpoint order.
    pub fn tensor_shapes(&self, head: HeadKind) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("token_embedding".to_string(), vec![self.vocab, d]),
            ("position_embedding".to_string(), vec![self.max_context, d]),
        ];
        for b in 0..self.n_blocks {
            out.extend(self.block_shapes(b));
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.extend(self.head_shapes(head));
        out
    }

    pub fn param_count(&self, head: HeadKind) -> usize {
        self.tensor_shapes(head).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// True for tensors exempt from weight decay (layer norms and embeddings).
pub fn is_no_decay(name: &str) -> bool {
    name.contains("ln1.") || name.contains("ln2.") || name.starts_with("final_ln.") || name.ends_with("_embedding")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lm_count_is_443493() {
        assert_eq!(ModelConfig::default().param_count(HeadKind::Lm), 443_493);
    }

    #[test]
    fn default_cls_count() {
        assert_eq!(ModelConfig::default().param_count(HeadKind::Cls), 443_493 - (64 * 101 + 101) + (64 + 1));
        assert_eq!(ModelConfig::default().param_count(HeadKind::Cls), 436_993);
    }

    #[test]
    fn tiny_config_hand_count() {
        // token 3x4, position 5x4, q/k/v 3x(4x4), proj 4x4+4, two norms 2x(4+4),
        // ffn 4x16+16 and 16x4+4, final norm 4+4, head 4x3+3
        let hand = 12 + 20 + 48 + 20 + 16 + 80 + 68 + 8 + 15;
        let cfg = ModelConfig { d_model: 4, n_blocks: 1, n_heads: 1, vocab: 3, max_context: 5, dropout: 0.0 };
        assert_eq!(hand, 287);
        assert_eq!(cfg.param_count(HeadKind::Lm), hand);
    }

    #[test]
    fn block_size_is_49792() {
        let cfg = ModelConfig::default();
        let block: usize = cfg.block_shapes(7).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(block, 49_792);
    }

    #[test]
    fn validation_rejects_indivisible_heads() {
        let cfg = ModelConfig { n_heads: 5, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig { dropout: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
