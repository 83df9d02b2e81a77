use rand::Rng;

use super::block::{block_forward, dense, sinusoidal, Block, BlockVars};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Frozen toy text transformer over sequences of `d`-wide token vectors.
///
/// The sequence is pooled at its last position, where prompts place the
/// class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<T> {
    cfg: EncoderConfig,
    seq_len: usize,
    pos: Tensor<T>,
    blocks: Vec<Block<T>>,
    pub(crate) proj: Tensor<T>,
    class_tokens: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TextVars {
    pos: Var,
    blocks: Vec<BlockVars>,
    proj: Var,
}

impl<T: Scalar> TextEncoder<T> {
    pub(crate) fn random<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        classes: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.width;
        Self {
            cfg: cfg.clone(),
            seq_len,
            pos: sinusoidal(seq_len, d),
            blocks: (0..cfg.text_layers)
                .map(|_| Block::random(d, cfg.mlp_hidden, rng))
                .collect(),
            proj: dense(cfg.embed_dim, d, rng),
            class_tokens: Tensor::randn([classes, d], 1.0, rng),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn classes(&self) -> usize {
        self.class_tokens.rows()
    }

    /// Frozen embedding for class `k` (0-based), `1 × d`.
    pub fn class_token(&self, k: usize) -> Result<Tensor<T>> {
        if k >= self.classes() {
            return Err(Error::Contract(format!(
                "class id {k} outside 0..{}",
                self.classes()
            )));
        }
        Tensor::new([1, self.cfg.width], self.class_tokens.row(k).to_vec())
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.proj);
        v.push(&self.class_tokens);
        v
    }

    pub fn bind(&self, g: &mut Graph<T>) -> TextVars {
        TextVars {
            pos: g.constant(self.pos.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            proj: g.constant(self.proj.clone()),
        }
    }

    /// Pooled features before the output projection, `1 × d`.
    pub fn features(&self, g: &mut Graph<T>, vars: &TextVars, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape != [self.seq_len, self.cfg.width] {
            return Err(Error::Contract(format!(
                "prompt sequence shape {shape:?}, expected [{}, {}]",
                self.seq_len, self.cfg.width
            )));
        }
        let mut x = g.add(tokens, vars.pos)?;
        for bv in &vars.blocks {
            x = block_forward(g, bv, x, None, None)?;
        }
        let last = g.slice_rows(x, self.seq_len - 1, self.seq_len)?;
        Ok(g.layernorm(last))
    }

    /// Embeds a token sequence as a `1 × d_e` row on `g`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &TextVars, tokens: Var) -> Result<Var> {
        let f = self.features(g, vars, tokens)?;
        g.matmul_nt(f, vars.proj)
    }

    /// Inference-only embedding of a token sequence.
    pub fn encode(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let t = g.constant(tokens.clone());
        let e = self.forward(&mut g, &vars, t)?;
        Ok(g.value(e).clone())
    }
}
