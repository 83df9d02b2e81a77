use rand::Rng;
use rayon::prelude::*;

use super::block::{block_forward, dense, sinusoidal, Block, BlockVars};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::peft::{visual_prompt_apply, PeftModule, PeftVars};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Frozen toy vision transformer with PEFT insertion points in every block.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder<T> {
    cfg: EncoderConfig,
    patch_w: Tensor<T>,
    patch_b: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<Block<T>>,
    proj: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct VisionVars {
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    proj: Var,
}

impl<T: Scalar> VisionEncoder<T> {
    pub(crate) fn random<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let pdim = cfg.patch * cfg.patch * cfg.channels;
        Self {
            cfg: cfg.clone(),
            patch_w: dense(d, pdim, rng),
            patch_b: Tensor::randn([d], 0.02, rng),
            pos: sinusoidal(cfg.patch_count(), d),
            blocks: (0..cfg.layers).map(|_| Block::random(d, cfg.mlp_hidden, rng)).collect(),
            proj: dense(cfg.embed_dim, d, rng),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_count(&self) -> usize {
        self.cfg.patch_count()
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.proj);
        v
    }

    pub fn bind(&self, g: &mut Graph<T>) -> VisionVars {
        VisionVars {
            patch_w: g.constant(self.patch_w.clone()),
            patch_b: g.constant(self.patch_b.clone()),
            pos: g.constant(self.pos.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            proj: g.constant(self.proj.clone()),
        }
    }

    pub fn check_peft(&self, peft: &PeftModule<T>) -> Result<()> {
        if peft.width() != self.cfg.width || peft.layers() != self.cfg.layers {
            return Err(Error::Config(format!(
                "PEFT module built for width {} / {} layers, encoder has width {} / {} layers",
                peft.width(),
                peft.layers(),
                self.cfg.width,
                self.cfg.layers
            )));
        }
        Ok(())
    }

    /// Splits an `h × w × c` image into `n × (p·p·c)` patch rows.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, c, p) = (self.cfg.image_size, self.cfg.channels, self.cfg.patch);
        if image.shape() != [s, s, c] {
            return Err(Error::Contract(format!(
                "image shape {:?} does not match configured {s}×{s}×{c}",
                image.shape()
            )));
        }
        let per_side = s / p;
        let pdim = p * p * c;
        let src = image.data();
        let mut out = Vec::with_capacity(per_side * per_side * pdim);
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..p {
                    let row = (py * p + dy) * s + px * p;
                    out.extend_from_slice(&src[row * c..(row + p) * c]);
                }
            }
        }
        Tensor::new([per_side * per_side, pdim], out)
    }

    /// Patch tokens after projection and position encoding, before any block.
    pub fn tokens(&self, g: &mut Graph<T>, vars: &VisionVars, image: &Tensor<T>) -> Result<Var> {
        let patches = g.constant(self.patchify(image)?);
        let x = g.matmul_nt(patches, vars.patch_w)?;
        let x = g.add_row(x, vars.patch_b)?;
        g.add(x, vars.pos)
    }

    /// Embeds one image as a `1 × d_e` row on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &VisionVars,
        image: &Tensor<T>,
        peft: Option<&PeftVars>,
    ) -> Result<Var> {
        let mut x = self.tokens(g, vars, image)?;
        let n = self.patch_count();
        for (l, bv) in vars.blocks.iter().enumerate() {
            let prompt = peft.and_then(|p| p.prompt(l));
            let lora = peft.and_then(|p| p.lora(l));
            let adapter = peft.and_then(|p| p.adapter(l));
            match prompt {
                Some(e) => {
                    let m3 = g.value(e).rows();
                    let xt = visual_prompt_apply(g, x, e)?;
                    let y = block_forward(g, bv, xt, lora, adapter)?;
                    x = g.slice_rows(y, m3, m3 + n)?;
                }
                None => x = block_forward(g, bv, x, lora, adapter)?,
            }
        }
        let pooled = g.mean_rows(x)?;
        let pooled = g.layernorm(pooled);
        g.matmul_nt(pooled, vars.proj)
    }

    /// Embeds a batch on `g`, stacking rows in input order.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        vars: &VisionVars,
        images: &[&Tensor<T>],
        peft: Option<&PeftVars>,
    ) -> Result<Var> {
        let rows = images
            .iter()
            .map(|im| self.forward(g, vars, im, peft))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// Inference-only embedding of one image.
    pub fn encode(&self, image: &Tensor<T>, peft: Option<&PeftModule<T>>) -> Result<Tensor<T>> {
        if let Some(p) = peft {
            self.check_peft(p)?;
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let pv = peft.map(|p| p.bind(&mut g));
        let e = self.forward(&mut g, &vars, image, pv.as_ref())?;
        Ok(g.value(e).clone())
    }

    /// Inference-only embeddings of many images as an `n × d_e` matrix.
    /// Rows are computed in parallel and kept in input order.
    pub fn encode_all(&self, images: &[Tensor<T>], peft: Option<&PeftModule<T>>) -> Result<Tensor<T>> {
        if let Some(p) = peft {
            self.check_peft(p)?;
        }
        let de = self.cfg.embed_dim;
        let chunks: Vec<Vec<T>> = images
            .par_chunks(16)
            .map(|chunk| {
                let mut g = Graph::new();
                let vars = self.bind(&mut g);
                let pv = peft.map(|p| p.bind(&mut g));
                let mut out = Vec::with_capacity(chunk.len() * de);
                for im in chunk {
                    let e = self.forward(&mut g, &vars, im, pv.as_ref())?;
                    out.extend_from_slice(g.value(e).data());
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Tensor::new([images.len(), de], chunks.concat())
    }
}
