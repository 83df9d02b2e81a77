//! Frozen toy dual-encoder: a small vision transformer, a small text
//! transformer over prompt tokens, and the temperature-scaled cosine
//! similarity head.

mod block;
mod text;
mod vision;

pub use text::{TextEncoder, TextVars};
pub use vision::{VisionEncoder, VisionVars};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{checksum, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token width `d`.
    pub width: usize,
    /// Vision transformer depth `L`.
    pub layers: usize,
    pub text_layers: usize,
    pub mlp_hidden: usize,
    /// Shared embedding width `d_e`.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 4,
            width: 32,
            layers: 2,
            text_layers: 2,
            mlp_hidden: 64,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn patch_count(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.width == 0 || self.embed_dim == 0 || self.layers == 0 || self.channels == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Temperature-scaled softmax over cosine similarities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityHead {
    temperature: f64,
}

impl Default for SimilarityHead {
    fn default() -> Self {
        Self { temperature: 0.01 }
    }
}

impl SimilarityHead {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Validation {
                key: "temperature".into(),
                reason: format!("{temperature} must be a positive finite value"),
            });
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `cos(img_b, txt_r) / 𝒯` for every image row `b` and prompt row `r`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, images: Var, prompts: Var) -> Result<Var> {
        let a = g.normalize_rows(images)?;
        let b = g.normalize_rows(prompts)?;
        let s = g.matmul_nt(a, b)?;
        Ok(g.scale(s, T::of(1.0 / self.temperature)))
    }
}

/// Probability of every prompt row for every image row.
///
/// `prompt_embs` is ordered source classes `0..K` then target classes `0..K`.
pub fn class_probabilities<T: Scalar>(
    image_emb: &Tensor<T>,
    prompt_embs: &Tensor<T>,
    head: &SimilarityHead,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let img = g.constant(image_emb.clone());
    let img = g.reshape(img, [image_emb.numel() / image_emb.cols(), image_emb.cols()])?;
    let txt = g.constant(prompt_embs.clone());
    let z = head.logits(&mut g, img, txt)?;
    let p = g.softmax(z, 1)?;
    Ok(g.value(p).clone())
}

/// The frozen vision and text encoders plus the similarity head.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<T> {
    vision: VisionEncoder<T>,
    text: TextEncoder<T>,
    head: SimilarityHead,
}

impl<T: Scalar> DualEncoder<T> {
    /// Random frozen weights drawn from `cfg.seed`.
    pub fn new(cfg: &EncoderConfig, classes: usize, seq_len: usize, head: SimilarityHead) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 || seq_len == 0 {
            return Err(Error::Config("encoder needs at least one class and one token".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let vision = VisionEncoder::random(cfg, &mut rng);
        let text = TextEncoder::random(cfg, classes, seq_len, &mut rng);
        Ok(Self { vision, text, head })
    }

    /// Builds the encoder and calibrates its text projection so that a
    /// neutral prompt for class `k` (zero context and domain tokens)
    /// embeds onto the mean image embedding of the class-`k` anchors.
    ///
    /// This stands in for contrastive pretraining: it gives the toy
    /// model a meaningful zero-shot classifier before any adaptation.
    pub fn pretrained(
        cfg: &EncoderConfig,
        classes: usize,
        seq_len: usize,
        head: SimilarityHead,
        anchors: &[Tensor<T>],
        anchor_labels: &[usize],
    ) -> Result<Self> {
        let mut enc = Self::new(cfg, classes, seq_len, head)?;
        if anchors.is_empty() {
            return Ok(enc);
        }
        if anchors.len() != anchor_labels.len() {
            return Err(Error::Contract("anchor images and labels differ in length".into()));
        }
        let emb = enc.vision.encode_all(anchors, None)?;
        let de = cfg.embed_dim;
        let mut means = vec![vec![0.0f64; de]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &k) in anchor_labels.iter().enumerate() {
            if k >= classes {
                return Err(Error::Contract(format!("anchor label {k} outside 0..{classes}")));
            }
            let row = emb.row(i);
            let nrm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
            for (m, v) in means[k].iter_mut().zip(row) {
                *m += v.as_f64() / nrm;
            }
            counts[k] += 1;
        }
        let features = (0..classes)
            .map(|k| enc.neutral_features(k))
            .collect::<Result<Vec<_>>>()?;
        let proj = fit_projection(&enc.text.proj, &features, &means, &counts)?;
        enc.text.proj = proj;
        Ok(enc)
    }

    fn neutral_features(&self, k: usize) -> Result<Vec<f64>> {
        let d = self.text.width();
        let mut g = Graph::new();
        let vars = self.text.bind(&mut g);
        let ctx = g.constant(Tensor::zeros([self.text.seq_len() - 1, d]));
        let cls = g.constant(self.text.class_token(k)?);
        let seq = g.concat_rows(&[ctx, cls])?;
        let f = self.text.features(&mut g, &vars, seq)?;
        Ok(g.value(f).data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn vision(&self) -> &VisionEncoder<T> {
        &self.vision
    }

    pub fn text(&self) -> &TextEncoder<T> {
        &self.text
    }

    pub fn head(&self) -> &SimilarityHead {
        &self.head
    }

    pub fn classes(&self) -> usize {
        self.text.classes()
    }

    /// Digest of every frozen weight.
    pub fn checksum(&self) -> String {
        let mut all = self.vision.tensors();
        all.extend(self.text.tensors());
        checksum(all)
    }
}

/// Ridge update `W = W0 + ΔW` so that `W·h_k ≈ s·m̂_k` for classes with
/// anchors, where `s` keeps the output scale of `W0`.
fn fit_projection<T: Scalar>(
    w0: &Tensor<T>,
    features: &[Vec<f64>],
    means: &[Vec<f64>],
    counts: &[usize],
) -> Result<Tensor<T>> {
    let (de, d) = (w0.rows(), w0.cols());
    let used: Vec<usize> = (0..features.len()).filter(|&k| counts[k] > 0).collect();
    let kk = used.len();
    let w = |i: usize, j: usize| w0.at(i, j).as_f64();
    let base: Vec<Vec<f64>> = used
        .iter()
        .map(|&k| (0..de).map(|i| (0..d).map(|j| w(i, j) * features[k][j]).sum()).collect())
        .collect();
    let scale = base
        .iter()
        .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / kk as f64;
    // residual R (kk × de): target minus current output
    let resid: Vec<Vec<f64>> = used
        .iter()
        .zip(&base)
        .map(|(&k, b)| {
            let nrm = means[k].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            (0..de).map(|i| scale * means[k][i] / nrm - b[i]).collect()
        })
        .collect();
    // Gram G = HᵀH + λI (kk × kk)
    let mut gram = vec![0.0; kk * kk];
    for a in 0..kk {
        for b in 0..kk {
            gram[a * kk + b] = features[used[a]].iter().zip(&features[used[b]]).map(|(x, y)| x * y).sum();
        }
    }
    let lambda = 1e-6 * (0..kk).map(|a| gram[a * kk + a]).sum::<f64>() / kk as f64;
    for a in 0..kk {
        gram[a * kk + a] += lambda;
    }
    // coefficients C = G⁻¹ R (kk × de); ΔW = Cᵀ Hᵀ
    let rhs: Vec<f64> = resid.iter().flatten().copied().collect();
    let coef = solve(gram, rhs, kk, de)?;
    let mut out = w0.clone();
    for i in 0..de {
        for j in 0..d {
            let delta: f64 = (0..kk).map(|a| coef[a * de + i] * features[used[a]][j]).sum();
            out.data_mut()[i * d + j] = T::of(w(i, j) + delta);
        }
    }
    Ok(out)
}

/// Solves `A X = B` for `A: n×n`, `B: n×m` by Gaussian elimination.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Result<Vec<f64>> {
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .unwrap_or(c);
        if a[p * n + c].abs() < 1e-300 {
            return Err(Error::Numeric {
                op: "solve",
                detail: "singular system".into(),
            });
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
            for k in 0..m {
                b.swap(p * m + k, c * m + k);
            }
        }
        for r in 0..n {
            if r == c {
                continue;
            }
            let f = a[r * n + c] / a[c * n + c];
            if f == 0.0 {
                continue;
            }
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[c * m + k];
            }
        }
    }
    for r in 0..n {
        let piv = a[r * n + r];
        for k in 0..m {
            b[r * m + k] /= piv;
        }
    }
    Ok(b)
}
