//! Learnable textual prompts for one source–target pair: class-specific
//! context tokens and per-domain tokens, assembled into `2K` prompts.

use rand::Rng;

use crate::encoders::{TextEncoder, TextVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Parameterized, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// Prompt parameters owned by pair `pair` (0-based).
///
/// Prompt rows are ordered source classes `0..K` followed by target
/// classes `0..K`; each prompt is `[context; domain; class token]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<T> {
    pair: usize,
    /// `K × M1 × d`
    pub context: Tensor<T>,
    /// `M2 × d`
    pub source_domain: Tensor<T>,
    /// `M2 × d`
    pub target_domain: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PromptBankVars {
    context_leaf: Var,
    context: Var,
    source_domain: Var,
    target_domain: Var,
    class_tokens: Vec<Var>,
    classes: usize,
    m1: usize,
    m2: usize,
}

impl PromptBankVars {
    /// Frozen class-token leaf for class `k`.
    pub fn class_token(&self, k: usize) -> Var {
        self.class_tokens[k]
    }
}

impl<T: Scalar> PromptBank<T> {
    pub fn init<R: Rng + ?Sized>(
        pair: usize,
        classes: usize,
        m1: usize,
        m2: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || m1 == 0 || m2 == 0 {
            return Err(Error::Config("prompt bank needs K, M1, M2 >= 1".into()));
        }
        Ok(Self {
            pair,
            context: Tensor::randn([classes, m1, width], INIT_STD, rng).trainable(),
            source_domain: Tensor::randn([m2, width], INIT_STD, rng).trainable(),
            target_domain: Tensor::randn([m2, width], INIT_STD, rng).trainable(),
        })
    }

    pub fn pair(&self) -> usize {
        self.pair
    }

    pub fn classes(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn m1(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn m2(&self) -> usize {
        self.source_domain.rows()
    }

    pub fn width(&self) -> usize {
        self.source_domain.cols()
    }

    /// Learnable tokens per prompt.
    pub fn tokens_per_prompt(&self) -> usize {
        self.m1() + self.m2()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }

    pub fn bind(&self, g: &mut Graph<T>, text: &TextEncoder<T>) -> Result<PromptBankVars> {
        let (k, m1, d) = (self.classes(), self.m1(), self.width());
        if text.classes() != k || text.width() != d || text.seq_len() != m1 + self.m2() + 1 {
            return Err(Error::Config(format!(
                "prompt bank (K={k}, M1={m1}, M2={}, d={d}) does not fit the text encoder \
                 (K={}, seq={}, d={})",
                self.m2(),
                text.classes(),
                text.seq_len(),
                text.width()
            )));
        }
        let ctx = g.param(&self.context);
        let context = g.reshape(ctx, [k * m1, d])?;
        let class_tokens = (0..k)
            .map(|c| Ok(g.constant(text.class_token(c)?)))
            .collect::<Result<_>>()?;
        Ok(PromptBankVars {
            context_leaf: ctx,
            context,
            source_domain: g.param(&self.source_domain),
            target_domain: g.param(&self.target_domain),
            class_tokens,
            classes: k,
            m1,
            m2: self.m2(),
        })
    }

    /// Pulls graph gradients into the owned tensors.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &PromptBankVars) -> Result<()> {
        if let Some(gr) = g.grad(vars.context_leaf) {
            if self.context.requires_grad() {
                self.context.accumulate_grad(gr)?;
            }
        }
        if let Some(gr) = g.grad(vars.source_domain) {
            if self.source_domain.requires_grad() {
                self.source_domain.accumulate_grad(gr)?;
            }
        }
        if let Some(gr) = g.grad(vars.target_domain) {
            if self.target_domain.requires_grad() {
                self.target_domain.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    /// Inference-only prompt embedding matrix, `2K × d_e`.
    pub fn prompt_embeddings(&self, text: &TextEncoder<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let tv = text.bind(&mut g);
        let bv = self.bind(&mut g, text)?;
        let e = encode_prompt_matrix(&mut g, &bv, text, &tv)?;
        Ok(g.value(e).clone())
    }
}

impl<T: Scalar> Parameterized<T> for PromptBank<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("pair{}.V", self.pair), &self.context);
        f(&format!("pair{}.Ds", self.pair), &self.source_domain);
        f(&format!("pair{}.Dt", self.pair), &self.target_domain);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("pair{}.V", self.pair), &mut self.context);
        f(&format!("pair{}.Ds", self.pair), &mut self.source_domain);
        f(&format!("pair{}.Dt", self.pair), &mut self.target_domain);
    }
}

/// Token sequence `[v_1^k … v_M1^k, d_1 … d_M2, class_k]` for class `k`.
pub fn assemble_prompt<T: Scalar>(
    g: &mut Graph<T>,
    vars: &PromptBankVars,
    class: usize,
    domain: Domain,
) -> Result<Var> {
    if class >= vars.classes {
        return Err(Error::Contract(format!(
            "class id {class} outside 0..{}",
            vars.classes
        )));
    }
    let m1 = vars.m1;
    let ctx = g.slice_rows(vars.context, class * m1, (class + 1) * m1)?;
    let dom = match domain {
        Domain::Source => vars.source_domain,
        Domain::Target => vars.target_domain,
    };
    g.concat_rows(&[ctx, dom, vars.class_tokens[class]])
}

/// Learnable tokens of all `2K` prompts stacked row-wise:
/// `2K·(M1+M2) × d`, prompt-major in prompt-row order.
pub fn learnable_matrix<T: Scalar>(g: &mut Graph<T>, vars: &PromptBankVars) -> Result<Var> {
    let m1 = vars.m1;
    let mut parts = Vec::with_capacity(4 * vars.classes);
    for dom in [vars.source_domain, vars.target_domain] {
        for k in 0..vars.classes {
            parts.push(g.slice_rows(vars.context, k * m1, (k + 1) * m1)?);
            parts.push(dom);
        }
    }
    g.concat_rows(&parts)
}

/// Encodes every prompt of a learnable matrix (as produced by
/// [`learnable_matrix`], possibly transformed) into a `2K × d_e` matrix.
pub fn encode_learnable<T: Scalar>(
    g: &mut Graph<T>,
    matrix: Var,
    vars: &PromptBankVars,
    text: &TextEncoder<T>,
    tvars: &TextVars,
) -> Result<Var> {
    let per = vars.m1 + vars.m2;
    let k = vars.classes;
    let mut rows = Vec::with_capacity(2 * k);
    for r in 0..2 * k {
        let toks = g.slice_rows(matrix, r * per, (r + 1) * per)?;
        let seq = g.concat_rows(&[toks, vars.class_tokens[r % k]])?;
        rows.push(text.forward(g, tvars, seq)?);
    }
    g.concat_rows(&rows)
}

/// Prompt embedding matrix `P_i`: rows are source classes then target classes.
pub fn encode_prompt_matrix<T: Scalar>(
    g: &mut Graph<T>,
    vars: &PromptBankVars,
    text: &TextEncoder<T>,
    tvars: &TextVars,
) -> Result<Var> {
    let m = learnable_matrix(g, vars)?;
    encode_learnable(g, m, vars, text, tvars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{DualEncoder, EncoderConfig, SimilarityHead};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, m1: usize, m2: usize) -> (DualEncoder<f64>, PromptBank<f64>) {
        let cfg = EncoderConfig {
            width: 8,
            embed_dim: 6,
            mlp_hidden: 12,
            ..EncoderConfig::default()
        };
        let enc = DualEncoder::new(&cfg, k, m1 + m2 + 1, SimilarityHead::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = PromptBank::init(0, k, m1, m2, 8, &mut rng).unwrap();
        (enc, bank)
    }

    #[test]
    fn sequence_length_and_domain_positions() {
        let (enc, bank) = setup(3, 12, 12);
        let mut g = Graph::new();
        let bv = bank.bind(&mut g, enc.text()).unwrap();
        let s = assemble_prompt(&mut g, &bv, 1, Domain::Source).unwrap();
        let t = assemble_prompt(&mut g, &bv, 1, Domain::Target).unwrap();
        assert_eq!(g.shape(s), &[25, 8]);
        let (a, b) = (g.value(s).clone(), g.value(t).clone());
        for r in 0..25 {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, !(12..24).contains(&r), "row {r}");
        }
        assert!(matches!(
            assemble_prompt(&mut g, &bv, 3, Domain::Source),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompt_matrix_has_2k_rows_and_is_deterministic() {
        let (enc, bank) = setup(4, 2, 2);
        let p1 = bank.prompt_embeddings(enc.text()).unwrap();
        let p2 = bank.prompt_embeddings(enc.text()).unwrap();
        assert_eq!(p1.shape(), &[8, 6]);
        assert_eq!(p1, p2);
        // shared context, distinct domain tokens
        assert_ne!(p1.row(1), p1.row(5));
    }

    #[test]
    fn parameter_count() {
        let (_, bank) = setup(4, 3, 2);
        assert_eq!(bank.param_count(), 4 * 3 * 8 + 2 * 2 * 8);
    }

    #[test]
    fn matrix_rows_follow_prompt_order() {
        let (enc, bank) = setup(2, 2, 1);
        let mut g = Graph::new();
        let bv = bank.bind(&mut g, enc.text()).unwrap();
        let m = learnable_matrix(&mut g, &bv).unwrap();
        let v = g.value(m).clone();
        assert_eq!(v.shape(), &[4 * 3, 8]);
        // target prompt of class 1 starts at row 3·3, context first
        assert_eq!(v.row(9), &bank.context.data()[2 * 8..3 * 8]);
        assert_eq!(v.row(11), bank.target_domain.row(0));
    }
}
