//! Cluster learning: per-pair feature adaptation, then joint prompt
//! alignment through a shared autoencoder with reconstruction and
//! cross-bank consistency terms.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Config, DomainDataset, Reduction};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::peft::PeftModule;
use crate::prompt_bank::{
    encode_learnable, encode_prompt_matrix, learnable_matrix, PromptBank, PromptBankVars,
};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, Parameterized, Tensor, Var};

/// Logit rows over the `2K` prompts with their class ids (`0..K`).
#[derive(Clone, Copy, Debug)]
pub struct LabeledLogits<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
}

/// `−mean log P(y_s|x_s) − mean log P(ŷ_t|x_t)`; source labels index the
/// source rows, target labels the target rows. Either part may be absent
/// but not both.
pub fn feature_adaptation_loss<T: Scalar>(
    g: &mut Graph<T>,
    source: Option<LabeledLogits<'_>>,
    target: Option<LabeledLogits<'_>>,
    classes: usize,
) -> Result<Var> {
    let source = source.filter(|s| !s.labels.is_empty());
    let target = target.filter(|t| !t.labels.is_empty());
    if source.is_none() && target.is_none() {
        return Err(Error::Contract("feature adaptation loss on an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(2);
    for (part, offset) in [(source, 0), (target, classes)] {
        let Some(part) = part else { continue };
        if g.value(part.logits).cols() != 2 * classes {
            return Err(crate::error::shape_err(
                "feature_adaptation_loss",
                format!("logits {:?} for K={classes}", g.shape(part.logits)),
            ));
        }
        let idx: Vec<usize> = part.labels.iter().map(|&y| y + offset).collect();
        let ls = g.log_softmax(part.logits, 1)?;
        let picked = g.pick(ls, &idx)?;
        let m = g.mean(picked);
        terms.push(g.scale(m, -T::one()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Shared prompt autoencoder applied to every token vector:
/// `z = W1 p + b1`, `p̂ = W3 tanh(W2 z + b2) + b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, e1: usize, e2: usize, e3: usize, rng: &mut R) -> Result<Self> {
        if e3 != d {
            return Err(Error::Config(format!("e3={e3} must equal the token width {d}")));
        }
        if e1 == 0 || e2 == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        let dense = |o: usize, i: usize, rng: &mut R| Tensor::randn([o, i], 1.0 / (i as f64).sqrt(), rng).trainable();
        Ok(Self {
            w1: dense(e1, d, rng),
            b1: Tensor::zeros([e1]).trainable(),
            w2: dense(e2, e1, rng),
            b2: Tensor::zeros([e2]).trainable(),
            w3: dense(e3, e2, rng),
            b3: Tensor::zeros([e3]).trainable(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AeVars {
        AeVars {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
            w3: g.param(&self.w3),
            b3: g.param(&self.b3),
        }
    }

    pub fn accumulate_grads(&mut self, g: &Graph<T>, v: &AeVars) -> Result<()> {
        for (t, var) in [
            (&mut self.w1, v.w1),
            (&mut self.b1, v.b1),
            (&mut self.w2, v.w2),
            (&mut self.b2, v.b2),
            (&mut self.w3, v.w3),
            (&mut self.b3, v.b3),
        ] {
            if let (true, Some(gr)) = (t.requires_grad(), g.grad(var)) {
                t.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    pub fn grads_are_zero(&self) -> bool {
        let mut zero = true;
        self.visit(&mut |_, t| {
            if let Some(g) = t.grad() {
                zero &= g.iter().all(|v| *v == T::zero());
            }
        });
        zero
    }
}

impl<T: Scalar> Parameterized<T> for Autoencoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("ae.w1", &self.w1);
        f("ae.b1", &self.b1);
        f("ae.w2", &self.w2);
        f("ae.b2", &self.b2);
        f("ae.w3", &self.w3);
        f("ae.b3", &self.b3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("ae.w1", &mut self.w1);
        f("ae.b1", &mut self.b1);
        f("ae.w2", &mut self.w2);
        f("ae.b2", &mut self.b2);
        f("ae.w3", &mut self.w3);
        f("ae.b3", &mut self.b3);
    }
}

/// Projects token rows `n × d` into the latent space, `n × e1`.
pub fn ae_encode<T: Scalar>(g: &mut Graph<T>, v: &AeVars, p: Var) -> Result<Var> {
    let z = g.matmul_nt(p, v.w1)?;
    g.add_row(z, v.b1)
}

/// Maps latent rows back to token space, `n × e3`.
pub fn ae_decode<T: Scalar>(g: &mut Graph<T>, v: &AeVars, z: Var) -> Result<Var> {
    let h = g.matmul_nt(z, v.w2)?;
    let h = g.add_row(h, v.b2)?;
    let h = g.tanh(h);
    let o = g.matmul_nt(h, v.w3)?;
    g.add_row(o, v.b3)
}

pub fn ae_reconstruct<T: Scalar>(g: &mut Graph<T>, v: &AeVars, p: Var) -> Result<Var> {
    let z = ae_encode(g, v, p)?;
    ae_decode(g, v, z)
}

/// `(1/n) Σ_i ‖P̂_i − P_i‖²` over the `n` banks, or the per-entry mean
/// squared error under [`Reduction::Mean`].
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    originals: &[Var],
    recons: &[Var],
    reduction: Reduction,
) -> Result<Var> {
    if originals.is_empty() || originals.len() != recons.len() {
        return Err(Error::Contract(format!(
            "reconstruction loss over {} originals and {} reconstructions",
            originals.len(),
            recons.len()
        )));
    }
    let mut total = None;
    for (&p, &r) in originals.iter().zip(recons) {
        let d = g.sub(r, p)?;
        let sq = g.square(d);
        let e = match reduction {
            Reduction::Sum => g.sum(sq),
            Reduction::Mean => g.mean(sq),
        };
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, T::of(1.0 / originals.len() as f64)))
}

/// Cross-bank consistency on the target rows of `2K`-way probabilities.
///
/// `probs[i]` is bank `i`'s `n × 2K` probability matrix over the same
/// target samples. Per sample the pairwise absolute differences of the
/// pseudo-label entry are averaged over the `n(n−1)/2` bank pairs, then
/// over samples. `full` sums over every target entry instead. Returns
/// zero for fewer than two banks.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: &[Var],
    labels: &[usize],
    classes: usize,
    full: bool,
) -> Result<Var> {
    let n = probs.len();
    if n < 2 || labels.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let rows = labels.len();
    let picked: Vec<Var> = if full {
        let mask = Tensor::from_fn([rows, 2 * classes], |i| {
            if i % (2 * classes) >= classes {
                T::one()
            } else {
                T::zero()
            }
        });
        let mask = g.constant(mask);
        probs
            .iter()
            .map(|&p| g.mul(p, mask))
            .collect::<Result<_>>()?
    } else {
        let idx: Vec<usize> = labels.iter().map(|&k| k + classes).collect();
        probs
            .iter()
            .map(|&p| g.pick(p, &idx))
            .collect::<Result<_>>()?
    };
    let mut total = None;
    for i in 1..n {
        for j in 0..i {
            let d = g.sub(picked[i], picked[j])?;
            let a = g.abs(d);
            let s = g.sum(a);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
    }
    let pre = 2.0 / (n as f64 * (n as f64 - 1.0)) / rows as f64;
    Ok(g.scale(total.expect("n >= 2"), T::of(pre)))
}

/// Terms of the joint alignment objective plus the bank handles bound
/// while building it.
#[derive(Clone, Debug)]
pub struct AlignmentLoss {
    pub total: Var,
    pub cls: Var,
    pub ae: Var,
    pub l1: Var,
    pub bank_vars: Vec<PromptBankVars>,
}

/// Per-bank inputs for the joint objective: image embeddings of the
/// bank's source batch and the shared target batch.
#[derive(Clone, Copy, Debug)]
pub struct BankBatch<'a> {
    pub source_emb: Option<Var>,
    pub source_labels: &'a [usize],
}

/// `L_CLS + L_AE + α·L_1` with classification on reconstructed prompts.
///
/// `banks[i]` pairs with `batches[i]`; `target_emb`/`target_labels` are
/// shared. PEFT must not be bound as trainable on `g`.
#[allow(clippy::too_many_arguments)]
pub fn alignment_total_loss<T: Scalar>(
    g: &mut Graph<T>,
    enc: &DualEncoder<T>,
    banks: &[PromptBank<T>],
    ae: &AeVars,
    batches: &[BankBatch<'_>],
    target_emb: Option<Var>,
    target_labels: &[usize],
    alpha: f64,
    reduction: Reduction,
    l1_full: bool,
) -> Result<AlignmentLoss> {
    if banks.is_empty() || banks.len() != batches.len() {
        return Err(Error::Contract("one batch per prompt bank required".into()));
    }
    let k = enc.classes();
    let tv = enc.text().bind(g);
    let (mut originals, mut recons, mut cls, mut probs) = (vec![], vec![], vec![], vec![]);
    let mut bank_vars = Vec::with_capacity(banks.len());
    for (bank, batch) in banks.iter().zip(batches) {
        let bv = bank.bind(g, enc.text())?;
        let m = learnable_matrix(g, &bv)?;
        let r = ae_reconstruct(g, ae, m)?;
        let p_hat = encode_learnable(g, r, &bv, enc.text(), &tv)?;
        let src = match batch.source_emb {
            Some(e) => Some(LabeledLogits {
                logits: enc.head().logits(g, e, p_hat)?,
                labels: batch.source_labels,
            }),
            None => None,
        };
        let tgt = match target_emb {
            Some(e) => {
                let z = enc.head().logits(g, e, p_hat)?;
                probs.push(g.softmax(z, 1)?);
                Some(LabeledLogits {
                    logits: z,
                    labels: target_labels,
                })
            }
            None => None,
        };
        cls.push(feature_adaptation_loss(g, src, tgt, k)?);
        originals.push(m);
        recons.push(r);
        bank_vars.push(bv);
    }
    let mut l_cls = cls[0];
    for &c in &cls[1..] {
        l_cls = g.add(l_cls, c)?;
    }
    let l_cls = g.scale(l_cls, T::of(1.0 / cls.len() as f64));
    let l_ae = reconstruction_loss(g, &originals, &recons, reduction)?;
    let l1 = consistency_loss(g, &probs, target_labels, k, l1_full)?;
    let a = g.scale(l1, T::of(alpha));
    let t = g.add(l_cls, l_ae)?;
    let total = g.add(t, a)?;
    Ok(AlignmentLoss {
        total,
        cls: l_cls,
        ae: l_ae,
        l1,
        bank_vars,
    })
}

/// Every parameter adapted after source pretraining: one prompt bank per
/// pair, the shared visual PEFT module and the shared autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState<T> {
    pub banks: Vec<PromptBank<T>>,
    pub peft: PeftModule<T>,
    pub ae: Autoencoder<T>,
}

impl<T: Scalar> AdaptState<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &Config, pairs: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.encoder.width;
        let banks = (0..pairs)
            .map(|i| PromptBank::init(i, cfg.classes, cfg.m1, cfg.m2, d, rng))
            .collect::<Result<_>>()?;
        let peft = PeftModule::init(&cfg.peft(), cfg.encoder.layers, d, rng)?;
        let ae = Autoencoder::init(d, cfg.e1, cfg.e2, cfg.e3, rng)?;
        Ok(Self { banks, peft, ae })
    }
}

impl<T: Scalar> Parameterized<T> for AdaptState<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.banks.iter().for_each(|b| b.visit(f));
        self.peft.visit(f);
        self.ae.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.banks.iter_mut().for_each(|b| b.visit_mut(f));
        self.peft.visit_mut(f);
        self.ae.visit_mut(f);
    }
}

/// A target sample admitted to a stage pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetItem {
    /// Position in the target dataset.
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    pub rehearsed: bool,
}

/// Training data of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StagePool {
    /// Per pair: positions in that pair's source dataset.
    pub sources: Vec<Vec<usize>>,
    pub target: Vec<TargetItem>,
}

impl StagePool {
    pub fn is_empty(&self) -> bool {
        self.target.is_empty() && self.sources.iter().all(Vec::is_empty)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageContext {
    pub stage: usize,
    /// Classes of the cluster trained in this stage.
    pub active: Vec<usize>,
    pub pool: StagePool,
    pub alpha: f64,
}

/// One row of the metrics CSV. `pair` is `None` for joint rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: usize,
    pub epoch: usize,
    pub pair: Option<usize>,
    pub loss_cls: f64,
    pub loss_ae: f64,
    pub loss_l1: f64,
    pub total: f64,
}

fn chunk<'a, X>(items: &'a [X], step: usize, size: usize) -> &'a [X] {
    if items.is_empty() {
        return items;
    }
    let chunks = items.len().div_ceil(size);
    let c = step % chunks;
    &items[c * size..((c + 1) * size).min(items.len())]
}

fn steps_per_epoch(pool: &StagePool, batch: usize) -> usize {
    pool.sources
        .iter()
        .map(Vec::len)
        .chain([pool.target.len()])
        .map(|n| n.div_ceil(batch))
        .max()
        .unwrap_or(0)
        .max(1)
}

fn gather<T: Scalar>(emb: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let d = emb.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(emb.row(r));
    }
    Tensor::new([rows.len(), d], data)
}

/// Trains one curriculum stage: feature adaptation of banks and shared
/// PEFT, then joint alignment of banks and autoencoder with PEFT frozen.
/// Returns per-epoch metric rows.
pub fn run_stage<T: Scalar>(
    ctx: &StageContext,
    enc: &DualEncoder<T>,
    sources: &[DomainDataset<T>],
    target: &DomainDataset<T>,
    state: &mut AdaptState<T>,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricRow>> {
    if ctx.pool.is_empty() {
        log::warn!("stage {}: empty training pool, skipping", ctx.stage);
        return Ok(Vec::new());
    }
    let pairs = state.banks.len();
    if sources.len() != pairs || ctx.pool.sources.len() != pairs {
        return Err(Error::Contract(format!(
            "{pairs} prompt banks but {} sources / {} pool sources",
            sources.len(),
            ctx.pool.sources.len()
        )));
    }
    let mut rows = feature_adaptation_step(ctx, enc, sources, target, state, cfg, rng)?;
    rows.extend(alignment_step(ctx, enc, sources, target, state, cfg, rng)?);
    Ok(rows)
}

fn source_labels<T>(ds: &DomainDataset<T>) -> Result<&[usize]> {
    ds.labels
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("source domain {} has no labels", ds.domain)))
}

fn feature_adaptation_step<T: Scalar>(
    ctx: &StageContext,
    enc: &DualEncoder<T>,
    sources: &[DomainDataset<T>],
    target: &DomainDataset<T>,
    state: &mut AdaptState<T>,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricRow>> {
    let pairs = state.banks.len();
    let k = enc.classes();
    state.banks.iter_mut().for_each(|b| b.set_trainable(true));
    state.peft.set_trainable(true);
    state.ae.set_trainable(false);
    let b = cfg.batch_size;
    let steps = steps_per_epoch(&ctx.pool, b);
    let mut opt = Adam::new(AdamConfig::new(
        cfg.lr_max,
        cfg.lr_min,
        (steps * cfg.step1_epochs) as u64,
    ));
    let mut src_order = ctx.pool.sources.clone();
    let mut tgt_order = ctx.pool.target.clone();
    let mut rows = Vec::new();
    for epoch in 0..cfg.step1_epochs {
        src_order.iter_mut().for_each(|o| o.shuffle(rng));
        tgt_order.shuffle(rng);
        let mut sums = vec![0.0; pairs];
        for s in 0..steps {
            let mut g = Graph::new();
            let vv = enc.vision().bind(&mut g);
            let pv = state.peft.bind(&mut g);
            let tv = enc.text().bind(&mut g);
            let tb = chunk(&tgt_order, s, b);
            let t_labels: Vec<usize> = tb.iter().map(|t| t.label).collect();
            let t_emb = if tb.is_empty() {
                None
            } else {
                let imgs: Vec<_> = tb.iter().map(|t| &target.samples[t.index]).collect();
                Some(enc.vision().forward_batch(&mut g, &vv, &imgs, Some(&pv))?)
            };
            let mut bank_vars = Vec::with_capacity(pairs);
            let mut total = None;
            for i in 0..pairs {
                let bv = state.banks[i].bind(&mut g, enc.text())?;
                let p = encode_prompt_matrix(&mut g, &bv, enc.text(), &tv)?;
                let sb = chunk(&src_order[i], s, b);
                let all_labels = source_labels(&sources[i])?;
                let s_labels: Vec<usize> = sb.iter().map(|&j| all_labels[j]).collect();
                let src = if sb.is_empty() {
                    None
                } else {
                    let imgs: Vec<_> = sb.iter().map(|&j| &sources[i].samples[j]).collect();
                    let e = enc.vision().forward_batch(&mut g, &vv, &imgs, Some(&pv))?;
                    Some(LabeledLogits {
                        logits: enc.head().logits(&mut g, e, p)?,
                        labels: &s_labels,
                    })
                };
                let tgt = match t_emb {
                    Some(e) => Some(LabeledLogits {
                        logits: enc.head().logits(&mut g, e, p)?,
                        labels: &t_labels,
                    }),
                    None => None,
                };
                if src.is_none() && tgt.is_none() {
                    bank_vars.push(bv);
                    continue;
                }
                let l = feature_adaptation_loss(&mut g, src, tgt, k)?;
                sums[i] += g.value(l).item().as_f64();
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
                bank_vars.push(bv);
            }
            let Some(total) = total else { continue };
            g.backward(total)?;
            for (bank, bv) in state.banks.iter_mut().zip(&bank_vars) {
                bank.accumulate_grads(&g, bv)?;
            }
            state.peft.accumulate_grads(&g, &pv)?;
            {
                let AdaptState { banks, peft, .. } = state;
                let mut groups: Vec<&mut dyn Parameterized<T>> =
                    banks.iter_mut().map(|b| b as &mut dyn Parameterized<T>).collect();
                groups.push(peft);
                opt.step(&mut groups)?;
            }
            state.banks.iter_mut().for_each(|b| b.zero_grad());
            state.peft.zero_grad();
        }
        for (i, sum) in sums.iter().enumerate() {
            let l = sum / steps as f64;
            rows.push(MetricRow {
                stage: ctx.stage,
                epoch,
                pair: Some(i),
                loss_cls: l,
                loss_ae: 0.0,
                loss_l1: 0.0,
                total: l,
            });
        }
    }
    Ok(rows)
}

fn alignment_step<T: Scalar>(
    ctx: &StageContext,
    enc: &DualEncoder<T>,
    sources: &[DomainDataset<T>],
    target: &DomainDataset<T>,
    state: &mut AdaptState<T>,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricRow>> {
    let pairs = state.banks.len();
    state.peft.set_trainable(false);
    state.ae.set_trainable(true);
    state.banks.iter_mut().for_each(|b| b.set_trainable(true));
    let frozen = state.peft.checksum();

    // PEFT is frozen for the whole step, so image embeddings are cached.
    let src_emb = (0..pairs)
        .map(|i| {
            let imgs: Vec<Tensor<T>> = ctx.pool.sources[i]
                .iter()
                .map(|&j| sources[i].samples[j].clone())
                .collect();
            enc.vision().encode_all(&imgs, Some(&state.peft))
        })
        .collect::<Result<Vec<_>>>()?;
    let tgt_imgs: Vec<Tensor<T>> = ctx
        .pool
        .target
        .iter()
        .map(|t| target.samples[t.index].clone())
        .collect();
    let tgt_emb = enc.vision().encode_all(&tgt_imgs, Some(&state.peft))?;

    let b = cfg.batch_size;
    let steps = steps_per_epoch(&ctx.pool, b);
    let mut opt = Adam::new(AdamConfig::new(
        cfg.lr_max,
        cfg.lr_min,
        (steps * cfg.step2_epochs) as u64,
    ));
    // positions into the cached embedding matrices
    let mut src_order: Vec<Vec<usize>> = ctx.pool.sources.iter().map(|s| (0..s.len()).collect()).collect();
    let mut tgt_order: Vec<usize> = (0..ctx.pool.target.len()).collect();
    let mut rows = Vec::new();
    for e in 0..cfg.step2_epochs {
        src_order.iter_mut().for_each(|o| o.shuffle(rng));
        tgt_order.shuffle(rng);
        let (mut c_sum, mut a_sum, mut l_sum, mut t_sum) = (0.0, 0.0, 0.0, 0.0);
        for s in 0..steps {
            let mut g = Graph::new();
            let av = state.ae.bind(&mut g);
            let tb = chunk(&tgt_order, s, b);
            let t_labels: Vec<usize> = tb.iter().map(|&j| ctx.pool.target[j].label).collect();
            let t_emb = if tb.is_empty() {
                None
            } else {
                Some(g.constant(gather(&tgt_emb, tb)?))
            };
            let mut s_labels = Vec::with_capacity(pairs);
            let mut s_embs = Vec::with_capacity(pairs);
            for i in 0..pairs {
                let sb = chunk(&src_order[i], s, b);
                let all = source_labels(&sources[i])?;
                s_labels.push(sb.iter().map(|&j| all[ctx.pool.sources[i][j]]).collect::<Vec<_>>());
                s_embs.push(if sb.is_empty() {
                    None
                } else {
                    Some(g.constant(gather(&src_emb[i], sb)?))
                });
            }
            let batches: Vec<BankBatch<'_>> = (0..pairs)
                .map(|i| BankBatch {
                    source_emb: s_embs[i],
                    source_labels: &s_labels[i],
                })
                .collect();
            let loss = alignment_total_loss(
                &mut g,
                enc,
                &state.banks,
                &av,
                &batches,
                t_emb,
                &t_labels,
                ctx.alpha,
                cfg.ae_reduction,
                cfg.l1_full,
            )?;
            g.backward(loss.total)?;
            c_sum += g.value(loss.cls).item().as_f64();
            a_sum += g.value(loss.ae).item().as_f64();
            l_sum += g.value(loss.l1).item().as_f64();
            t_sum += g.value(loss.total).item().as_f64();
            for (bank, bv) in state.banks.iter_mut().zip(&loss.bank_vars) {
                bank.accumulate_grads(&g, bv)?;
            }
            state.ae.accumulate_grads(&g, &av)?;
            if !state.peft.grads_are_zero() {
                return Err(Error::Invariant(format!(
                    "stage {}: PEFT received gradients while frozen",
                    ctx.stage
                )));
            }
            {
                let AdaptState { banks, ae, .. } = state;
                let mut groups: Vec<&mut dyn Parameterized<T>> =
                    banks.iter_mut().map(|b| b as &mut dyn Parameterized<T>).collect();
                groups.push(ae);
                opt.step(&mut groups)?;
            }
            state.banks.iter_mut().for_each(|b| b.zero_grad());
            state.ae.zero_grad();
        }
        let n = steps as f64;
        rows.push(MetricRow {
            stage: ctx.stage,
            epoch: cfg.step1_epochs + e,
            pair: None,
            loss_cls: c_sum / n,
            loss_ae: a_sum / n,
            loss_l1: l_sum / n,
            total: t_sum / n,
        });
    }
    if state.peft.checksum() != frozen {
        return Err(Error::Invariant(format!(
            "stage {}: PEFT parameters changed during the alignment step",
            ctx.stage
        )));
    }
    state.peft.set_trainable(true);
    Ok(rows)
}
