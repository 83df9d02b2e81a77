//! Source-only models and their ensemble vote over target samples.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::alignment::{feature_adaptation_loss, LabeledLogits};
use crate::data_io::{Checkpoint, Config, DomainDataset};
use crate::encoders::{class_probabilities, DualEncoder};
use crate::error::{Error, Result};
use crate::peft::PeftModule;
use crate::prompt_bank::{encode_prompt_matrix, PromptBank};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, Parameterized, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteRule {
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "majority")]
    Majority,
}

impl fmt::Display for VoteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteRule::Average => "avg",
            VoteRule::Majority => "majority",
        })
    }
}

impl FromStr for VoteRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" => Ok(VoteRule::Average),
            "majority" => Ok(VoteRule::Majority),
            _ => Err(Error::Validation {
                key: "vote".into(),
                reason: format!("expected avg|majority, got {s:?}"),
            }),
        }
    }
}

/// Where a pseudo-label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Ensemble,
    /// Regenerated after training stage `j` (0-based).
    Refined(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Ensemble => f.write_str("ensemble"),
            Origin::Refined(j) => write!(f, "refined@{j}"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            return Ok(Origin::Ensemble);
        }
        s.strip_prefix("refined@")
            .and_then(|j| j.parse().ok())
            .map(Origin::Refined)
            .ok_or_else(|| Error::Validation {
                key: "origin".into(),
                reason: format!("unrecognized origin {s:?}"),
            })
    }
}

impl Serialize for Origin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: u32,
    pub label: usize,
    pub confidence: f64,
    pub origin: Origin,
    /// `confidence > τ` at creation.
    pub accepted: bool,
}

impl PseudoLabelRecord {
    pub fn new(sample_id: u32, vote: Vote, origin: Origin, tau: f64) -> Self {
        Self {
            sample_id,
            label: vote.label,
            confidence: vote.confidence,
            origin,
            accepted: vote.confidence > tau,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote {
    pub label: usize,
    pub confidence: f64,
}

/// Max-subtracted softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_votes(probs: &[&[f64]]) -> Result<usize> {
    let Some(first) = probs.first() else {
        return Err(Error::Contract("vote needs at least one model".into()));
    };
    let k = first.len();
    if k == 0 || probs.iter().any(|p| p.len() != k) {
        return Err(Error::Contract("vote rows must share a positive class count".into()));
    }
    Ok(k)
}

fn mean_probs(probs: &[&[f64]], k: usize) -> Vec<f64> {
    let n = probs.len() as f64;
    (0..k).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / n).collect()
}

/// Label = argmax of the mean probability vector (lowest index on ties);
/// confidence = that mean.
pub fn average_confidence_vote(probs: &[&[f64]]) -> Result<Vote> {
    let k = check_votes(probs)?;
    let mean = mean_probs(probs, k);
    let label = argmax(&mean);
    Ok(Vote {
        label,
        confidence: mean[label],
    })
}

/// Label = most frequent per-model argmax; ties go to the highest mean
/// probability, then the lowest index. Confidence = mean probability of
/// the winner.
pub fn majority_vote(probs: &[&[f64]]) -> Result<Vote> {
    let k = check_votes(probs)?;
    let mean = mean_probs(probs, k);
    let mut counts = vec![0usize; k];
    for p in probs {
        counts[argmax(p)] += 1;
    }
    let mut label = 0;
    for c in 1..k {
        if counts[c] > counts[label] || (counts[c] == counts[label] && mean[c] > mean[label]) {
            label = c;
        }
    }
    Ok(Vote {
        label,
        confidence: mean[label],
    })
}

pub fn vote(rule: VoteRule, probs: &[&[f64]]) -> Result<Vote> {
    match rule {
        VoteRule::Average => average_confidence_vote(probs),
        VoteRule::Majority => majority_vote(probs),
    }
}

/// Softmaxes each model's logits, then votes.
pub fn vote_logits(rule: VoteRule, logits: &[&[f64]]) -> Result<Vote> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    vote(rule, &refs)
}

/// A model adapted on one labeled source only; used once for labeling.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel<T> {
    pub domain: usize,
    pub bank: PromptBank<T>,
    pub peft: PeftModule<T>,
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub source_accuracy: f64,
}

impl<T: Scalar> SourceModel<T> {
    /// `n × K` class probabilities from the source-domain prompt rows.
    pub fn probabilities(&self, enc: &DualEncoder<T>, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let emb = enc.vision().encode_all(images, Some(&self.peft))?;
        let p = self.bank.prompt_embeddings(enc.text())?;
        let k = self.bank.classes();
        let src = Tensor::new([k, p.cols()], p.data()[..k * p.cols()].to_vec())?;
        class_probabilities(&emb, &src, enc.head())
    }
}

/// Fits a prompt bank and PEFT module on one labeled source with
/// cross-entropy over its source-domain prompt rows.
pub fn train_source_model<T: Scalar>(
    enc: &DualEncoder<T>,
    source: &DomainDataset<T>,
    cfg: &Config,
    seed: u64,
) -> Result<SourceModel<T>> {
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("source domain {} is unlabeled", source.domain)))?;
    if source.is_empty() {
        return Err(Error::Contract(format!("source domain {} is empty", source.domain)));
    }
    let k = enc.classes();
    let d = cfg.encoder.width;
    let mut rng = stream_rng(seed, 1000 + source.domain as u64);
    let mut bank = PromptBank::init(source.domain, k, cfg.m1, cfg.m2, d, &mut rng)?;
    let mut peft = PeftModule::init(&cfg.peft(), cfg.encoder.layers, d, &mut rng)?;
    let b = cfg.batch_size;
    let steps = source.len().div_ceil(b);
    let mut opt = Adam::new(AdamConfig::new(
        cfg.lr_max,
        cfg.lr_min,
        (steps * cfg.source_epochs) as u64,
    ));
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.source_epochs);
    for _ in 0..cfg.source_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(b) {
            let mut g = Graph::new();
            let vv = enc.vision().bind(&mut g);
            let pv = peft.bind(&mut g);
            let tv = enc.text().bind(&mut g);
            let bv = bank.bind(&mut g, enc.text())?;
            let p = encode_prompt_matrix(&mut g, &bv, enc.text(), &tv)?;
            let imgs: Vec<_> = batch.iter().map(|&i| &source.samples[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let e = enc.vision().forward_batch(&mut g, &vv, &imgs, Some(&pv))?;
            let z = enc.head().logits(&mut g, e, p)?;
            let l = feature_adaptation_loss(&mut g, Some(LabeledLogits { logits: z, labels: &ys }), None, k)?;
            sum += g.value(l).item().as_f64();
            g.backward(l)?;
            bank.accumulate_grads(&g, &bv)?;
            peft.accumulate_grads(&g, &pv)?;
            opt.step(&mut [&mut bank, &mut peft])?;
            bank.zero_grad();
            peft.zero_grad();
        }
        loss_curve.push(sum / steps as f64);
    }
    bank.set_trainable(false);
    peft.set_trainable(false);
    let mut model = SourceModel {
        domain: source.domain,
        bank,
        peft,
        epochs: cfg.source_epochs,
        loss_curve,
        source_accuracy: 0.0,
    };
    let probs = model.probabilities(enc, &source.samples)?;
    let hits = (0..source.len())
        .filter(|&i| argmax(&row_f64(&probs, i)) == labels[i])
        .count();
    model.source_accuracy = hits as f64 / source.len() as f64;
    Ok(model)
}

/// Metadata stored next to source-model tensors in a checkpoint.
#[derive(Serialize, Deserialize)]
struct SourceMeta {
    domain: usize,
    epochs: usize,
    loss_curve: Vec<f64>,
    source_accuracy: f64,
}

struct SourceSet<'a, T>(&'a mut [SourceModel<T>]);

impl<T: Scalar> Parameterized<T> for SourceSet<'_, T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for m in self.0.iter() {
            let pre = format!("source{}/", m.domain);
            m.bank.visit(&mut |n, t| f(&format!("{pre}{n}"), t));
            m.peft.visit(&mut |n, t| f(&format!("{pre}{n}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for m in self.0.iter_mut() {
            let pre = format!("source{}/", m.domain);
            m.bank.visit_mut(&mut |n, t| f(&format!("{pre}{n}"), t));
            m.peft.visit_mut(&mut |n, t| f(&format!("{pre}{n}"), t));
        }
    }
}

/// Packs trained source models into one checkpoint.
pub fn source_models_checkpoint<T: Scalar>(cfg: &Config, models: &[SourceModel<T>]) -> Result<Checkpoint> {
    let meta: Vec<SourceMeta> = models
        .iter()
        .map(|m| SourceMeta {
            domain: m.domain,
            epochs: m.epochs,
            loss_curve: m.loss_curve.clone(),
            source_accuracy: m.source_accuracy,
        })
        .collect();
    let mut owned = models.to_vec();
    Ok(Checkpoint::from_params(
        &SourceSet(&mut owned),
        0,
        cfg.render(),
        serde_json::to_string(&meta)?,
    ))
}

/// Inverse of [`source_models_checkpoint`].
pub fn source_models_from_checkpoint<T: Scalar>(cfg: &Config, ckpt: &Checkpoint) -> Result<Vec<SourceModel<T>>> {
    let meta: Vec<SourceMeta> = serde_json::from_str(&ckpt.state)?;
    let d = cfg.encoder.width;
    // shapes only; values come from the checkpoint
    let mut rng = stream_rng(0, 0);
    let mut models = meta
        .into_iter()
        .map(|m| {
            Ok(SourceModel {
                domain: m.domain,
                bank: PromptBank::init(m.domain, cfg.classes, cfg.m1, cfg.m2, d, &mut rng)?,
                peft: PeftModule::init(&cfg.peft(), cfg.encoder.layers, d, &mut rng)?,
                epochs: m.epochs,
                loss_curve: m.loss_curve,
                source_accuracy: m.source_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ckpt.load_into(&mut SourceSet(&mut models))?;
    for m in &mut models {
        m.bank.set_trainable(false);
        m.peft.set_trainable(false);
    }
    Ok(models)
}

pub(crate) fn row_f64<T: Scalar>(t: &Tensor<T>, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|v| v.as_f64()).collect()
}

/// One record per target sample from the ensemble of source models.
pub fn generate_initial_labels<T: Scalar>(
    enc: &DualEncoder<T>,
    models: &[SourceModel<T>],
    target: &DomainDataset<T>,
    rule: VoteRule,
    tau: f64,
) -> Result<Vec<PseudoLabelRecord>> {
    if models.is_empty() {
        return Err(Error::Contract("pseudo-labeling needs at least one source model".into()));
    }
    if target.is_empty() {
        return Err(Error::Contract("pseudo-labeling an empty target".into()));
    }
    let probs = models
        .iter()
        .map(|m| m.probabilities(enc, &target.samples))
        .collect::<Result<Vec<_>>>()?;
    (0..target.len())
        .map(|i| {
            let rows: Vec<Vec<f64>> = probs.iter().map(|p| row_f64(p, i)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let v = vote(rule, &refs)?;
            Ok(PseudoLabelRecord::new(target.ids[i], v, Origin::Ensemble, tau))
        })
        .collect()
}

/// Replaces the labels of `round(fraction·n)` uniformly chosen records
/// with a uniformly drawn different class. Confidence is left as is.
pub fn inject_label_noise<R: Rng + ?Sized>(
    records: &mut [PseudoLabelRecord],
    fraction: f64,
    classes: usize,
    rng: &mut R,
) -> usize {
    if classes < 2 || fraction <= 0.0 {
        return 0;
    }
    let n = ((records.len() as f64) * fraction.min(1.0)).round() as usize;
    let idx: Vec<usize> = (0..records.len()).collect();
    let mut chosen: Vec<usize> = idx.choose_multiple(rng, n).copied().collect();
    chosen.sort_unstable();
    for i in &chosen {
        let r = &mut records[*i];
        let shift = rng.random_range(1..classes);
        r.label = (r.label + shift) % classes;
    }
    chosen.len()
}
