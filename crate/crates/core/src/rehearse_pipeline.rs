//! End-to-end controller: source pretraining, ensemble labeling,
//! curriculum construction, then per cluster {train, refine, rehearse},
//! with a checkpoint after every stage.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::alignment::{run_stage, AdaptState, MetricRow, StageContext, StagePool, TargetItem};
use crate::curriculum::{build_schedule, class_centroids, cluster_difficulty, CurriculumSchedule};
use crate::data_io::{generate_synthetic, Checkpoint, Config, DomainDataset, SyntheticSpec};
use crate::encoders::{class_probabilities, DualEncoder, SimilarityHead};
use crate::error::{Error, Result};
use crate::pseudo_labeler::{
    average_confidence_vote, generate_initial_labels, inject_label_noise, row_f64, train_source_model, Origin,
    PseudoLabelRecord, SourceModel,
};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Parameterized, Tensor};

const INIT_STREAM: u64 = 5;
const NOISE_STREAM: u64 = 7;
const STAGE_STREAM: u64 = 100;

/// Confident refined labels carried into later stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    /// Stage that produced the records.
    pub stage: usize,
    pub records: Vec<PseudoLabelRecord>,
}

/// Keeps records with confidence strictly above `beta` whose label is in
/// `seen` (classes of already-trained clusters).
pub fn select_rehearsal(records: &[PseudoLabelRecord], beta: f64, seen: &[usize], stage: usize) -> RehearsalBuffer {
    RehearsalBuffer {
        stage,
        records: records
            .iter()
            .filter(|r| r.confidence > beta && seen.contains(&r.label))
            .copied()
            .collect(),
    }
}

/// Input data of a run; the target carries no labels.
#[derive(Clone, Debug)]
pub struct PipelineData<T> {
    pub encoder: DualEncoder<T>,
    pub sources: Vec<DomainDataset<T>>,
    pub target: DomainDataset<T>,
}

impl<T: Scalar> PipelineData<T> {
    /// Synthetic world described by `cfg`, with an encoder calibrated on
    /// its neutral anchors. Returns the held-out target labels alongside.
    pub fn synthetic(cfg: &Config) -> Result<(Self, Vec<usize>)> {
        let spec = SyntheticSpec {
            domains: cfg.domains,
            classes: cfg.classes,
            samples_per_class: cfg.samples_per_class,
            shift: cfg.shift,
            noise: cfg.noise,
            image_size: cfg.encoder.image_size,
            anchors_per_class: cfg.anchors_per_class,
            seed: cfg.seed,
        };
        let world = generate_synthetic::<T>(&spec)?;
        let anchor_labels = world.anchors.labels.clone().unwrap_or_default();
        let encoder = DualEncoder::pretrained(
            &cfg.encoder,
            cfg.classes,
            cfg.seq_len(),
            SimilarityHead::new(cfg.temperature)?,
            &world.anchors.samples,
            &anchor_labels,
        )?;
        Ok((
            Self {
                encoder,
                sources: world.sources,
                target: world.target,
            },
            world.target_labels,
        ))
    }

    fn validate(&self, cfg: &Config) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Contract("at least one source domain is required".into()));
        }
        if self.encoder.classes() != cfg.classes {
            return Err(Error::Config(format!(
                "encoder has {} classes, config {}",
                self.encoder.classes(),
                cfg.classes
            )));
        }
        if self.target.is_empty() {
            return Err(Error::Contract("target domain is empty".into()));
        }
        Ok(())
    }
}

/// Per-stage bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub cluster: usize,
    pub classes: Vec<usize>,
    pub pool_sources: usize,
    pub pool_fresh: usize,
    pub pool_rehearsed: usize,
    /// Target sample ids of every rehearsed pool item.
    pub rehearsed_ids: Vec<u32>,
    pub refined: usize,
    pub retained: usize,
}

/// Everything besides the tensors needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub initial: Vec<PseudoLabelRecord>,
    pub schedule: CurriculumSchedule,
    pub buffers: Vec<RehearsalBuffer>,
    pub stages_done: usize,
    pub metrics: Vec<MetricRow>,
    pub summaries: Vec<StageSummary>,
    pub source_accuracy: Vec<f64>,
}

impl PipelineState {
    /// State before the first stage.
    pub fn new(initial: Vec<PseudoLabelRecord>, schedule: CurriculumSchedule, source_accuracy: Vec<f64>) -> Self {
        Self {
            initial,
            schedule,
            buffers: Vec::new(),
            stages_done: 0,
            metrics: Vec::new(),
            summaries: Vec::new(),
            source_accuracy,
        }
    }

    /// Every rehearsed record, later stages overwriting earlier ones.
    pub fn rehearsal_pool(&self) -> Vec<PseudoLabelRecord> {
        let mut by_id: BTreeMap<u32, PseudoLabelRecord> = BTreeMap::new();
        for b in &self.buffers {
            for r in &b.records {
                by_id.insert(r.sample_id, *r);
            }
        }
        by_id.into_values().collect()
    }
}

/// Result of a (possibly partial) run.
#[derive(Clone, Debug)]
pub struct PipelineRun<T> {
    pub config: Config,
    pub state: PipelineState,
    pub params: AdaptState<T>,
    /// One checkpoint per completed stage, in stage order.
    pub checkpoints: Vec<Checkpoint>,
    pub encoder_checksum: String,
}

impl<T: Scalar> PipelineRun<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        make_checkpoint(&self.config, &self.params, &self.state)
    }

    pub fn final_digest(&self) -> Result<String> {
        self.checkpoint()?.digest()
    }
}

fn make_checkpoint<T: Scalar>(cfg: &Config, params: &AdaptState<T>, state: &PipelineState) -> Result<Checkpoint> {
    Ok(Checkpoint::from_params(
        params,
        state.stages_done as u32,
        cfg.render(),
        serde_json::to_string(state)?,
    ))
}

/// Parameter state before any adaptation; also the zero-shot model.
pub fn initial_params<T: Scalar>(cfg: &Config) -> Result<AdaptState<T>> {
    AdaptState::init(cfg, cfg.domains - 1, &mut stream_rng(cfg.seed, INIT_STREAM))
}

/// `n × K` probabilities: per pair the target-row distribution
/// (renormalized over `K`), averaged over pairs.
pub fn ensemble_probabilities<T: Scalar>(
    enc: &DualEncoder<T>,
    params: &AdaptState<T>,
    images: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if params.banks.is_empty() {
        return Err(Error::Contract("no prompt banks to predict with".into()));
    }
    let k = enc.classes();
    let emb = enc.vision().encode_all(images, Some(&params.peft))?;
    let mut acc = vec![0.0f64; images.len() * k];
    for bank in &params.banks {
        let p = bank.prompt_embeddings(enc.text())?;
        let d = p.cols();
        let tgt = Tensor::new([k, d], p.data()[k * d..].to_vec())?;
        let probs = class_probabilities(&emb, &tgt, enc.head())?;
        acc.iter_mut().zip(probs.data()).for_each(|(a, v)| *a += v.as_f64());
    }
    let n = params.banks.len() as f64;
    Tensor::new([images.len(), k], acc.into_iter().map(|v| T::of(v / n)).collect())
}

/// Class and probability vector for every image.
pub fn ensemble_predict<T: Scalar>(
    enc: &DualEncoder<T>,
    params: &AdaptState<T>,
    images: &[Tensor<T>],
) -> Result<(Vec<usize>, Tensor<T>)> {
    let probs = ensemble_probabilities(enc, params, images)?;
    let labels = (0..images.len())
        .map(|i| average_confidence_vote(&[&row_f64(&probs, i)]).map(|v| v.label))
        .collect::<Result<_>>()?;
    Ok((labels, probs))
}

/// Top-1 accuracy of `predictions` against `truth`.
pub fn top1_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Ensemble top-1 accuracy of `params` on a labeled target.
pub fn evaluate<T: Scalar>(
    enc: &DualEncoder<T>,
    params: &AdaptState<T>,
    images: &[Tensor<T>],
    truth: &[usize],
) -> Result<f64> {
    let (pred, _) = ensemble_predict(enc, params, images)?;
    top1_accuracy(&pred, truth)
}

/// Regenerates labels of the given target positions with the current
/// model; origin `refined@stage`.
pub fn refine_pseudo_labels<T: Scalar>(
    enc: &DualEncoder<T>,
    params: &AdaptState<T>,
    target: &DomainDataset<T>,
    positions: &[usize],
    stage: usize,
    tau: f64,
) -> Result<Vec<PseudoLabelRecord>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let imgs: Vec<Tensor<T>> = positions.iter().map(|&i| target.samples[i].clone()).collect();
    let probs = ensemble_probabilities(enc, params, &imgs)?;
    positions
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let v = average_confidence_vote(&[&row_f64(&probs, r)])?;
            Ok(PseudoLabelRecord::new(target.ids[i], v, Origin::Refined(stage), tau))
        })
        .collect()
}

/// Pool of stage `j`: sources restricted to seen classes, fresh target
/// samples of the cluster above `τ`, and every earlier buffer.
pub fn stage_pool<T>(
    cfg: &Config,
    state: &PipelineState,
    sources: &[DomainDataset<T>],
    positions: &HashMap<u32, usize>,
    j: usize,
) -> Result<StagePool> {
    let seen = state.schedule.seen_classes(j);
    let active = state.schedule.stage_classes(j);
    let sources = sources
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("source domain {} is unlabeled", s.domain)))?;
            Ok((0..s.len()).filter(|&i| seen.contains(&labels[i])).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let rehearsed = state.rehearsal_pool();
    let rehearsed_ids: Vec<u32> = rehearsed.iter().map(|r| r.sample_id).collect();
    let mut target = Vec::new();
    for r in &state.initial {
        if active.contains(&r.label) && r.confidence > cfg.tau && !rehearsed_ids.contains(&r.sample_id) {
            target.push(TargetItem {
                index: positions[&r.sample_id],
                label: r.label,
                confidence: r.confidence,
                rehearsed: false,
            });
        }
    }
    for r in &rehearsed {
        target.push(TargetItem {
            index: positions[&r.sample_id],
            label: r.label,
            confidence: r.confidence,
            rehearsed: true,
        });
    }
    Ok(StagePool { sources, target })
}

/// Trains one source model per source domain, labels the target by
/// ensemble vote (with optional injected noise) and builds the schedule.
pub fn prepare<T: Scalar>(
    cfg: &Config,
    data: &PipelineData<T>,
    models: Option<&[SourceModel<T>]>,
) -> Result<PipelineState> {
    data.validate(cfg)?;
    let trained;
    let models = match models {
        Some(m) => m,
        None => {
            trained = train_source_models(cfg, data)?;
            &trained
        }
    };
    let initial = initial_labels(cfg, data, models)?;
    let schedule = initial_schedule(cfg, data, &initial)?;
    Ok(PipelineState::new(
        initial,
        schedule,
        models.iter().map(|m| m.source_accuracy).collect(),
    ))
}

/// Ensemble vote of the source models over the target, then the
/// configured fraction of injected label noise.
pub fn initial_labels<T: Scalar>(
    cfg: &Config,
    data: &PipelineData<T>,
    models: &[SourceModel<T>],
) -> Result<Vec<PseudoLabelRecord>> {
    let mut initial = generate_initial_labels(&data.encoder, models, &data.target, cfg.vote, cfg.tau)?;
    inject_label_noise(
        &mut initial,
        cfg.label_noise,
        cfg.classes,
        &mut stream_rng(cfg.seed, NOISE_STREAM),
    );
    Ok(initial)
}

/// One source model per source domain, each on its own worker.
pub fn train_source_models<T: Scalar>(cfg: &Config, data: &PipelineData<T>) -> Result<Vec<SourceModel<T>>> {
    use rayon::prelude::*;
    data.sources
        .par_iter()
        .map(|s| train_source_model(&data.encoder, s, cfg, cfg.seed))
        .collect()
}

/// Clusters class centroids of the pre-adaptation target embeddings and
/// ranks clusters by similarity to the initial target-domain prompts.
pub fn initial_schedule<T: Scalar>(
    cfg: &Config,
    data: &PipelineData<T>,
    initial: &[PseudoLabelRecord],
) -> Result<CurriculumSchedule> {
    let params = initial_params::<T>(cfg)?;
    let enc = &data.encoder;
    let emb = enc.vision().encode_all(&data.target.samples, Some(&params.peft))?;
    let k = cfg.classes;
    let mut text = vec![0.0f64; k * cfg.encoder.embed_dim];
    for bank in &params.banks {
        let p = bank.prompt_embeddings(enc.text())?;
        text.iter_mut()
            .zip(&p.data()[k * p.cols()..])
            .for_each(|(a, v)| *a += v.as_f64());
    }
    let n = params.banks.len() as f64;
    let text: Tensor<T> = Tensor::new([k, cfg.encoder.embed_dim], text.into_iter().map(|v| T::of(v / n)).collect())?;
    let labels: Vec<usize> = initial.iter().map(|r| r.label).collect();
    let centroids = class_centroids(&emb, &labels, &text)?;
    build_schedule(&centroids, cfg.stages, cfg.seed, |c| cluster_difficulty(c, &emb, &labels, &text))
}

/// Runs stages `state.stages_done..T` (or up to `stop_after` stages in
/// total) from `params`.
pub fn run_stages<T: Scalar>(
    cfg: &Config,
    data: &PipelineData<T>,
    mut state: PipelineState,
    mut params: AdaptState<T>,
    stop_after: Option<usize>,
) -> Result<PipelineRun<T>> {
    data.validate(cfg)?;
    let enc_sum = data.encoder.checksum();
    let positions: HashMap<u32, usize> = data.target.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let end = stop_after.unwrap_or(usize::MAX).min(state.schedule.stages());
    let mut checkpoints = Vec::new();
    for j in state.stages_done..end {
        let wrap = |e: Error| Error::Stage {
            stage: j,
            source: Box::new(e),
        };
        let pool = stage_pool(cfg, &state, &data.sources, &positions, j).map_err(wrap)?;
        let active = state.schedule.stage_classes(j).to_vec();
        let mut summary = StageSummary {
            stage: j,
            cluster: state.schedule.order[j],
            classes: active.clone(),
            pool_sources: pool.sources.iter().map(Vec::len).sum(),
            pool_fresh: pool.target.iter().filter(|t| !t.rehearsed).count(),
            pool_rehearsed: pool.target.iter().filter(|t| t.rehearsed).count(),
            rehearsed_ids: pool
                .target
                .iter()
                .filter(|t| t.rehearsed)
                .map(|t| data.target.ids[t.index])
                .collect(),
            refined: 0,
            retained: 0,
        };
        let ctx = StageContext {
            stage: j,
            active: active.clone(),
            pool,
            alpha: cfg.alpha,
        };
        let mut rng = stream_rng(cfg.seed, STAGE_STREAM + j as u64);
        let rows = run_stage(&ctx, &data.encoder, &data.sources, &data.target, &mut params, cfg, &mut rng)
            .map_err(wrap)?;
        log::info!(
            "stage {j}: classes {active:?}, {} source / {} fresh / {} rehearsed samples",
            summary.pool_sources,
            summary.pool_fresh,
            summary.pool_rehearsed
        );
        state.metrics.extend(rows);

        let cluster_positions: Vec<usize> = state
            .initial
            .iter()
            .filter(|r| active.contains(&r.label))
            .map(|r| positions[&r.sample_id])
            .collect();
        let refined = refine_pseudo_labels(&data.encoder, &params, &data.target, &cluster_positions, j, cfg.tau)
            .map_err(wrap)?;
        let buffer = select_rehearsal(&refined, cfg.beta, &state.schedule.seen_classes(j), j);
        summary.refined = refined.len();
        summary.retained = buffer.records.len();
        state.buffers.push(buffer);
        state.summaries.push(summary);
        state.stages_done = j + 1;
        checkpoints.push(make_checkpoint(cfg, &params, &state)?);
    }
    if data.encoder.checksum() != enc_sum {
        return Err(Error::Invariant("frozen encoder weights changed during the run".into()));
    }
    Ok(PipelineRun {
        config: cfg.clone(),
        state,
        params,
        checkpoints,
        encoder_checksum: enc_sum,
    })
}

/// Full run from scratch.
pub fn run_pipeline<T: Scalar>(cfg: &Config, data: &PipelineData<T>) -> Result<PipelineRun<T>> {
    let state = prepare(cfg, data, None)?;
    run_stages(cfg, data, state, initial_params(cfg)?, None)
}

/// Continues a run from a stage checkpoint written by [`run_stages`].
pub fn resume_pipeline<T: Scalar>(cfg: &Config, data: &PipelineData<T>, ckpt: &Checkpoint) -> Result<PipelineRun<T>> {
    let (state, params) = restore(cfg, ckpt)?;
    run_stages(cfg, data, state, params, None)
}

/// Parameters and pipeline state stored in `ckpt`.
pub fn restore<T: Scalar>(cfg: &Config, ckpt: &Checkpoint) -> Result<(PipelineState, AdaptState<T>)> {
    let state: PipelineState = serde_json::from_str(&ckpt.state)?;
    if state.stages_done != ckpt.stage as usize {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint stage {} disagrees with its state ({})", ckpt.stage, state.stages_done),
        });
    }
    let mut params = initial_params::<T>(cfg)?;
    ckpt.load_into(&mut params)?;
    Ok((state, params))
}

/// Parameter digest of an adaptation state.
pub fn params_checksum<T: Scalar>(p: &AdaptState<T>) -> String {
    p.checksum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_labeler::Vote;

    fn rec(id: u32, label: usize, conf: f64) -> PseudoLabelRecord {
        PseudoLabelRecord::new(id, Vote { label, confidence: conf }, Origin::Refined(0), 0.6)
    }

    #[test]
    fn rehearsal_filter_is_strict() {
        let r = [rec(0, 0, 0.95), rec(1, 0, 0.7), rec(2, 1, 0.85), rec(3, 0, 0.8)];
        let b = select_rehearsal(&r, 0.8, &[0, 1], 0);
        assert_eq!(b.records.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![0, 2]);
        let all = select_rehearsal(&[rec(0, 0, 0.9), rec(1, 1, 0.9)], 0.8, &[0, 1], 0);
        assert_eq!(all.records.len(), 2);
        // unseen classes are never rehearsed
        assert!(select_rehearsal(&[rec(0, 5, 0.99)], 0.8, &[0, 1], 0).records.is_empty());
    }

    #[test]
    fn later_buffers_overwrite() {
        let state = PipelineState {
            initial: vec![],
            schedule: CurriculumSchedule {
                clusters: vec![vec![0]],
                scores: vec![0.0],
                order: vec![0],
            },
            buffers: vec![
                RehearsalBuffer { stage: 0, records: vec![rec(1, 0, 0.9), rec(2, 0, 0.9)] },
                RehearsalBuffer { stage: 1, records: vec![rec(1, 1, 0.95)] },
            ],
            stages_done: 2,
            metrics: vec![],
            summaries: vec![],
            source_accuracy: vec![],
        };
        let pool = state.rehearsal_pool();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0].label, 1);
    }

    #[test]
    fn accuracy_recount() {
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }
}
