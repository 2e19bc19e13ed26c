//! Training loop: curriculum update, batch assembly, augmentation, loss and
//! SGD step, per-epoch metrics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{embed_corpus, linear_probe, stratified_split, EmbedOptions, ProbeConfig};
use crate::losses::{total_loss, LossConfig};
use crate::model::{backward_batch, encode_batch, HicoModel, ModelConfig, ModelGrads, MlpParams};
use crate::numerics::{Rng, Vec64};
use crate::timeline::{
    cap_serde, gradual_delta, observe_features, sample_topical_clip, sample_visual_pair, ClipTriple, Corpus,
    SamplerSchedule,
};

/// Epoch-independent part of the sampler schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerTemplate {
    #[serde(with = "cap_serde")]
    pub delta_cap: f64,
    #[serde(with = "cap_serde")]
    pub topical_cap: f64,
    pub gs_visual: bool,
    pub gs_topical: bool,
}

impl Default for SamplerTemplate {
    fn default() -> Self {
        Self {
            delta_cap: 1.0,
            topical_cap: f64::INFINITY,
            gs_visual: true,
            gs_topical: true,
        }
    }
}

impl SamplerTemplate {
    pub fn schedule(&self, alpha: usize, alpha_max: usize) -> SamplerSchedule {
        SamplerSchedule {
            alpha,
            alpha_max,
            delta_cap: self.delta_cap,
            topical_cap: self.topical_cap,
            gs_visual: self.gs_visual,
            gs_topical: self.gs_topical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_videos: usize,
    /// Batches per epoch; 0 means `n_videos / batch_videos`.
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aug_noise_std: f64,
    pub aug_mask_prob: f64,
    pub loss: LossConfig,
    pub sampler: SamplerTemplate,
    pub model: ModelConfig,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Clip sampling and augmentation seed.
    pub data_seed: u64,
    /// Probe the training corpus every this many epochs; 0 disables.
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_videos: 16,
            batches_per_epoch: 0,
            lr: 0.05,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-4,
            aug_noise_std: 0.1,
            aug_mask_prob: 0.1,
            loss: LossConfig::default(),
            sampler: SamplerTemplate::default(),
            model: ModelConfig::default(),
            seed: 0,
            data_seed: 1,
            probe_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_videos < 2 {
            return Err(Error::TooFewVideos(self.batch_videos));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.aug_mask_prob) || !(self.aug_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("augmentation strengths out of range".into()));
        }
        self.loss.validate()?;
        self.sampler.schedule(0, self.alpha_max()).validate()
    }

    /// The last epoch reaches the full cap.
    pub fn alpha_max(&self) -> usize {
        self.epochs.saturating_sub(1).max(1)
    }

    pub fn batches_for(&self, corpus: &Corpus) -> usize {
        if self.batches_per_epoch > 0 {
            self.batches_per_epoch
        } else {
            (corpus.len() / self.batch_videos).max(1)
        }
    }

    /// Linear warmup then cosine decay to zero, per step.
    pub fn lr_at(&self, step: usize, total: usize, per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let prog = (step - warm) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * prog).cos())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Feature-space augmentation: additive gaussian noise, then independent
/// coordinate masking.
pub fn augment(x: &[f64], noise_std: f64, mask_prob: f64, rng: &mut Rng) -> Vec64 {
    x.iter()
        .map(|&v| {
            let noisy = if noise_std > 0.0 { v + noise_std * rng.normal() } else { v };
            if mask_prob > 0.0 && rng.bernoulli(mask_prob) {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

/// `N` distinct videos, each contributing a visual pair and a topical clip
/// with independently augmented features.
pub fn assemble_batch(corpus: &Corpus, sched: &SamplerSchedule, cfg: &TrainConfig, rng: &Rng) -> Result<Vec<ClipTriple>> {
    let n = cfg.batch_videos;
    if corpus.len() < n {
        return Err(Error::CorpusTooSmall {
            have: corpus.len(),
            need: n,
        });
    }
    let videos = rng.split_named("videos").sample_distinct(corpus.len(), n);
    videos
        .par_iter()
        .enumerate()
        .map(|(slot, &v)| {
            let t = &corpus.timelines[v];
            let mut r = rng.split(slot as u64);
            let (vi, vj) = sample_visual_pair(t, corpus.clip_len, sched, &mut r)?;
            let vk = sample_topical_clip(t, &vi, sched, &mut r)?;
            let mut view = |clip| {
                let x = observe_features(t, clip, &corpus.observation, &mut r);
                augment(&x, cfg.aug_noise_std, cfg.aug_mask_prob, &mut r)
            };
            let (xi, xj, xk) = (view(&vi), view(&vj), view(&vk));
            Ok(ClipTriple { vi, vj, vk, xi, xj, xk })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub l_cl: f64,
    pub l_tp: f64,
    pub total: f64,
    pub delta_max: f64,
    pub lr: f64,
    pub tp_accuracy: Option<f64>,
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

struct Momentum {
    v: ModelGrads,
}

fn sgd_update(params: &mut MlpParams, grads: &MlpParams, velocity: &mut MlpParams, lr: f64, momentum: f64, wd: f64) {
    velocity.scale(momentum);
    velocity.axpy(1.0, grads);
    if wd > 0.0 {
        velocity.axpy(wd, params);
    }
    params.axpy(-lr, velocity);
}

/// One optimization step on a prepared batch; returns the loss bundle
/// evaluated before the update. Non-finite embeddings or loss yield
/// `NonFiniteLoss` with zero epoch/batch; the trainer fills them in.
pub fn train_step(
    model: &mut HicoModel,
    triples: &[ClipTriple],
    loss: &LossConfig,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut ModelGrads,
) -> Result<crate::losses::LossBundle> {
    let non_finite = Error::NonFiniteLoss { epoch: 0, batch: 0 };
    let (batch, caches) = encode_batch(model, triples)?;
    if !batch.z.is_finite() || !batch.t.is_finite() {
        return Err(non_finite);
    }
    let bundle = total_loss(&batch, &model.phi, loss).map_err(|e| match e {
        Error::InvalidProbability(p) if p.is_nan() => Error::NonFiniteLoss { epoch: 0, batch: 0 },
        e => e,
    })?;
    if !bundle.total.is_finite() {
        return Err(non_finite);
    }
    let mut grads = model.zeros_like();
    backward_batch(model, &caches, &bundle.dz, &bundle.dt, &mut grads)?;
    grads.phi = bundle.dphi.clone();
    sgd_update(&mut model.f.params, &grads.f, &mut velocity.f, lr, momentum, weight_decay);
    sgd_update(&mut model.g.params, &grads.g, &mut velocity.g, lr, momentum, weight_decay);
    sgd_update(&mut model.h.params, &grads.h, &mut velocity.h, lr, momentum, weight_decay);
    sgd_update(&mut model.phi.params, &grads.phi, &mut velocity.phi, lr, momentum, weight_decay);
    Ok(bundle)
}

/// Probe accuracy of the encoder on a stratified half split of `corpus`.
pub fn self_probe(model: &HicoModel, corpus: &Corpus, seed: u64) -> Result<f64> {
    let emb = embed_corpus(model, corpus, &EmbedOptions::default(), &Rng::new(seed))?;
    let labels = corpus.labels();
    let (tr, te) = stratified_split(&labels);
    let pick = |idx: &[usize]| crate::eval::select_rows(&emb, idx);
    let lab = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    Ok(linear_probe(&pick(&tr), &lab(&tr), &pick(&te), &lab(&te), &ProbeConfig::default())?.accuracy)
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(HicoModel, MetricLog)> {
    cfg.validate()?;
    let model = HicoModel::init(&cfg.model, &Rng::new(cfg.seed))?;
    train_from(model, corpus, cfg)
}

pub fn train_from(mut model: HicoModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(HicoModel, MetricLog)> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.d_feat() != model.f.spec.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "corpus feature dim vs encoder input",
            expected: model.f.spec.input_dim(),
            got: corpus.d_feat(),
        });
    }
    let per_epoch = cfg.batches_for(corpus);
    let total_steps = cfg.epochs * per_epoch;
    let alpha_max = cfg.alpha_max();
    let data = Rng::new(cfg.data_seed);
    let mut mom = Momentum { v: model.zeros_like() };
    let mut log = MetricLog::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let sched = cfg.sampler.schedule(epoch.min(alpha_max), alpha_max);
        let epoch_rng = data.split(epoch as u64);
        let (mut l_cl, mut l_tp, mut total, mut tp_acc, mut lr) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for b in 0..per_epoch {
            let triples = assemble_batch(corpus, &sched, cfg, &epoch_rng.split(b as u64))?;
            lr = cfg.lr_at(step, total_steps, per_epoch);
            let bundle = train_step(&mut model, &triples, &cfg.loss, lr, cfg.momentum, cfg.weight_decay, &mut mom.v)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                    e => e,
                })?;
            if !model.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            l_cl += bundle.l_cl;
            l_tp += bundle.l_tp;
            total += bundle.total;
            tp_acc += bundle.tp_accuracy.unwrap_or(0.0);
            step += 1;
        }
        let k = per_epoch as f64;
        let probe_accuracy = if cfg.probe_every > 0 && (epoch + 1) % cfg.probe_every == 0 {
            Some(self_probe(&model, corpus, cfg.data_seed)?)
        } else {
            None
        };
        log.rows.push(MetricRow {
            epoch,
            l_cl: l_cl / k,
            l_tp: l_tp / k,
            total: total / k,
            delta_max: gradual_delta(&sched)?,
            lr,
            tp_accuracy: cfg.loss.enable_tcl.then_some(tp_acc / k),
            probe_accuracy,
        });
    }
    Ok((model, log))
}

impl TrainConfig {
    /// Applies the three ablation axes: the distance constraint on visual
    /// pairs, the topical clip (negatives and pair prediction), and gradual
    /// sampling.
    pub fn with_ablation(mut self, vcl: bool, tcl: bool, gs: bool) -> Self {
        if !vcl {
            self.sampler.delta_cap = f64::INFINITY;
        }
        self.loss.enable_tcl = tcl;
        self.loss.include_vk_negatives = tcl;
        self.loss.topical_pairs = if tcl {
            crate::losses::TopicalPairs::Tp
        } else {
            crate::losses::TopicalPairs::None
        };
        self.sampler.gs_visual = gs;
        self.sampler.gs_topical = gs;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TopicalPairs;
    use crate::timeline::{generate_corpus, temporal_distance, CorpusConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_videos: 4,
            model: ModelConfig {
                d_feat: 8,
                encoder_hidden: 12,
                d_repr: 8,
                head_hidden: 12,
                d_z: 8,
                d_t: 8,
                phi_hidden: 8,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(trimmed: bool) -> Corpus {
        let base = if trimmed { CorpusConfig::trimmed() } else { CorpusConfig::untrimmed() };
        let cfg = CorpusConfig {
            n_videos: 16,
            n_topics: 4,
            d_feat: 8,
            ..base
        };
        generate_corpus(&cfg, &Rng::new(5)).unwrap()
    }

    #[test]
    fn augment_edge_cases() {
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(augment(&x, 0.0, 0.0, &mut Rng::new(0)), x);
        assert_eq!(augment(&x, 0.5, 1.0, &mut Rng::new(0)), vec![0.0; 3]);
        let d = 16;
        let zero = vec![0.0; d];
        let mut rng = Rng::new(1);
        let mean_norm = (0..10_000)
            .map(|_| crate::numerics::norm(&augment(&zero, 0.3, 0.0, &mut rng)))
            .sum::<f64>()
            / 10_000.0;
        assert!((mean_norm / (0.3 * (d as f64).sqrt()) - 1.0).abs() < 0.05);
    }

    #[test]
    fn batch_shape_and_curriculum_start() {
        let corpus = tiny_corpus(false);
        let mut cfg = tiny_cfg();
        cfg.batch_videos = 2;
        let sched = cfg.sampler.schedule(0, 10);
        let batch = assemble_batch(&corpus, &sched, &cfg, &Rng::new(3)).unwrap();
        assert_eq!(batch.len(), 2);
        assert_ne!(batch[0].vi.timeline_id, batch[1].vi.timeline_id);
        for t in &batch {
            assert_eq!(temporal_distance(&t.vi, &t.vj).unwrap(), 0.0);
        }
        cfg.batch_videos = 17;
        assert!(matches!(
            assemble_batch(&corpus, &sched, &cfg, &Rng::new(3)),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_seeds_are_isolated() {
        let corpus = tiny_corpus(false);
        let cfg = tiny_cfg();
        let (m1, log1) = train(&corpus, &cfg).unwrap();
        let (m2, log2) = train(&corpus, &cfg).unwrap();
        assert_eq!(log1.to_csv().unwrap(), log2.to_csv().unwrap());
        assert_eq!(m1, m2);

        let other = TrainConfig {
            data_seed: 99,
            ..cfg.clone()
        };
        let a = HicoModel::init(&cfg.model, &Rng::new(cfg.seed)).unwrap();
        let b = HicoModel::init(&other.model, &Rng::new(other.seed)).unwrap();
        assert_eq!(a, b);
        assert_ne!(train(&corpus, &other).unwrap().1, log1);
    }

    #[test]
    fn logged_delta_follows_curriculum() {
        let corpus = tiny_corpus(false);
        let (_, log) = train(&corpus, &tiny_cfg()).unwrap();
        let deltas: Vec<f64> = log.rows.iter().map(|r| r.delta_max).collect();
        assert_eq!(deltas.first(), Some(&0.0));
        assert_eq!(deltas.last(), Some(&1.0));
        assert!(deltas.windows(2).all(|w| w[1] >= w[0]));

        let mut flat = tiny_cfg();
        flat.sampler.gs_visual = false;
        flat.sampler.gs_topical = false;
        let (_, log) = train(&corpus, &flat).unwrap();
        assert!(log.rows.iter().all(|r| r.delta_max == 1.0));
        assert!(log.rows.windows(2).all(|w| w[1].epoch > w[0].epoch));
    }

    #[test]
    fn vcl_loss_decreases_on_trimmed_corpus() {
        let corpus = tiny_corpus(true);
        let cfg = TrainConfig {
            epochs: 10,
            batch_videos: 16,
            batches_per_epoch: 64,
            loss: LossConfig {
                enable_tcl: false,
                topical_pairs: TopicalPairs::None,
                ..LossConfig::default()
            },
            ..tiny_cfg()
        };
        let (_, log) = train(&corpus, &cfg).unwrap();
        let totals: Vec<f64> = log.rows.iter().map(|r| r.total).collect();
        let smooth: Vec<f64> = totals.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    }

    #[test]
    fn small_step_decreases_frozen_batch_loss() {
        let corpus = tiny_corpus(false);
        let cfg = tiny_cfg();
        let sched = cfg.sampler.schedule(3, 3);
        for init in 0..20 {
            let mut model = HicoModel::init(&cfg.model, &Rng::new(100 + init)).unwrap();
            let batch = assemble_batch(&corpus, &sched, &cfg, &Rng::new(init)).unwrap();
            let mut vel = model.zeros_like();
            let before = train_step(&mut model, &batch, &cfg.loss, 5e-4, 0.0, 0.0, &mut vel).unwrap().total;
            let (b, _) = encode_batch(&model, &batch).unwrap();
            let after = total_loss(&b, &model.phi, &cfg.loss).unwrap().total;
            assert!(after < before, "init {init}: {before} -> {after}");
        }
    }

    #[test]
    fn divergence_aborts_with_context() {
        let corpus = tiny_corpus(false);
        let cfg = TrainConfig {
            lr: 1e12,
            warmup_epochs: 0,
            ..tiny_cfg()
        };
        match train(&corpus, &cfg) {
            Err(Error::NonFiniteLoss { epoch, batch }) => {
                assert!(epoch < cfg.epochs && batch < cfg.batches_for(&corpus));
            }
            other => panic!("expected NonFiniteLoss, got {:?}", other.err()),
        }
    }

    #[test]
    fn ablation_grid_runs() {
        let corpus = tiny_corpus(false);
        let mut logs = 0;
        for mask in 0..8u8 {
            let (vcl, tcl, gs) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let cfg = tiny_cfg().with_ablation(vcl, tcl, gs);
            let (_, log) = train(&corpus, &TrainConfig { epochs: 2, ..cfg }).unwrap();
            logs += (log.rows.len() == 2) as usize;
        }
        assert_eq!(logs, 8);
    }

    #[test]
    fn unknown_config_keys_are_named() {
        let err = TrainConfig::from_json(r#"{"epochz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }
}
