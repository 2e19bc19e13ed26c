//! Synthetic untrimmed timelines and the clip samplers.
//!
//! A corpus is drawn from a *world*: one latent direction per topic plus a
//! bank of scene prototypes. Each topic owns `scenes_per_topic` prototypes;
//! `generic_scenes` more are shared by every topic. A timeline is a run of
//! shots, each showing one scene with per-shot jitter and a per-video style
//! offset. Clip features are
//!
//! ```text
//! x(c) = topic_latent + shot_latent(shot at c) + w_drift·drift(c) + w_noise·ε
//! ```
//!
//! so clips in the same shot look alike, clips far apart in the same video
//! share only the topic and the style, and clips of different videos share at
//! most the topic.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Rng, Vec64};

/// Below this bound a visual pair collapses onto one center.
pub const EPS_T: f64 = 1e-6;

pub const CORPUS_FORMAT: &str = "hico-corpus-v1";

/// Stream offset that keeps evaluation videos disjoint from training videos.
pub const EVAL_VIDEO_OFFSET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub id: usize,
    pub duration: f64,
    pub topic_id: usize,
    pub shot_boundaries: Vec<f64>,
    pub shot_latents: Vec<Vec64>,
    pub topic_latent: Vec64,
    /// Two slow drift directions, mixed by a sinusoid of the clip center.
    pub drift_dirs: Vec<Vec64>,
}

impl Timeline {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timeline {}: duration {} must be positive",
                self.id, self.duration
            )));
        }
        let mut prev = 0.0;
        for &b in &self.shot_boundaries {
            if !(b > prev && b < self.duration) {
                return Err(Error::InvalidArgument(format!(
                    "timeline {}: shot boundaries must be strictly ascending inside (0, l)",
                    self.id
                )));
            }
            prev = b;
        }
        if self.shot_latents.len() != self.shot_boundaries.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "timeline {}: {} shot latents for {} boundaries",
                self.id,
                self.shot_latents.len(),
                self.shot_boundaries.len()
            )));
        }
        let d = self.topic_latent.len();
        if self.shot_latents.iter().any(|s| s.len() != d) || self.drift_dirs.iter().any(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "timeline latent",
                expected: d,
                got: self.shot_latents.iter().map(Vec::len).find(|&n| n != d).unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn num_shots(&self) -> usize {
        self.shot_latents.len()
    }

    /// Index of the shot active at time `t`.
    pub fn shot_at(&self, t: f64) -> usize {
        self.shot_boundaries.partition_point(|&b| b <= t)
    }

    pub fn dim(&self) -> usize {
        self.topic_latent.len()
    }

    /// Admissible clip centers `[len/2, l − len/2]`.
    pub fn center_range(&self, clip_len: f64) -> Result<(f64, f64)> {
        if clip_len > self.duration {
            return Err(Error::ClipTooLong {
                clip_len,
                duration: self.duration,
            });
        }
        Ok((clip_len / 2.0, self.duration - clip_len / 2.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub timeline_id: usize,
    pub center: f64,
    pub length: f64,
}

pub fn temporal_distance(a: &Clip, b: &Clip) -> Result<f64> {
    if a.timeline_id != b.timeline_id {
        return Err(Error::CrossVideoDistance {
            a: a.timeline_id,
            b: b.timeline_id,
        });
    }
    Ok((a.center - b.center).abs())
}

/// Serde helper so caps can be written as a number or `"inf"`.
pub mod cap_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s.eq_ignore_ascii_case("inf") || s == "+inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(de::Error::custom(format!("expected seconds or \"inf\", got {s:?}"))),
        }
    }
}

/// Distance caps for the current epoch.
///
/// Infinite caps stand for the whole video; with gradual sampling on, the
/// cap is first clipped to the timeline's center range and then scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub alpha: usize,
    pub alpha_max: usize,
    #[serde(with = "cap_serde")]
    pub delta_cap: f64,
    #[serde(with = "cap_serde")]
    pub topical_cap: f64,
    pub gs_visual: bool,
    pub gs_topical: bool,
}

impl SamplerSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_max == 0 {
            return Err(Error::DegenerateSchedule);
        }
        if self.alpha > self.alpha_max {
            return Err(Error::InvalidArgument(format!(
                "alpha {} exceeds alpha_max {}",
                self.alpha, self.alpha_max
            )));
        }
        if !(self.delta_cap >= 0.0) || !(self.topical_cap >= self.delta_cap) {
            return Err(Error::InvalidArgument(format!(
                "caps must satisfy 0 <= delta ({}) <= topical ({})",
                self.delta_cap, self.topical_cap
            )));
        }
        Ok(())
    }

    pub fn at_epoch(self, alpha: usize) -> Self {
        Self { alpha, ..self }
    }

    /// `α / α_max`
    pub fn progress(&self) -> Result<f64> {
        if self.alpha_max == 0 {
            return Err(Error::DegenerateSchedule);
        }
        Ok(self.alpha as f64 / self.alpha_max as f64)
    }

    fn scaled(frac: f64, cap: f64) -> f64 {
        if frac == 0.0 {
            0.0
        } else {
            frac * cap
        }
    }

    /// Active bound on `|c_i − c_j|` for a timeline whose centers span `range`.
    pub fn visual_bound(&self, range: f64) -> Result<f64> {
        let frac = self.progress()?;
        Ok(if self.gs_visual {
            Self::scaled(frac, self.delta_cap.min(range))
        } else {
            self.delta_cap
        })
    }

    /// Active bound on `|c_k − c_anchor|`.
    pub fn topical_bound(&self, range: f64) -> Result<f64> {
        let frac = self.progress()?;
        Ok(if self.gs_topical {
            Self::scaled(frac, self.topical_cap.min(range))
        } else {
            self.topical_cap
        })
    }
}

/// `δ_max(α) = (α/α_max)·Δ` with gradual sampling, `Δ` without.
pub fn gradual_delta(sched: &SamplerSchedule) -> Result<f64> {
    let frac = sched.progress()?;
    Ok(if sched.gs_visual {
        SamplerSchedule::scaled(frac, sched.delta_cap)
    } else {
        sched.delta_cap
    })
}

/// Visually consistent pair: the distance is uniform on `[0, bound)` and the
/// pair is placed uniformly among positions that keep both clips inside.
pub fn sample_visual_pair(
    t: &Timeline,
    clip_len: f64,
    sched: &SamplerSchedule,
    rng: &mut Rng,
) -> Result<(Clip, Clip)> {
    let (lo, hi) = t.center_range(clip_len)?;
    let range = hi - lo;
    let bound = sched.visual_bound(range)?;
    let d = if bound < EPS_T || range <= 0.0 {
        0.0
    } else {
        rng.uniform_in(0.0, bound.min(range))
    };
    let first = rng.uniform_in(lo, hi - d);
    let (ci, cj) = if rng.bernoulli(0.5) {
        (first, first + d)
    } else {
        (first + d, first)
    };
    let clip = |center| Clip {
        timeline_id: t.id,
        center,
        length: clip_len,
    };
    Ok((clip(ci), clip(cj)))
}

/// Topical clip: center uniform over admissible centers within the active
/// bound of the anchor.
pub fn sample_topical_clip(
    t: &Timeline,
    anchor: &Clip,
    sched: &SamplerSchedule,
    rng: &mut Rng,
) -> Result<Clip> {
    let (lo, hi) = t.center_range(anchor.length)?;
    let bound = sched.topical_bound(hi - lo)?;
    let a = (anchor.center - bound).max(lo);
    let b = (anchor.center + bound).min(hi);
    let center = if bound <= 0.0 { anchor.center } else { rng.uniform_in(a, b) };
    Ok(Clip {
        timeline_id: t.id,
        center,
        length: anchor.length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationModel {
    pub drift_weight: f64,
    /// Seconds per full drift cycle.
    pub drift_period: f64,
    /// Norm scale of the isotropic observation noise.
    pub noise_weight: f64,
}

/// Raw features of a clip. Deterministic given the timeline, clip and stream.
pub fn observe_features(t: &Timeline, clip: &Clip, obs: &ObservationModel, rng: &mut Rng) -> Vec64 {
    let d = t.dim();
    let mut x = t.topic_latent.clone();
    axpy(1.0, &t.shot_latents[t.shot_at(clip.center)], &mut x);
    if obs.drift_weight != 0.0 && t.drift_dirs.len() == 2 {
        let phase = 2.0 * PI * clip.center / obs.drift_period;
        axpy(obs.drift_weight * phase.sin(), &t.drift_dirs[0], &mut x);
        axpy(obs.drift_weight * phase.cos(), &t.drift_dirs[1], &mut x);
    }
    if obs.noise_weight != 0.0 {
        let std = obs.noise_weight / (d as f64).sqrt();
        for v in x.iter_mut() {
            *v += std * rng.normal();
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipTriple {
    pub vi: Clip,
    pub vj: Clip,
    pub vk: Clip,
    pub xi: Vec64,
    pub xj: Vec64,
    pub xk: Vec64,
}

impl ClipTriple {
    pub fn features(&self) -> [&Vec64; 3] {
        [&self.xi, &self.xj, &self.xk]
    }
}

/// Generator configuration. Scales are vector norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_videos: usize,
    pub n_topics: usize,
    pub d_feat: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub shots_min: usize,
    pub shots_max: usize,
    pub clip_len: f64,
    pub topic_scale: f64,
    pub min_topic_angle_deg: f64,
    pub scenes_per_topic: usize,
    pub generic_scenes: usize,
    /// Probability that a shot shows a generic scene.
    pub generic_prob: f64,
    pub scene_scale: f64,
    pub shot_jitter: f64,
    pub style_scale: f64,
    pub drift_weight: f64,
    pub drift_period: f64,
    pub noise_weight: f64,
    /// First global video index; streams are keyed by global index.
    pub video_offset: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self::untrimmed()
    }
}

impl CorpusConfig {
    /// Long multi-shot videos.
    pub fn untrimmed() -> Self {
        Self {
            n_videos: 64,
            n_topics: 8,
            d_feat: 32,
            duration_min: 60.0,
            duration_max: 60.0,
            shots_min: 6,
            shots_max: 12,
            clip_len: 1.0,
            topic_scale: 0.2,
            min_topic_angle_deg: 60.0,
            scenes_per_topic: 8,
            generic_scenes: 8,
            generic_prob: 0.4,
            scene_scale: 1.5,
            shot_jitter: 0.3,
            style_scale: 0.7,
            drift_weight: 0.3,
            drift_period: 120.0,
            noise_weight: 0.5,
            video_offset: 0,
        }
    }

    /// Short single-shot videos drawn from the same world, cut to on-topic
    /// scenes.
    pub fn trimmed() -> Self {
        Self {
            duration_min: 10.0,
            duration_max: 10.0,
            shots_min: 1,
            shots_max: 1,
            generic_prob: 0.0,
            ..Self::untrimmed()
        }
    }

    pub fn observation(&self) -> ObservationModel {
        ObservationModel {
            drift_weight: self.drift_weight,
            drift_period: self.drift_period,
            noise_weight: self.noise_weight,
        }
    }

    pub fn mean_shots(&self) -> f64 {
        (self.shots_min + self.shots_max) as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_videos == 0 {
            return bad("n_videos must be positive".into());
        }
        if self.n_topics < 2 {
            return bad(format!("n_topics must be >= 2, got {}", self.n_topics));
        }
        if self.video_offset == 0 && self.n_videos < self.n_topics {
            return bad(format!(
                "n_videos ({}) must be >= n_topics ({})",
                self.n_videos, self.n_topics
            ));
        }
        if self.d_feat == 0 {
            return bad("d_feat must be positive".into());
        }
        if !(self.duration_min > 0.0 && self.duration_max >= self.duration_min) {
            return bad("duration range must satisfy 0 < min <= max".into());
        }
        if self.clip_len > self.duration_min {
            return Err(Error::ClipTooLong {
                clip_len: self.clip_len,
                duration: self.duration_min,
            });
        }
        if self.shots_min == 0 || self.shots_max < self.shots_min {
            return bad("shot range must satisfy 1 <= min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.generic_prob) {
            return bad(format!("generic_prob {} outside [0, 1]", self.generic_prob));
        }
        if self.generic_prob > 0.0 && self.generic_scenes == 0 {
            return bad("generic_prob > 0 requires generic_scenes > 0".into());
        }
        if self.generic_prob < 1.0 && self.scenes_per_topic == 0 {
            return bad("generic_prob < 1 requires scenes_per_topic > 0".into());
        }
        if !(self.drift_period > 0.0) {
            return bad("drift_period must be positive".into());
        }
        Ok(())
    }
}

/// Topic directions and scene prototypes shared by every corpus drawn from
/// the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub topic_latents: Vec<Vec64>,
    /// `topic_scenes[t]` holds the prototypes owned by topic `t`.
    pub topic_scenes: Vec<Vec<Vec64>>,
    pub generic_scenes: Vec<Vec64>,
}

/// Unit vectors with pairwise angle at least `min_angle_deg`.
pub fn separated_directions(k: usize, dim: usize, min_angle_deg: f64, rng: &mut Rng) -> Result<Vec<Vec64>> {
    let max_cos = min_angle_deg.to_radians().cos();
    const RESTARTS: usize = 200;
    const TRIES: usize = 2000;
    for _ in 0..RESTARTS {
        let mut dirs: Vec<Vec64> = Vec::with_capacity(k);
        'grow: while dirs.len() < k {
            for _ in 0..TRIES {
                let cand = rng.unit_vector(dim);
                if dirs.iter().all(|d| crate::numerics::dot(d, &cand) <= max_cos) {
                    dirs.push(cand);
                    continue 'grow;
                }
            }
            break;
        }
        if dirs.len() == k {
            return Ok(dirs);
        }
    }
    Err(Error::InfeasibleSeparation(format!(
        "could not place {k} directions at >= {min_angle_deg} degrees in {dim} dimensions"
    )))
}

impl World {
    pub fn generate(cfg: &CorpusConfig, rng: &Rng) -> Result<Self> {
        let mut r = rng.split_named("world");
        let d = cfg.d_feat;
        let topic_latents = separated_directions(cfg.n_topics, d, cfg.min_topic_angle_deg, &mut r)?
            .into_iter()
            .map(|u| crate::numerics::scale(&u, cfg.topic_scale))
            .collect();
        let scene = |r: &mut Rng| crate::numerics::scale(&r.unit_vector(d), cfg.scene_scale);
        let topic_scenes = (0..cfg.n_topics)
            .map(|_| (0..cfg.scenes_per_topic).map(|_| scene(&mut r)).collect())
            .collect();
        let generic_scenes = (0..cfg.generic_scenes).map(|_| scene(&mut r)).collect();
        Ok(Self {
            topic_latents,
            topic_scenes,
            generic_scenes,
        })
    }

    fn timeline(&self, cfg: &CorpusConfig, id: usize, rng: &mut Rng) -> Timeline {
        let d = cfg.d_feat;
        let topic_id = id % cfg.n_topics;
        let duration = rng.uniform_in(cfg.duration_min, cfg.duration_max);
        let n_shots = cfg.shots_min + rng.index(cfg.shots_max - cfg.shots_min + 1);

        let mut shot_boundaries: Vec<f64> = Vec::with_capacity(n_shots - 1);
        while shot_boundaries.len() < n_shots - 1 {
            let b = rng.uniform_in(0.0, duration);
            if b > 0.0 && !shot_boundaries.contains(&b) {
                shot_boundaries.push(b);
            }
        }
        shot_boundaries.sort_by(f64::total_cmp);

        let per_coord = |norm: f64| norm / (d as f64).sqrt();
        let style = rng.normal_vec(d, per_coord(cfg.style_scale));
        let shot_latents = (0..n_shots)
            .map(|_| {
                let proto = if rng.bernoulli(cfg.generic_prob) {
                    &self.generic_scenes[rng.index(self.generic_scenes.len())]
                } else {
                    let own = &self.topic_scenes[topic_id];
                    &own[rng.index(own.len())]
                };
                let mut s = rng.normal_vec(d, per_coord(cfg.shot_jitter));
                axpy(1.0, proto, &mut s);
                axpy(1.0, &style, &mut s);
                s
            })
            .collect();
        let drift_dirs = (0..2).map(|_| rng.normal_vec(d, per_coord(1.0))).collect();

        Timeline {
            id,
            duration,
            topic_id,
            shot_boundaries,
            shot_latents,
            topic_latent: self.topic_latents[topic_id].clone(),
            drift_dirs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub format: String,
    pub n_topics: usize,
    pub clip_len: f64,
    pub observation: ObservationModel,
    pub timelines: Vec<Timeline>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.timelines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timelines.is_empty()
    }

    pub fn d_feat(&self) -> usize {
        self.timelines.first().map_or(0, Timeline::dim)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.timelines.iter().map(|t| t.topic_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CORPUS_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported corpus format {:?}",
                self.format
            )));
        }
        let d = self.d_feat();
        for t in &self.timelines {
            t.validate()?;
            if t.dim() != d {
                return Err(Error::DimensionMismatch {
                    what: "timeline feature dim",
                    expected: d,
                    got: t.dim(),
                });
            }
            if t.topic_id >= self.n_topics {
                return Err(Error::InvalidArgument(format!(
                    "timeline {} has topic {} >= {}",
                    t.id, t.topic_id, self.n_topics
                )));
            }
            t.center_range(self.clip_len)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Corpus = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Draws `cfg.n_videos` timelines. Corpora generated from the same seed share
/// the world, whatever their duration or shot settings.
pub fn generate_corpus(cfg: &CorpusConfig, rng: &Rng) -> Result<Corpus> {
    cfg.validate()?;
    let world = World::generate(cfg, rng)?;
    let videos = rng.split_named("videos");
    let timelines = (cfg.video_offset..cfg.video_offset + cfg.n_videos)
        .map(|id| world.timeline(cfg, id, &mut videos.split(id as u64)))
        .collect();
    Ok(Corpus {
        format: CORPUS_FORMAT.to_string(),
        n_topics: cfg.n_topics,
        clip_len: cfg.clip_len,
        observation: cfg.observation(),
        timelines,
    })
}
