//! Frozen-representation evaluation: linear probe on topic labels and
//! cosine nearest-neighbor retrieval.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HicoModel;
use crate::numerics::{axpy, dot, l2_normalize, softmax, Mat64, Rng};
use crate::timeline::{observe_features, Clip, Corpus};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

/// Which representation a video embedding is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedSource {
    /// Encoder followed by the visual head, `g(f(x))`.
    Visual,
    /// Encoder output `f(x)`.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedOptions {
    pub clips_per_video: usize,
    pub source: EmbedSource,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            clips_per_video: 10,
            source: EmbedSource::Visual,
        }
    }
}

/// Uniformly spaced clip centers over the admissible range.
pub fn uniform_centers(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m).map(|k| lo + (hi - lo) * (k as f64 + 0.5) / m as f64).collect()
}

/// One unit-norm row per video: the average of `clips_per_video` clip
/// embeddings, L2-normalized.
pub fn embed_corpus(model: &HicoModel, corpus: &Corpus, opts: &EmbedOptions, rng: &Rng) -> Result<Mat64> {
    if corpus.d_feat() != model.f.spec.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "corpus feature dim vs encoder input",
            expected: model.f.spec.input_dim(),
            got: corpus.d_feat(),
        });
    }
    if opts.clips_per_video == 0 {
        return Err(Error::InvalidArgument("clips_per_video must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = corpus
        .timelines
        .par_iter()
        .map(|t| {
            let (lo, hi) = t.center_range(corpus.clip_len)?;
            let mut r = rng.split(t.id as u64);
            let mut acc: Vec<f64> = Vec::new();
            for c in uniform_centers(lo, hi, opts.clips_per_video) {
                let clip = Clip {
                    timeline_id: t.id,
                    center: c,
                    length: corpus.clip_len,
                };
                let x = observe_features(t, &clip, &corpus.observation, &mut r);
                let e = match opts.source {
                    EmbedSource::Visual => model.embed_visual(&x)?,
                    EmbedSource::Encoder => model.embed_repr(&x)?,
                };
                if acc.is_empty() {
                    acc = vec![0.0; e.len()];
                }
                axpy(1.0 / opts.clips_per_video as f64, &e, &mut acc);
            }
            Ok(l2_normalize(&acc)?.0)
        })
        .collect::<Result<_>>()?;
    Mat64::from_rows(&rows)
}

pub fn select_rows(m: &Mat64, idx: &[usize]) -> Mat64 {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| m.row(i).to_vec()).collect();
    Mat64::from_rows(&rows).expect("rows share a width")
}

/// Alternates the videos of each class between train and test, in corpus
/// order.
pub fn stratified_split(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        let c = seen.entry(l).or_insert(0);
        if *c % 2 == 0 {
            train.push(i);
        } else {
            test.push(i);
        }
        *c += 1;
    }
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Standard deviation of the random initial weights; 0 starts at zero.
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 5000,
            grad_tol: 1e-6,
            init_std: 0.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Softmax cross-entropy with L2 penalty (bias unpenalized) and its
/// gradient. `w` is `K × (d + 1)` with the bias in the last column.
fn probe_objective(w: &Mat64, x: &Mat64, y: &[usize], l2: f64) -> (f64, Mat64) {
    let n = x.rows() as f64;
    let d = x.cols();
    let k = w.rows();
    let mut grad = Mat64::zeros(k, d + 1);
    let mut loss = 0.0;
    for (r, &label) in y.iter().enumerate() {
        let xr = x.row(r);
        let logits: Vec<f64> = (0..k).map(|c| dot(&w.row(c)[..d], xr) + w[(c, d)]).collect();
        let p = softmax(&logits);
        loss -= p[label].max(1e-300).ln() / n;
        for c in 0..k {
            let coef = (p[c] - if c == label { 1.0 } else { 0.0 }) / n;
            let g = grad.row_mut(c);
            axpy(coef, xr, &mut g[..d]);
            g[d] += coef;
        }
    }
    for c in 0..k {
        let wr = &w.row(c)[..d];
        loss += 0.5 * l2 * dot(wr, wr);
        axpy(l2, wr, &mut grad.row_mut(c)[..d]);
    }
    (loss, grad)
}

fn predict(w: &Mat64, x: &[f64]) -> usize {
    let d = x.len();
    (0..w.rows())
        .map(|c| dot(&w.row(c)[..d], x) + w[(c, d)])
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
        .0
}

/// Multinomial logistic regression by full-batch accelerated gradient
/// descent; reports test accuracy.
pub fn linear_probe(
    train_x: &Mat64,
    train_y: &[usize],
    test_x: &Mat64,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::DimensionMismatch {
            what: "probe labels",
            expected: train_x.rows(),
            got: train_y.len(),
        });
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::DimensionMismatch {
            what: "probe feature dim",
            expected: train_x.cols(),
            got: test_x.cols(),
        });
    }
    let k = train_y.iter().chain(test_y).copied().max().map_or(0, |m| m + 1);
    let mut classes: Vec<usize> = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let d = train_x.cols();

    // smoothness bound of the objective: ½·mean‖[x, 1]‖² + λ
    let n = train_x.rows() as f64;
    let mean_sq = (0..train_x.rows())
        .map(|r| dot(train_x.row(r), train_x.row(r)) + 1.0)
        .sum::<f64>()
        / n;
    let lip = 0.5 * mean_sq + cfg.l2;
    let step = 1.0 / lip;
    let q = cfg.l2 / lip;
    let beta = (1.0 - q.sqrt()) / (1.0 + q.sqrt());

    let mut w = Mat64::zeros(k, d + 1);
    if cfg.init_std > 0.0 {
        let mut r = Rng::new(cfg.init_seed);
        w.data_mut().iter_mut().for_each(|v| *v = cfg.init_std * r.normal());
    }
    let mut prev = w.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        // look-ahead point
        let mut yk = w.clone();
        for (a, (cur, old)) in yk.data_mut().iter_mut().zip(w.data().iter().zip(prev.data())) {
            *a = cur + beta * (cur - old);
        }
        let (_, g) = probe_objective(&yk, train_x, train_y, cfg.l2);
        iterations += 1;
        let gnorm = dot(g.data(), g.data()).sqrt();
        prev = w;
        w = yk;
        axpy(-step, g.data(), w.data_mut());
        if gnorm < cfg.grad_tol {
            converged = true;
            break;
        }
    }

    let mut confusion = vec![vec![0usize; k]; k];
    for (r, &label) in test_y.iter().enumerate() {
        confusion[label][predict(&w, test_x.row(r))] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(ProbeResult {
        accuracy: if test_y.is_empty() { 0.0 } else { correct as f64 / test_y.len() as f64 },
        per_class,
        confusion,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
}

/// R@k over cosine similarity. Ties rank the lower gallery index first.
pub fn retrieve(
    query: &Mat64,
    query_labels: &[usize],
    gallery: &Mat64,
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalResult> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if query.rows() == 0 {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let unit = |m: &Mat64| -> Result<Vec<Vec<f64>>> { (0..m.rows()).map(|r| Ok(l2_normalize(m.row(r))?.0)).collect() };
    let (qs, gs) = (unit(query)?, unit(gallery)?);
    // rank of the first same-label gallery item for every query
    let first_hit: Vec<Option<usize>> = qs
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut order: Vec<(usize, f64)> = gs.iter().enumerate().map(|(gi, g)| (gi, dot(q, g))).collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            order.iter().position(|&(gi, _)| gallery_labels[gi] == query_labels[qi])
        })
        .collect();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, hits as f64 / qs.len() as f64)
        })
        .collect();
    Ok(RetrievalResult { recall_at })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub probe: ProbeResult,
    pub retrieval: RetrievalResult,
}

impl EvalReport {
    /// Rows `metric,k,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "k", "value"])?;
        w.write_record(["probe_accuracy", "", &self.probe.accuracy.to_string()])?;
        for (c, acc) in self.probe.per_class.iter().enumerate() {
            if let Some(a) = acc {
                w.write_record(["probe_class_accuracy", &c.to_string(), &a.to_string()])?;
            }
        }
        for (k, v) in &self.retrieval.recall_at {
            w.write_record(["recall", &k.to_string(), &v.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = format!("probe accuracy: {:.4}\n", self.probe.accuracy);
        for (k, v) in &self.retrieval.recall_at {
            s.push_str(&format!("R@{k}: {v:.4}\n"));
        }
        s
    }

    pub fn save(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?)?;
        std::fs::write(summary_path, self.summary())?;
        Ok(())
    }
}

/// Probe and retrieval on a stratified split of `corpus`: the first half of
/// each class trains the probe and forms the gallery, the rest are queries.
pub fn evaluate(model: &HicoModel, corpus: &Corpus, opts: &EmbedOptions, probe: &ProbeConfig, seed: u64) -> Result<EvalReport> {
    let emb = embed_corpus(model, corpus, opts, &Rng::new(seed))?;
    let labels = corpus.labels();
    let (tr, te) = stratified_split(&labels);
    let lab = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (xtr, xte) = (select_rows(&emb, &tr), select_rows(&emb, &te));
    let (ytr, yte) = (lab(&tr), lab(&te));
    Ok(EvalReport {
        probe: linear_probe(&xtr, &ytr, &xte, &yte, probe)?,
        retrieval: retrieve(&xte, &yte, &xtr, &ytr, &RECALL_KS)?,
    })
}
