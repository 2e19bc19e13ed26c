//! Small MLPs for the encoder `f`, the heads `g` and `h`, and the topical
//! predictor `φ`, with hand-written backward passes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, sigmoid, Mat64, Rng, Vec64};
use crate::timeline::ClipTriple;

pub const CHECKPOINT_FORMAT: &str = "hico-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    /// One entry per hidden layer.
    pub activations: Vec<Activation>,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, hidden: Activation, final_activation: FinalActivation) -> Result<Self> {
        let n_hidden = layer_dims.len().saturating_sub(2);
        let spec = Self {
            layer_dims,
            activations: vec![hidden; n_hidden],
            final_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least 2 layer dims, got {}",
                self.layer_dims.len()
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_dims.len() - 2 {
            return Err(Error::DimensionMismatch {
                what: "hidden activations",
                expected: self.layer_dims.len() - 2,
                got: self.activations.len(),
            });
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub w: Mat64,
    pub b: Vec64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_dims
                .windows(2)
                .map(|w| Dense {
                    w: Mat64::zeros(w[1], w[0]),
                    b: vec![0.0; w[1]],
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers() {
            return Err(Error::DimensionMismatch {
                what: "layer count",
                expected: spec.n_layers(),
                got: self.layers.len(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (din, dout) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            if layer.w.rows() != dout || layer.w.cols() != din || layer.b.len() != dout {
                return Err(Error::DimensionMismatch {
                    what: "layer shape",
                    expected: din * dout,
                    got: layer.w.rows() * layer.w.cols(),
                });
            }
        }
        Ok(())
    }

    /// Flat view in layer order, weights before biases.
    pub fn flatten(&self) -> Vec64 {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.len()).sum()
    }

    /// Overwrites parameters from a flat vector produced by [`Self::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.data().len();
            l.w.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, b.w.data(), a.w.data_mut());
            axpy(alpha, &b.b, &mut a.b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.data_mut().iter_mut().for_each(|v| *v *= s);
            l.b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.data().iter().chain(&l.b).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

/// He-scaled gaussian weights for relu layers, Xavier for tanh and output
/// layers; zero biases.
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> MlpParams {
    let mut p = MlpParams::zeros(spec);
    for (l, layer) in p.layers.iter_mut().enumerate() {
        let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        let std = match spec.activations.get(l) {
            Some(Activation::Relu) => (2.0 / fan_in as f64).sqrt(),
            _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        for v in layer.w.data_mut() {
            *v = std * rng.normal();
        }
    }
    p
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer; empty for layer 0 when the forward pass started
    /// from a precomputed pre-activation.
    inputs: Vec<Vec64>,
    pre: Vec<Vec64>,
    output: Vec64,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn activate(spec: &MlpSpec, l: usize, pre: &[f64]) -> Vec64 {
    match spec.activations.get(l) {
        Some(Activation::Relu) => pre.iter().map(|&v| v.max(0.0)).collect(),
        Some(Activation::Tanh) => pre.iter().map(|v| v.tanh()).collect(),
        None => match spec.final_activation {
            FinalActivation::None => pre.to_vec(),
            FinalActivation::Sigmoid => pre.iter().map(|&v| sigmoid(v)).collect(),
        },
    }
}

/// Multiplies `d` (gradient w.r.t. the activation output) by the activation
/// derivative in place.
fn activate_backward(spec: &MlpSpec, l: usize, pre: &[f64], out: &[f64], d: &mut [f64]) {
    match spec.activations.get(l) {
        Some(Activation::Relu) => d.iter_mut().zip(pre).for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0
            }
        }),
        Some(Activation::Tanh) => d.iter_mut().zip(out).for_each(|(g, &y)| *g *= 1.0 - y * y),
        None => {
            if spec.final_activation == FinalActivation::Sigmoid {
                d.iter_mut().zip(out).for_each(|(g, &y)| *g *= y * (1.0 - y));
            }
        }
    }
}

fn run_layers(spec: &MlpSpec, params: &MlpParams, start: usize, mut inputs: Vec<Vec64>, first_pre: Vec64) -> MlpCache {
    let n = spec.n_layers();
    let mut pre = Vec::with_capacity(n);
    let mut h = activate(spec, start, &first_pre);
    pre.push(first_pre);
    for l in start + 1..n {
        let layer = &params.layers[l];
        let mut p = layer.w.matvec(&h);
        axpy(1.0, &layer.b, &mut p);
        inputs.push(h);
        h = activate(spec, l, &p);
        pre.push(p);
    }
    MlpCache {
        inputs,
        pre,
        output: h,
    }
}

pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<(Vec64, MlpCache)> {
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "mlp input",
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    let layer = &params.layers[0];
    let mut p = layer.w.matvec(x);
    axpy(1.0, &layer.b, &mut p);
    let cache = run_layers(spec, params, 0, vec![x.to_vec()], p);
    Ok((cache.output.clone(), cache))
}

/// Continues a forward pass from the pre-activation of layer 0, which the
/// caller computed some other way.
pub fn mlp_forward_from_pre(spec: &MlpSpec, params: &MlpParams, pre0: Vec64) -> Result<(Vec64, MlpCache)> {
    if pre0.len() != spec.layer_dims[1] {
        return Err(Error::DimensionMismatch {
            what: "first pre-activation",
            expected: spec.layer_dims[1],
            got: pre0.len(),
        });
    }
    let cache = run_layers(spec, params, 0, vec![Vec::new()], pre0);
    Ok((cache.output.clone(), cache))
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// w.r.t. the input, or w.r.t. the layer-0 pre-activation for caches built by
/// [`mlp_forward_from_pre`] (layer-0 parameter gradients are then left to the
/// caller).
pub fn mlp_backward_into(
    spec: &MlpSpec,
    params: &MlpParams,
    cache: &MlpCache,
    dy: &[f64],
    grads: &mut MlpParams,
) -> Result<Vec64> {
    let n = spec.n_layers();
    if cache.pre.len() != n || cache.inputs.len() != n || dy.len() != cache.output.len() {
        return Err(Error::DimensionMismatch {
            what: "stale cache",
            expected: n,
            got: cache.pre.len(),
        });
    }
    let mut d = dy.to_vec();
    for l in (0..n).rev() {
        let out = if l + 1 < n { &cache.inputs[l + 1] } else { &cache.output };
        activate_backward(spec, l, &cache.pre[l], out, &mut d);
        let input = &cache.inputs[l];
        if l == 0 && input.is_empty() {
            return Ok(d);
        }
        grads.layers[l].w.add_outer(1.0, &d, input);
        axpy(1.0, &d, &mut grads.layers[l].b);
        d = params.layers[l].w.matvec_t(&d);
    }
    Ok(d)
}

pub fn mlp_backward(spec: &MlpSpec, params: &MlpParams, cache: &MlpCache, dy: &[f64]) -> Result<(Vec64, MlpParams)> {
    let mut grads = MlpParams::zeros(spec);
    let dx = mlp_backward_into(spec, params, cache, dy, &mut grads)?;
    Ok((dx, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        let params = init_params(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec64, MlpCache)> {
        mlp_forward(&self.spec, &self.params, x)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec64> {
        Ok(self.forward(x)?.0)
    }
}

/// Layer widths of the four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub encoder_hidden: usize,
    pub d_repr: usize,
    pub head_hidden: usize,
    pub d_z: usize,
    pub d_t: usize,
    pub phi_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 32,
            encoder_hidden: 64,
            d_repr: 64,
            head_hidden: 128,
            d_z: 128,
            d_t: 128,
            phi_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![self.d_feat, self.encoder_hidden, self.encoder_hidden, self.d_repr],
            Activation::Relu,
            FinalActivation::None,
        )
    }

    pub fn visual_head_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![self.d_repr, self.head_hidden, self.d_z],
            Activation::Relu,
            FinalActivation::None,
        )
    }

    pub fn topical_head_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![self.d_repr, self.head_hidden, self.d_t],
            Activation::Relu,
            FinalActivation::None,
        )
    }

    /// The sigmoid is applied by the loss so it can clamp and fuse the
    /// derivative; the network itself ends in a logit.
    pub fn predictor_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![2 * self.d_t, self.phi_hidden, 1],
            Activation::Relu,
            FinalActivation::None,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HicoModel {
    pub f: Mlp,
    pub g: Mlp,
    pub h: Mlp,
    pub phi: Mlp,
}

impl HicoModel {
    pub fn init(cfg: &ModelConfig, rng: &Rng) -> Result<Self> {
        Ok(Self {
            f: Mlp::init(cfg.encoder_spec()?, &mut rng.split_named("f")),
            g: Mlp::init(cfg.visual_head_spec()?, &mut rng.split_named("g")),
            h: Mlp::init(cfg.topical_head_spec()?, &mut rng.split_named("h")),
            phi: Mlp::init(cfg.predictor_spec()?, &mut rng.split_named("phi")),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for net in [&self.f, &self.g, &self.h, &self.phi] {
            net.spec.validate()?;
            net.params.check_shapes(&net.spec)?;
        }
        let chain = [
            ("f→g", self.f.spec.output_dim(), self.g.spec.input_dim()),
            ("f→h", self.f.spec.output_dim(), self.h.spec.input_dim()),
            ("h→φ", 2 * self.h.spec.output_dim(), self.phi.spec.input_dim()),
        ];
        for (what, expected, got) in chain {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.f, &self.g, &self.h, &self.phi]
            .iter()
            .all(|n| n.params.is_finite())
    }

    pub fn zeros_like(&self) -> ModelGrads {
        ModelGrads {
            f: MlpParams::zeros(&self.f.spec),
            g: MlpParams::zeros(&self.g.spec),
            h: MlpParams::zeros(&self.h.spec),
            phi: MlpParams::zeros(&self.phi.spec),
        }
    }

    /// `g(f(x))`, the visual embedding.
    pub fn embed_visual(&self, x: &[f64]) -> Result<Vec64> {
        self.g.apply(&self.f.apply(x)?)
    }

    pub fn embed_repr(&self, x: &[f64]) -> Result<Vec64> {
        self.f.apply(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => return Err(Error::Checkpoint(format!("unsupported header {other:?}"))),
            None => return Err(Error::Checkpoint("missing format header".into())),
        }
        let ckpt: Checkpoint = serde_json::from_value(v)?;
        ckpt.model.validate()?;
        if !ckpt.model.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(ckpt.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: HicoModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub f: MlpParams,
    pub g: MlpParams,
    pub h: MlpParams,
    pub phi: MlpParams,
}

impl ModelGrads {
    pub fn sq_norm(&self) -> f64 {
        self.f.sq_norm() + self.g.sq_norm() + self.h.sq_norm() + self.phi.sq_norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    I,
    J,
    K,
}

/// Embeddings of the `3N` clips of a batch. Row `3n + s` holds video `n`,
/// slot `s` in the order `i, j, k`.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub z: Mat64,
    pub t: Mat64,
    /// `(video, slot)` per row.
    pub index: Vec<(usize, Slot)>,
}

impl EmbeddingBatch {
    pub fn n_videos(&self) -> usize {
        self.z.rows() / 3
    }

    pub fn row_of(n: usize, slot: Slot) -> usize {
        3 * n
            + match slot {
                Slot::I => 0,
                Slot::J => 1,
                Slot::K => 2,
            }
    }

    pub fn video_of(&self, row: usize) -> usize {
        self.index[row].0
    }

    pub fn standard_index(n_videos: usize) -> Vec<(usize, Slot)> {
        (0..n_videos)
            .flat_map(|n| [(n, Slot::I), (n, Slot::J), (n, Slot::K)])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.z.rows();
        if rows % 3 != 0 || self.t.rows() != rows || self.index.len() != rows {
            return Err(Error::DimensionMismatch {
                what: "embedding batch rows",
                expected: rows,
                got: self.t.rows(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for &(n, s) in &self.index {
            if n >= rows / 3 || !seen.insert((n, s)) {
                return Err(Error::InvalidArgument("index map is not a bijection".into()));
            }
        }
        Ok(())
    }
}

/// Forward caches of one clip through `f`, `g` and `h`.
#[derive(Debug, Clone)]
pub struct ClipCache {
    pub f: MlpCache,
    pub g: MlpCache,
    pub h: MlpCache,
}

/// Embeds all clips of a batch. Rows follow [`EmbeddingBatch::standard_index`].
pub fn encode_features(model: &HicoModel, xs: &[&[f64]]) -> Result<(EmbeddingBatch, Vec<ClipCache>)> {
    if xs.len() % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} clips do not form triples",
            xs.len()
        )));
    }
    let caches: Vec<ClipCache> = xs
        .par_iter()
        .map(|x| {
            let (r, fc) = model.f.forward(x)?;
            let (_, gc) = model.g.forward(&r)?;
            let (_, hc) = model.h.forward(&r)?;
            Ok(ClipCache { f: fc, g: gc, h: hc })
        })
        .collect::<Result<_>>()?;
    let z = Mat64::from_rows(&caches.iter().map(|c| c.g.output.clone()).collect::<Vec<_>>())?;
    let t = Mat64::from_rows(&caches.iter().map(|c| c.h.output.clone()).collect::<Vec<_>>())?;
    let batch = EmbeddingBatch {
        z,
        t,
        index: EmbeddingBatch::standard_index(xs.len() / 3),
    };
    Ok((batch, caches))
}

pub fn encode_batch(model: &HicoModel, triples: &[ClipTriple]) -> Result<(EmbeddingBatch, Vec<ClipCache>)> {
    let xs: Vec<&[f64]> = triples
        .iter()
        .flat_map(|t| t.features().map(|v| v.as_slice()))
        .collect();
    encode_features(model, &xs)
}

/// Backpropagates embedding gradients into `f`, `g`, `h`, accumulating into
/// `grads`. Per-clip work runs in parallel; reduction order is fixed.
pub fn backward_batch(
    model: &HicoModel,
    caches: &[ClipCache],
    dz: &Mat64,
    dt: &Mat64,
    grads: &mut ModelGrads,
) -> Result<()> {
    let per_clip: Vec<(MlpParams, MlpParams, MlpParams)> = caches
        .par_iter()
        .enumerate()
        .map(|(r, c)| {
            let mut gf = MlpParams::zeros(&model.f.spec);
            let mut gg = MlpParams::zeros(&model.g.spec);
            let mut gh = MlpParams::zeros(&model.h.spec);
            let mut dr = mlp_backward_into(&model.g.spec, &model.g.params, &c.g, dz.row(r), &mut gg)?;
            let dr_h = mlp_backward_into(&model.h.spec, &model.h.params, &c.h, dt.row(r), &mut gh)?;
            axpy(1.0, &dr_h, &mut dr);
            mlp_backward_into(&model.f.spec, &model.f.params, &c.f, &dr, &mut gf)?;
            Ok((gf, gg, gh))
        })
        .collect::<Result<_>>()?;
    for (gf, gg, gh) in &per_clip {
        grads.f.axpy(1.0, gf);
        grads.g.axpy(1.0, gg);
        grads.h.axpy(1.0, gh);
    }
    Ok(())
}
