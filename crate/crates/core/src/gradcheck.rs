//! Finite-difference self-check of every hand-derived gradient.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{build_pair_set, topic_labels, total_loss, tp_loss, vcl_loss, ConcatMode, LossConfig, TopicalPairs};
use crate::model::{
    backward_batch, encode_features, mlp_backward, mlp_forward, Activation, EmbeddingBatch, FinalActivation, HicoModel, Mlp, MlpSpec,
    ModelConfig,
};
use crate::numerics::{dot, fd_gradient, max_rel_error, Mat64, Rng, FD_STEP};

pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Input and parameter gradients of a standalone MLP.
    Mlp,
    /// Contrastive loss w.r.t. visual embeddings.
    VclLoss,
    /// Focal pair loss w.r.t. predicted consistencies.
    TpLoss,
    /// Total loss w.r.t. topical embeddings, through the predictor.
    TotalLossT,
    /// Total loss w.r.t. predictor parameters.
    TotalLossPhi,
    /// Total loss w.r.t. encoder parameters, through both heads.
    Encoder,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Mlp,
        Component::VclLoss,
        Component::TpLoss,
        Component::TotalLossT,
        Component::TotalLossPhi,
        Component::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Mlp => "mlp",
            Component::VclLoss => "vcl_loss",
            Component::TpLoss => "tp_loss",
            Component::TotalLossT => "total_loss_t",
            Component::TotalLossPhi => "total_loss_phi",
            Component::Encoder => "encoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub points: usize,
    pub worst_rel_error: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < GRADCHECK_TOL
    }
}

/// Test fixture: negates the analytic gradient of one component.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mutation {
    pub sign_flip: Option<Component>,
}

fn compare(c: Component, analytic: &[f64], numeric: &[f64], m: Mutation) -> f64 {
    if m.sign_flip == Some(c) {
        let flipped: Vec<f64> = analytic.iter().map(|v| -v).collect();
        max_rel_error(&flipped, numeric)
    } else {
        max_rel_error(analytic, numeric)
    }
}

fn random_batch(n: usize, dz: usize, dt: usize, rng: &mut Rng) -> EmbeddingBatch {
    EmbeddingBatch {
        z: Mat64::from_vec(3 * n, dz, rng.normal_vec(3 * n * dz, 1.0)).expect("shape"),
        t: Mat64::from_vec(3 * n, dt, rng.normal_vec(3 * n * dt, 1.0)).expect("shape"),
        index: EmbeddingBatch::standard_index(n),
    }
}

/// Cycles through the loss variants so every point exercises a different
/// pool, pair set or loss assignment.
fn loss_variant(k: usize) -> LossConfig {
    let base = LossConfig::default();
    match k % 4 {
        0 => base,
        1 => LossConfig::contrastive_only(),
        2 => LossConfig {
            concat_mode: ConcatMode::Unidirectional,
            exclude_self_pairs: true,
            topical_pairs: TopicalPairs::Cl,
            ..base
        },
        _ => LossConfig {
            include_vk_negatives: false,
            ..base
        },
    }
}

fn check_mlp(rng: &mut Rng, m: Mutation) -> Result<f64> {
    let (hidden, last) = if rng.bernoulli(0.5) {
        (Activation::Relu, FinalActivation::None)
    } else {
        (Activation::Tanh, FinalActivation::Sigmoid)
    };
    let spec = MlpSpec::new(vec![4, 6, 5, 3], hidden, last)?;
    let mlp = Mlp::init(spec, rng);
    let x = rng.normal_vec(4, 1.0);
    let c = rng.normal_vec(3, 1.0);
    let (_, cache) = mlp_forward(&mlp.spec, &mlp.params, &x)?;
    let (dx, dp) = mlp_backward(&mlp.spec, &mlp.params, &cache, &c)?;
    let num_x = fd_gradient(|v| dot(&mlp.apply(v).expect("forward"), &c), &x, FD_STEP)?;
    let mut probe = mlp.clone();
    let num_p = fd_gradient(
        |v| {
            probe.params.unflatten(v);
            dot(&probe.apply(&x).expect("forward"), &c)
        },
        &mlp.params.flatten(),
        FD_STEP,
    )?;
    Ok(compare(Component::Mlp, &dx, &num_x, m).max(compare(Component::Mlp, &dp.flatten(), &num_p, m)))
}

fn check_vcl(k: usize, rng: &mut Rng, m: Mutation) -> Result<f64> {
    let b = random_batch(2 + k % 3, 4, 2, rng);
    let cfg = loss_variant(k);
    let (_, dz) = vcl_loss(&b, &cfg)?;
    let num = fd_gradient(
        |v| {
            let probe = EmbeddingBatch {
                z: Mat64::from_vec(b.z.rows(), b.z.cols(), v.to_vec()).expect("shape"),
                ..b.clone()
            };
            vcl_loss(&probe, &cfg).map_or(f64::NAN, |r| r.0)
        },
        b.z.data(),
        FD_STEP,
    )?;
    Ok(compare(Component::VclLoss, dz.data(), &num, m))
}

fn check_tp(k: usize, rng: &mut Rng, m: Mutation) -> Result<f64> {
    let n = 2 + k % 3;
    let index = EmbeddingBatch::standard_index(n);
    let pairs = build_pair_set(&(0..3 * n).collect::<Vec<_>>(), ConcatMode::Bidirectional, false);
    let labels = topic_labels(&index, &pairs);
    let probs: Vec<f64> = (0..pairs.pairs.len()).map(|_| rng.uniform_in(0.05, 0.95)).collect();
    let (_, dm) = tp_loss(&probs, &labels, 0.5)?;
    let num = fd_gradient(|v| tp_loss(v, &labels, 0.5).map_or(f64::NAN, |r| r.0), &probs, FD_STEP)?;
    Ok(compare(Component::TpLoss, &dm, &num, m))
}

fn total_objective(b: &EmbeddingBatch, phi: &Mlp, cfg: &LossConfig) -> f64 {
    total_loss(b, phi, cfg).map_or(f64::NAN, |r| r.total)
}

fn small_predictor(dt: usize, rng: &mut Rng) -> Result<Mlp> {
    let spec = MlpSpec::new(vec![2 * dt, 5, 1], Activation::Relu, FinalActivation::None)?;
    Ok(Mlp::init(spec, rng))
}

fn check_total_t(k: usize, rng: &mut Rng, m: Mutation) -> Result<f64> {
    let b = random_batch(2 + k % 2, 3, 3, rng);
    let phi = small_predictor(3, rng)?;
    let cfg = loss_variant(k);
    let bundle = total_loss(&b, &phi, &cfg)?;
    let num = fd_gradient(
        |v| {
            let probe = EmbeddingBatch {
                t: Mat64::from_vec(b.t.rows(), b.t.cols(), v.to_vec()).expect("shape"),
                ..b.clone()
            };
            total_objective(&probe, &phi, &cfg)
        },
        b.t.data(),
        FD_STEP,
    )?;
    Ok(compare(Component::TotalLossT, bundle.dt.data(), &num, m))
}

fn check_total_phi(k: usize, rng: &mut Rng, m: Mutation) -> Result<f64> {
    let b = random_batch(2 + k % 2, 3, 3, rng);
    let phi = small_predictor(3, rng)?;
    let cfg = loss_variant(k);
    let bundle = total_loss(&b, &phi, &cfg)?;
    let mut probe = phi.clone();
    let num = fd_gradient(
        |v| {
            probe.params.unflatten(v);
            total_objective(&b, &probe, &cfg)
        },
        &phi.params.flatten(),
        FD_STEP,
    )?;
    Ok(compare(Component::TotalLossPhi, &bundle.dphi.flatten(), &num, m))
}

fn check_encoder(k: usize, rng: &mut Rng, m: Mutation) -> Result<f64> {
    let cfg = ModelConfig {
        d_feat: 4,
        encoder_hidden: 5,
        d_repr: 4,
        head_hidden: 5,
        d_z: 3,
        d_t: 3,
        phi_hidden: 4,
    };
    let mut model = HicoModel::init(&cfg, &rng.split(k as u64))?;
    // smooth hidden units keep the differences away from relu kinks
    for net in [&mut model.f, &mut model.g, &mut model.h] {
        net.spec.activations.iter_mut().for_each(|a| *a = Activation::Tanh);
    }
    let xs: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4, 1.0)).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let loss = loss_variant(k);
    let (batch, caches) = encode_features(&model, &refs)?;
    let bundle = total_loss(&batch, &model.phi, &loss)?;
    let mut grads = model.zeros_like();
    backward_batch(&model, &caches, &bundle.dz, &bundle.dt, &mut grads)?;
    let mut probe = model.clone();
    let num = fd_gradient(
        |v| {
            probe.f.params.unflatten(v);
            encode_features(&probe, &refs)
                .and_then(|(b, _)| total_loss(&b, &probe.phi, &loss))
                .map_or(f64::NAN, |r| r.total)
        },
        &model.f.params.flatten(),
        FD_STEP,
    )?;
    Ok(compare(Component::Encoder, &grads.f.flatten(), &num, m))
}

/// Runs every component at `points` random points and reports the worst
/// relative error of each.
pub fn run_gradcheck(points: usize, seed: u64, mutation: Mutation) -> Result<Vec<ComponentReport>> {
    let root = Rng::new(seed);
    Component::ALL
        .into_iter()
        .map(|c| {
            let mut rng = root.split_named(c.name());
            let mut worst: f64 = 0.0;
            for k in 0..points {
                let e = match c {
                    Component::Mlp => check_mlp(&mut rng, mutation)?,
                    Component::VclLoss => check_vcl(k, &mut rng, mutation)?,
                    Component::TpLoss => check_tp(k, &mut rng, mutation)?,
                    Component::TotalLossT => check_total_t(k, &mut rng, mutation)?,
                    Component::TotalLossPhi => check_total_phi(k, &mut rng, mutation)?,
                    Component::Encoder => check_encoder(k, &mut rng, mutation)?,
                };
                worst = worst.max(e);
            }
            Ok(ComponentReport {
                component: c,
                points,
                worst_rel_error: worst,
            })
        })
        .collect()
}
