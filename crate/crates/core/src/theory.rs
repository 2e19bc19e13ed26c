//! Two-group stochastic optimization testbed comparing single-phase SGD on
//! the mixture (RS) with a two-phase schedule that first trains on the
//! short-distance group only (GS).
//!
//! The instance is quadratic with identity Hessian:
//! `F_s(w) = ½‖w − a_s‖²`, `F_l(w) = ½‖w − a_l‖²`,
//! `L(w) = (1 − p)F_s(w) + p·F_l(w)`, so `μ = L = 1` and
//! `w* = (1 − p)a_s + p·a_l`.
//!
//! Noise: a `D_s` sample perturbs the gradient by isotropic noise of total
//! variance `σ²`. A `D_l` sample adds the same plus a term of norm
//! `√(h/(2p²))·‖∇L(w)‖` along a random direction. A mixture gradient is
//! `(1 − p)∇ℓ(ξ) + p∇ℓ(ζ)` with `ξ ~ D_s`, `ζ ~ D_l`, whose variance is
//! `(h/2)‖∇L(w)‖² + ((1 − p)² + p²)σ²`.
//!
//! Every step draws its noise from `rng.split(step)`, so RS and GS runs with
//! the same seed see common random numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, sub, Rng, Vec64};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoGroupProblem {
    pub d: usize,
    pub p: f64,
    pub delta_hat: f64,
    pub sigma2: f64,
    pub h: f64,
    pub a_s: Vec64,
    pub a_l: Vec64,
    pub mu: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    S,
    L,
    Mixture,
}

pub fn make_quadratic_instance(d: usize, p: f64, delta_hat: f64, sigma2: f64, h: f64, rng: &mut Rng) -> Result<TwoGroupProblem> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p = {p} outside [0, 1]")));
    }
    for (name, v) in [("delta_hat", delta_hat), ("sigma2", sigma2), ("h", h)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
        }
    }
    let a_s = rng.normal_vec(d, 1.0);
    let mut a_l = a_s.clone();
    axpy(delta_hat, &rng.unit_vector(d), &mut a_l);
    Ok(TwoGroupProblem {
        d,
        p,
        delta_hat,
        sigma2,
        h,
        a_s,
        a_l,
        mu: 1.0,
        l: 1.0,
    })
}

impl TwoGroupProblem {
    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    pub fn w_star(&self) -> Vec64 {
        self.a_s
            .iter()
            .zip(&self.a_l)
            .map(|(s, l)| (1.0 - self.p) * s + self.p * l)
            .collect()
    }

    pub fn f_s(&self, w: &[f64]) -> f64 {
        let e = sub(w, &self.a_s);
        0.5 * dot(&e, &e)
    }

    pub fn f_l(&self, w: &[f64]) -> f64 {
        let e = sub(w, &self.a_l);
        0.5 * dot(&e, &e)
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        (1.0 - self.p) * self.f_s(w) + self.p * self.f_l(w)
    }

    pub fn grad_s(&self, w: &[f64]) -> Vec64 {
        sub(w, &self.a_s)
    }

    pub fn grad_l(&self, w: &[f64]) -> Vec64 {
        sub(w, &self.a_l)
    }

    pub fn grad(&self, w: &[f64]) -> Vec64 {
        sub(w, &self.w_star())
    }

    /// Variance of the mixture gradient at `w`.
    pub fn mixture_variance(&self, w: &[f64]) -> f64 {
        let g = norm(&self.grad(w));
        0.5 * self.h * g * g + ((1.0 - self.p).powi(2) + self.p.powi(2)) * self.sigma2
    }
}

/// `L(w) − L(w*)` in closed form.
pub fn excess_risk(prob: &TwoGroupProblem, w: &[f64]) -> f64 {
    let e = sub(w, &prob.w_star());
    0.5 * dot(&e, &e)
}

fn isotropic(rng: &mut Rng, d: usize, variance: f64) -> Vec64 {
    rng.normal_vec(d, (variance / d as f64).sqrt())
}

/// Unbiased stochastic gradient for the requested group.
pub fn grad_oracle(prob: &TwoGroupProblem, w: &[f64], group: Group, rng: &mut Rng) -> Result<Vec64> {
    if group != Group::S && prob.p == 0.0 {
        return Err(Error::InvalidProbability(prob.p));
    }
    let d = prob.d;
    // draw every stream in a fixed order so groups share random numbers
    let xi = isotropic(rng, d, prob.sigma2);
    let zeta = isotropic(rng, d, prob.sigma2);
    let dir = rng.unit_vector(d);
    let growth = (prob.h / (2.0 * prob.p * prob.p)).sqrt() * norm(&prob.grad(w));

    let sample_s = || {
        let mut g = prob.grad_s(w);
        axpy(1.0, &xi, &mut g);
        g
    };
    let sample_l = || {
        let mut g = prob.grad_l(w);
        axpy(1.0, &zeta, &mut g);
        if growth > 0.0 {
            axpy(growth, &dir, &mut g);
        }
        g
    };
    Ok(match group {
        Group::S => sample_s(),
        Group::L => sample_l(),
        Group::Mixture => {
            let mut g = crate::numerics::scale(&sample_s(), 1.0 - prob.p);
            axpy(prob.p, &sample_l(), &mut g);
            g
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdTrace {
    pub final_w: Vec64,
    pub excess_risk: f64,
    /// Excess risk after every step.
    pub history: Vec64,
}

fn sgd_phase(
    prob: &TwoGroupProblem,
    w: &mut Vec64,
    group: Group,
    eta: f64,
    steps: std::ops::Range<usize>,
    rng: &Rng,
    history: &mut Vec64,
) -> Result<()> {
    for step in steps {
        let g = grad_oracle(prob, w, group, &mut rng.split(step as u64))?;
        axpy(-eta, &g, w);
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        history.push(excess_risk(prob, w));
    }
    Ok(())
}

/// Step size bounds for the single-phase run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `1/[L(1 + hp)]`
    Statement,
    /// `1/[L(1 + h)]`
    Proof,
}

pub fn mixture_eta(prob: &TwoGroupProblem, rule: StepRule) -> f64 {
    match rule {
        StepRule::Statement => 1.0 / (prob.l * (1.0 + prob.h * prob.p)),
        StepRule::Proof => 1.0 / (prob.l * (1.0 + prob.h)),
    }
}

/// Plain SGD on the mixture.
pub fn sgd_rs(prob: &TwoGroupProblem, w0: &[f64], eta: f64, steps: usize, rng: &Rng) -> Result<SgdTrace> {
    if eta > mixture_eta(prob, StepRule::Statement) * (1.0 + 1e-12) {
        log::warn!("step size {eta} exceeds 1/[L(1+hp)]");
    }
    let mut w = w0.to_vec();
    let mut history = Vec::with_capacity(steps);
    sgd_phase(prob, &mut w, Group::Mixture, eta, 0..steps, rng, &mut history)?;
    Ok(SgdTrace {
        excess_risk: excess_risk(prob, &w),
        final_w: w,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsSchedule {
    pub n_prime: usize,
    pub n_dprime: usize,
    pub eta1: f64,
    pub eta: f64,
}

impl GsSchedule {
    pub fn validate(&self, prob: &TwoGroupProblem) -> Result<()> {
        if !(self.eta1 > 0.0 && self.eta1 <= 1.0 / prob.l * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!("eta1 = {} must lie in (0, 1/L]", self.eta1)));
        }
        if self.n_dprime > 0 && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta = {} must be positive", self.eta)));
        }
        Ok(())
    }
}

/// Phase-1 step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase1Rule {
    /// `η1 = 1/L`
    Unit,
    /// `min(1/L, p²Δ̂²/(2σ²L))` for `Δ̂ > 0`, log-scaled in `n′` for `Δ̂ = 0`.
    Proof,
}

pub fn phase1_eta(prob: &TwoGroupProblem, rule: Phase1Rule, n_prime: usize, e0: f64) -> f64 {
    let unit = 1.0 / prob.l;
    match rule {
        Phase1Rule::Unit => unit,
        Phase1Rule::Proof if prob.sigma2 == 0.0 => unit,
        Phase1Rule::Proof if prob.delta_hat < 1e-12 => {
            let n = n_prime.max(1) as f64;
            let arg = 2.0 * prob.mu * prob.mu * n * e0 / (prob.sigma2 * prob.l);
            if arg <= 1.0 {
                unit
            } else {
                (arg.ln() / (prob.mu * n)).min(unit)
            }
        }
        Phase1Rule::Proof => unit.min(prob.p.powi(2) * prob.delta_hat.powi(2) / (2.0 * prob.sigma2 * prob.l)),
    }
}

/// `n′` steps on `D_s` at `η1`, then `n″` steps on the mixture at `η`.
pub fn sgd_gs(prob: &TwoGroupProblem, w0: &[f64], sched: &GsSchedule, rng: &Rng) -> Result<SgdTrace> {
    sched.validate(prob)?;
    let mut w = w0.to_vec();
    let total = sched.n_prime + sched.n_dprime;
    let mut history = Vec::with_capacity(total);
    sgd_phase(prob, &mut w, Group::S, sched.eta1, 0..sched.n_prime, rng, &mut history)?;
    sgd_phase(prob, &mut w, Group::Mixture, sched.eta, sched.n_prime..total, rng, &mut history)?;
    Ok(SgdTrace {
        excess_risk: excess_risk(prob, &w),
        final_w: w,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub d: usize,
    pub p: f64,
    pub h: f64,
    pub delta_hat: f64,
    pub sigma2: f64,
    /// Gradient steps per method.
    pub budget: usize,
    /// Phase-1 length of GS; the rest of the budget goes to phase 2.
    pub n_prime: usize,
    /// Initial excess risk `L(w0) − L(w*)`.
    pub init_excess: f64,
    pub step_rule: StepRule,
    pub phase1_rule: Phase1Rule,
    pub seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            d: 20,
            p: 0.1,
            h: 100.0,
            delta_hat: 0.1,
            sigma2: 1.0,
            budget: 2000,
            n_prime: 1000,
            init_excess: 1e12,
            step_rule: StepRule::Proof,
            phase1_rule: Phase1Rule::Unit,
            seeds: (0..64).collect(),
            bootstrap_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rs,
    Gs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub method: Method,
    pub p: f64,
    pub h: f64,
    pub delta_hat: f64,
    pub sigma2: f64,
    pub budget: usize,
    pub excess_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    pub rows: Vec<ComparisonRow>,
    pub mean_rs: f64,
    pub mean_gs: f64,
    /// Mean of the paired differences `RS − GS`.
    pub mean_gap: f64,
    /// 95% percentile bootstrap interval of the mean paired difference.
    pub ci: (f64, f64),
}

impl ComparisonSummary {
    /// GS is significantly better when the interval lies above zero.
    pub fn gs_wins(&self) -> bool {
        self.ci.0 > 0.0
    }

    pub fn gap_is_significant(&self) -> bool {
        self.ci.0 > 0.0 || self.ci.1 < 0.0
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Percentile bootstrap interval of the mean at level `1 − alpha`.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, alpha: f64, rng: &mut Rng) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| xs[rng.index(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |f: f64| means[((f * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    Ok((q(alpha / 2.0), q(1.0 - alpha / 2.0)))
}

/// Initial point at the requested excess risk from `w*`.
pub fn initial_point(prob: &TwoGroupProblem, init_excess: f64, rng: &mut Rng) -> Vec64 {
    let mut w0 = prob.w_star();
    axpy((2.0 * init_excess).sqrt(), &rng.unit_vector(prob.d), &mut w0);
    w0
}

/// Paired RS/GS runs, one instance and noise stream per seed.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<ComparisonSummary> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    if cfg.n_prime > cfg.budget {
        return Err(Error::InvalidArgument(format!(
            "n_prime {} exceeds budget {}",
            cfg.n_prime, cfg.budget
        )));
    }
    let pairs: Vec<(f64, f64)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let root = Rng::new(seed);
            let prob = make_quadratic_instance(cfg.d, cfg.p, cfg.delta_hat, cfg.sigma2, cfg.h, &mut root.split_named("instance"))?;
            let w0 = initial_point(&prob, cfg.init_excess, &mut root.split_named("init"));
            let noise = root.split_named("noise");
            let eta = mixture_eta(&prob, cfg.step_rule);
            let rs = sgd_rs(&prob, &w0, eta, cfg.budget, &noise)?;
            let sched = GsSchedule {
                n_prime: cfg.n_prime,
                n_dprime: cfg.budget - cfg.n_prime,
                eta1: phase1_eta(&prob, cfg.phase1_rule, cfg.n_prime, cfg.init_excess),
                eta,
            };
            let gs = sgd_gs(&prob, &w0, &sched, &noise)?;
            Ok((rs.excess_risk, gs.excess_risk))
        })
        .collect::<Result<_>>()?;

    let row = |seed, method, excess_risk| ComparisonRow {
        seed,
        method,
        p: cfg.p,
        h: cfg.h,
        delta_hat: cfg.delta_hat,
        sigma2: cfg.sigma2,
        budget: cfg.budget,
        excess_risk,
    };
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (&seed, &(rs, gs)) in cfg.seeds.iter().zip(&pairs) {
        rows.push(row(seed, Method::Rs, rs));
        rows.push(row(seed, Method::Gs, gs));
    }
    let n = pairs.len() as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(r, g)| r - g).collect();
    let mut boot = Rng::new(cfg.seeds[0]).split_named("bootstrap");
    Ok(ComparisonSummary {
        rows,
        mean_rs: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_gs: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        mean_gap: diffs.iter().sum::<f64>() / n,
        ci: bootstrap_mean_ci(&diffs, cfg.bootstrap_resamples, 0.05, &mut boot)?,
    })
}

/// Mean phase-1-only excess risk over the second half of `steps`, averaged
/// over seeds, using the proof's `η1`.
pub fn phase1_plateau(d: usize, p: f64, delta_hat: f64, sigma2: f64, steps: usize, seeds: &[u64]) -> Result<f64> {
    let per_seed: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| {
            let root = Rng::new(seed);
            let prob = make_quadratic_instance(d, p, delta_hat, sigma2, 0.0, &mut root.split_named("instance"))?;
            let w0 = prob.a_s.clone();
            let sched = GsSchedule {
                n_prime: steps,
                n_dprime: 0,
                eta1: phase1_eta(&prob, Phase1Rule::Proof, steps, excess_risk(&prob, &w0)),
                eta: 0.0,
            };
            let trace = sgd_gs(&prob, &w0, &sched, &root.split_named("noise"))?;
            let tail = &trace.history[steps / 2..];
            Ok(tail.iter().sum::<f64>() / tail.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.iter().sum::<f64>() / per_seed.len() as f64)
}

/// `p²Δ̂²/(2μ)`
pub fn bias_floor(prob_p: f64, delta_hat: f64, mu: f64) -> f64 {
    prob_p * prob_p * delta_hat * delta_hat / (2.0 * mu)
}
