//! Monte-Carlo checks of the one-round FedAvg generalization bound for ridge
//! and of the partial-participation expectation identities.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetShard, GeneratorKind, GeneratorSpec, PreparedGenerator, Sample};
use crate::engine::{sample_participants, ParticipationMode, ParticipationSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, Estimate};
use crate::model::{Family, ModelSpec};
use crate::numeric::{fsum, mean_stderr};
use crate::params::{weighted_average, BlockLayout, ParamVector};
use crate::rng::{stream, Domain};

pub const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundTrialConfig {
    pub k: usize,
    pub n_k: usize,
    pub generator: GeneratorSpec,
    pub lambda: f64,
    /// `K(·)`; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub trials: usize,
    pub seed: u64,
}

impl BoundTrialConfig {
    pub fn resolved_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0 / self.k as f64; self.k])
    }

    pub fn model(&self, dim: usize) -> ModelSpec {
        ModelSpec::ridge(dim, self.lambda)
    }

    fn validate(&self) -> Result<PreparedGenerator> {
        if self.trials < MIN_TRIALS {
            return Err(Error::InsufficientTrials { got: self.trials, min: MIN_TRIALS });
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0 for a strongly convex loss, got {}", self.lambda)));
        }
        if self.k == 0 || self.n_k == 0 {
            return Err(Error::Config("k and n_k must be >= 1".into()));
        }
        if !matches!(self.generator.kind, GeneratorKind::GaussianLinear(_)) {
            return Err(Error::UnsupportedFamily("bound verification needs a gaussian_linear generator"));
        }
        let w = self.resolved_weights();
        if w.len() != self.k {
            return Err(Error::CountMismatch(format!("{} weights for {} clients", w.len(), self.k)));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights("K(.) must be nonnegative and sum to 1".into()));
        }
        self.generator.prepare(self.k)
    }
}

/// Output of one trial of one-round FedAvg with exact local ERM.
#[derive(Debug, Clone)]
pub struct OneRound {
    pub shards: Vec<DatasetShard>,
    pub locals: Vec<ParamVector>,
    pub global: ParamVector,
}

/// Draw fresh `S_k`, solve each local ERM exactly and average with `K(·)`.
pub fn one_round_fedavg_erm(config: &BoundTrialConfig, gen: &PreparedGenerator, trial: u64) -> Result<OneRound> {
    let model = config.model(gen.dim());
    if !matches!(model.family, Family::Ridge { .. }) {
        return Err(Error::UnsupportedFamily("one_round_fedavg_erm"));
    }
    let layout = Arc::new(model.layout());
    let mut rng = stream(config.seed, Domain::Trial, trial, 0);
    let shards: Vec<DatasetShard> = (0..config.k)
        .map(|k| DatasetShard {
            samples: gen.draw_many(k, config.n_k, &mut rng),
            owner: k,
            provenance: format!("trial={trial}"),
        })
        .collect();
    let locals =
        shards.iter().map(|s| model.erm_closed_form(Arc::clone(&layout), &s.samples)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ParamVector> = locals.iter().collect();
    let global = weighted_average(&refs, &config.resolved_weights(), None)?;
    Ok(OneRound { shards, locals, global })
}

struct TrialResult {
    lhs: f64,
    local_gen: Vec<f64>,
    non_iid: Vec<f64>,
    l: f64,
    erm_grad_norm: f64,
}

fn run_trial(config: &BoundTrialConfig, gen: &PreparedGenerator, trial: u64) -> Result<TrialResult> {
    let model = config.model(gen.dim());
    let weights = config.resolved_weights();
    let GeneratorKind::GaussianLinear(lin) = &gen.spec().kind else {
        return Err(Error::UnsupportedFamily("bound verification needs a gaussian_linear generator"));
    };
    let round = one_round_fedavg_erm(config, gen, trial)?;
    let mut pop_global = 0.0;
    let mut local_gen = Vec::with_capacity(config.k);
    let mut erm_grad_norm: f64 = 0.0;
    for (k, (shard, local)) in round.shards.iter().zip(&round.locals).enumerate() {
        pop_global += weights[k] * model.population_risk_closed_form(lin, k, &round.global)?;
        let pop_local = model.population_risk_closed_form(lin, k, local)?;
        local_gen.push(pop_local - metrics::mean_loss(&model, local, &shard.samples)?);
        let g = model.loss_and_grad(local, &shard.refs())?.grad;
        erm_grad_norm = erm_grad_norm.max(g.squared_l2(None)?.sqrt());
    }
    let emp_global = metrics::empirical_risk(&model, &round.global, &round.shards, &weights)?;
    let non_iid = metrics::non_iidness(&model, &round.shards, &round.global, &round.locals)?;
    let union: Vec<Sample> = round.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    let (_, l) = model.mu_l_exact(&union)?;
    Ok(TrialResult { lhs: pop_global - emp_global, local_gen, non_iid, l, erm_grad_norm })
}

/// Bound right-hand side
/// `Σ_k K(k)[ (L c_k²/μ) EΔ_k + 2√(L/μ) c_k √(max(0, Eδ_k)·EΔ_k) ]`
/// where `c_k` is the aggregation coefficient of client `k` (`K(k)` under full
/// participation). Products under the root are clamped at zero.
pub fn one_round_bound_rhs(
    weights: &[f64],
    coeffs: &[f64],
    l: f64,
    mu: f64,
    local_gen: &[f64],
    non_iid: &[f64],
) -> f64 {
    let root = (l / mu).sqrt();
    fsum(
        weights
            .iter()
            .zip(coeffs)
            .zip(local_gen.iter().zip(non_iid))
            .map(|((w, c), (g, d))| w * (l * c * c / mu * g + 2.0 * root * c * (d.max(0.0) * g).max(0.0).sqrt())),
    )
}

/// First (local generalization) term of the right-hand side only.
pub fn one_round_bound_first_term(weights: &[f64], l: f64, mu: f64, local_gen: &[f64]) -> f64 {
    fsum(weights.iter().zip(local_gen).map(|(w, g)| w * (l * w * w / mu * g)))
}

/// Aggregation coefficients `c_k` of the partial-participation variants:
/// `1/K̂` with replacement, `K(k)K/K̂` without.
pub fn participation_coeffs(mode: &ParticipationMode, weights: &[f64]) -> Vec<f64> {
    let k = weights.len() as f64;
    match *mode {
        ParticipationMode::Full => weights.to_vec(),
        ParticipationMode::WithReplacement { k_hat } => vec![1.0 / k_hat as f64; weights.len()],
        ParticipationMode::WithoutReplacement { k_hat } => weights.iter().map(|w| w * k / k_hat as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: Estimate,
    pub local_gen: Vec<Estimate>,
    /// Raw estimates; negative values are clamped only inside the bound.
    pub non_iid: Vec<Estimate>,
    pub rhs: f64,
    pub slack: f64,
    pub mu: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub pass: bool,
    pub trials: usize,
    /// Largest ‖∇R_{s_k}(θ_k)‖ over all trials and clients.
    pub max_erm_grad_norm: f64,
}

fn estimate(xs: &[f64]) -> Estimate {
    let (mean, stderr) = mean_stderr(xs);
    Estimate { mean, stderr }
}

/// Estimate both sides of the bound over `trials` independent dataset draws.
/// `μ = λ`; `L` is the largest union-design smoothness constant seen.
pub fn verify_one_round_bound(config: &BoundTrialConfig) -> Result<BoundReport> {
    let gen = config.validate()?;
    let results =
        (0..config.trials as u64).into_par_iter().map(|t| run_trial(config, &gen, t)).collect::<Result<Vec<_>>>()?;
    let column = |f: &dyn Fn(&TrialResult) -> f64| estimate(&results.iter().map(f).collect::<Vec<_>>());
    let local_gen: Vec<Estimate> = (0..config.k).map(|k| column(&|r| r.local_gen[k])).collect();
    let non_iid: Vec<Estimate> = (0..config.k).map(|k| column(&|r| r.non_iid[k])).collect();
    let lhs = column(&|r| r.lhs);
    let l = results.iter().map(|r| r.l).fold(f64::NEG_INFINITY, f64::max);
    let mu = config.lambda;
    let weights = config.resolved_weights();
    let g: Vec<f64> = local_gen.iter().map(|e| e.mean).collect();
    let d: Vec<f64> = non_iid.iter().map(|e| e.mean).collect();
    let rhs = one_round_bound_rhs(&weights, &weights, l, mu, &g, &d);
    let slack = rhs - lhs.mean;
    Ok(BoundReport {
        pass: slack >= -3.0 * lhs.stderr,
        max_erm_grad_norm: results.iter().map(|r| r.erm_grad_norm).fold(0.0, f64::max),
        lhs,
        local_gen,
        non_iid,
        rhs,
        slack,
        mu,
        l,
        trials: config.trials,
    })
}

/// Mean squared deviation of per-sample gradients from the full gradient,
/// an estimate of the stochastic-gradient noise `σ²` at `params`.
pub fn gradient_noise(model: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let full = model.loss_and_grad(params, &refs)?.grad;
    let mut total = 0.0;
    for s in samples {
        let mut g = model.loss_and_grad(params, &[s])?.grad;
        g.axpy(-1.0, &full, None)?;
        total += g.squared_l2(None)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// With replacement from `K(·)`, equal weights.
    I,
    /// Without replacement, uniform, weights `K(k)K/K̂`.
    II,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub monte_carlo: f64,
    pub stderr: f64,
    pub analytic: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub scheme: Scheme,
    pub k: usize,
    pub k_hat: usize,
    pub draws: usize,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Sample participant sets and compare `E_P Σ_i ŵ_i^j x_{k_i}` (`j = 1, 2, 3`)
/// against their closed forms. `x` defaults to `x_k = k + 1`.
pub fn verify_participation_identities(
    k: usize,
    k_hat: usize,
    weights: &[f64],
    scheme: Scheme,
    draws: usize,
    seed: u64,
    x: Option<&[f64]>,
) -> Result<IdentityReport> {
    if draws < 2 {
        return Err(Error::InsufficientTrials { got: draws, min: 2 });
    }
    let default_x: Vec<f64> = (1..=k).map(|i| i as f64).collect();
    let x = x.unwrap_or(&default_x);
    if x.len() != k || weights.len() != k {
        return Err(Error::CountMismatch(format!("K = {k}, {} weights, {} x values", weights.len(), x.len())));
    }
    let mode = match scheme {
        Scheme::I => ParticipationMode::WithReplacement { k_hat },
        Scheme::II => ParticipationMode::WithoutReplacement { k_hat },
    };
    let spec = ParticipationSpec { mode, base_weights: weights.to_vec() };
    spec.validate()?;
    let mut rng = stream(seed, Domain::Identity, k as u64, k_hat as u64);
    let mut samples: [Vec<f64>; 3] = [Vec::with_capacity(draws), Vec::with_capacity(draws), Vec::with_capacity(draws)];
    for _ in 0..draws {
        let p = sample_participants(&spec, &mut rng)?;
        for (j, out) in samples.iter_mut().enumerate() {
            out.push(fsum(p.clients.iter().zip(&p.weights).map(|(&c, &w)| w.powi(j as i32 + 1) * x[c])));
        }
    }
    let mean_x = fsum(weights.iter().zip(x).map(|(w, v)| w * v));
    let (kf, kh) = (k as f64, k_hat as f64);
    let analytic = match scheme {
        Scheme::I => [mean_x, mean_x / kh, mean_x / (kh * kh)],
        Scheme::II => [
            mean_x,
            kf / kh * fsum(weights.iter().zip(x).map(|(w, v)| w * w * v)),
            kf * kf / (kh * kh) * fsum(weights.iter().zip(x).map(|(w, v)| w * w * w * v)),
        ],
    };
    let names = ["mean", "weighted_by_w", "weighted_by_w_squared"];
    let checks = samples
        .iter()
        .zip(analytic)
        .zip(names)
        .map(|((s, a), name)| {
            let (mc, se) = mean_stderr(s);
            let tol = (3.0 * se).max(1e-12 * a.abs().max(1.0));
            IdentityCheck { name: name.into(), monte_carlo: mc, stderr: se, analytic: a, pass: (mc - a).abs() <= tol }
        })
        .collect();
    Ok(IdentityReport { scheme, k, k_hat, draws, checks })
}

/// Layout of the ridge model used by the bound trials.
pub fn ridge_layout(dim: usize, lambda: f64) -> Arc<BlockLayout> {
    Arc::new(ModelSpec::ridge(dim, lambda).layout())
}
