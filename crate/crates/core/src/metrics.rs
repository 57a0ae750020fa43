//! Measured quantities: empirical and population risk, generalization gap,
//! per-block consensus distance, non-iidness and the round-averaged
//! generalization error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetShard, GeneratorKind, PreparedGenerator, Sample};
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec};
use crate::numeric::ExactSum;
use crate::params::{ParamVector, Role};
use crate::rng::{stream, Domain};

/// One row of the metrics stream. Risk fields are filled at sync events and
/// at the final step; the key set is the same for every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub step: usize,
    pub train_risk: Option<f64>,
    pub test_risk: Option<f64>,
    pub test_risk_stderr: Option<f64>,
    pub gen_gap: Option<f64>,
    pub accuracy: Option<f64>,
    pub consensus: BTreeMap<String, f64>,
    pub comm_uploaded: u64,
    pub comm_downloaded: u64,
    pub per_client_risks: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Where population risk comes from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// Fresh draws from `D_k`; exact closed form for ridge on a Gaussian
    /// linear generator, otherwise `mc_samples` draws per client.
    Generator { gen: PreparedGenerator, mc_samples: usize },
    /// One held-out shard per client.
    Holdout(Vec<DatasetShard>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSelector {
    All,
    Role(Role),
    Name(String),
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n != weights.len() {
        return Err(Error::CountMismatch(format!("{} weights for {n} clients", weights.len())));
    }
    Ok(())
}

/// Mean per-sample loss of `params` over `samples`.
pub fn mean_loss(model: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    model.loss(params, &refs)
}

/// `R_S(θ) = Σ_k K(k) · (1/n_k) Σ_i l(θ, z_{k,i})`.
pub fn empirical_risk(
    model: &ModelSpec,
    params: &ParamVector,
    shards: &[DatasetShard],
    weights: &[f64],
) -> Result<f64> {
    check_weights(shards.len(), weights)?;
    if shards.iter().any(DatasetShard::is_empty) {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (s, w) in shards.iter().zip(weights) {
        total += w * mean_loss(model, params, &s.samples)?;
    }
    Ok(total)
}

fn loss_stats(model: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut losses = Vec::with_capacity(samples.len());
    for s in samples {
        losses.push(model.loss(params, &[s])?);
    }
    let n = losses.len() as f64;
    let mut acc = ExactSum::new();
    losses.iter().for_each(|l| acc.add(*l));
    let mean = acc.value() / n;
    let var =
        if losses.len() > 1 { losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok((mean, var / n))
}

/// Population risk `R_k(θ)` of one client with its variance of the mean.
pub fn client_population_risk(
    model: &ModelSpec,
    params: &ParamVector,
    source: &EvalSource,
    client: usize,
) -> Result<(f64, f64)> {
    match source {
        EvalSource::Generator { gen, mc_samples } => match (&gen.spec().kind, &model.family) {
            (GeneratorKind::GaussianLinear(g), Family::Ridge { .. }) => {
                Ok((model.population_risk_closed_form(g, client, params)?, 0.0))
            }
            _ => {
                if *mc_samples == 0 {
                    return Err(Error::NoEvalSource("mc_samples = 0".into()));
                }
                let mut rng = stream(gen.spec().seed, Domain::Eval, client as u64, 0);
                let fresh = gen.draw_many(client, *mc_samples, &mut rng);
                loss_stats(model, params, &fresh)
            }
        },
        EvalSource::Holdout(shards) => {
            let shard = shards
                .get(client)
                .ok_or_else(|| Error::NoEvalSource(format!("no holdout shard for client {client}")))?;
            if shard.is_empty() {
                return Err(Error::NoEvalSource(format!("holdout shard {client} is empty")));
            }
            loss_stats(model, params, &shard.samples)
        }
    }
}

/// `R(θ) = E_{k∼K} R_k(θ)` with a standard error (zero when exact).
pub fn population_risk_estimate(
    model: &ModelSpec,
    params: &ParamVector,
    source: &EvalSource,
    weights: &[f64],
) -> Result<Estimate> {
    let mut mean = 0.0;
    let mut var = 0.0;
    for (k, w) in weights.iter().enumerate() {
        let (m, v) = client_population_risk(model, params, source, k)?;
        mean += w * m;
        var += w * w * v;
    }
    Ok(Estimate { mean, stderr: var.sqrt() })
}

/// Fraction of held-out samples classified correctly.
pub fn accuracy(model: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Option<f64> {
    if !model.is_classifier() || samples.is_empty() {
        return None;
    }
    let correct = samples.iter().filter(|s| model.is_correct(params, s)).count();
    Some(correct as f64 / samples.len() as f64)
}

fn selected_ranges(params: &ParamVector, sel: &BlockSelector) -> Result<Vec<std::ops::Range<usize>>> {
    let layout = params.layout();
    Ok(match sel {
        BlockSelector::All => layout.blocks().iter().map(|b| b.range()).collect(),
        BlockSelector::Role(r) => layout.selected(Some(*r)).map(|b| b.range()).collect(),
        BlockSelector::Name(n) => {
            vec![layout.block(n).ok_or_else(|| Error::UnknownBlock(n.clone()))?.range()]
        }
    })
}

/// `(1/K) Σ_k ‖θ̂ − θ_k‖²` on the selected blocks with `θ̂` the uniform mean.
pub fn consensus_distance(clients: &[&ParamVector], sel: &BlockSelector) -> Result<f64> {
    let k = clients.len();
    if k == 0 {
        return Err(Error::CountMismatch("no clients".into()));
    }
    let uniform = vec![1.0 / k as f64; k];
    consensus_distance_weighted(clients, &uniform, sel)
}

/// Consensus distance around the `weights`-weighted mean, still averaged
/// uniformly over clients.
pub fn consensus_distance_weighted(clients: &[&ParamVector], weights: &[f64], sel: &BlockSelector) -> Result<f64> {
    let k = clients.len();
    check_weights(k, weights)?;
    if k == 0 {
        return Err(Error::CountMismatch("no clients".into()));
    }
    let ranges = selected_ranges(clients[0], sel)?;
    if k == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in ranges {
        for i in r {
            let base = clients[0].values()[i];
            let mut shift = 0.0;
            for (c, w) in clients.iter().zip(weights) {
                shift += w * (c.values()[i] - base);
            }
            let mean = base + shift;
            for c in clients {
                let d = mean - c.values()[i];
                total += d * d;
            }
        }
    }
    Ok(total / k as f64)
}

/// Consensus distance for every named block.
pub fn consensus_by_block(clients: &[&ParamVector]) -> Result<BTreeMap<String, f64>> {
    let layout = clients[0].layout();
    layout
        .blocks()
        .iter()
        .map(|b| Ok((b.name.clone(), consensus_distance(clients, &BlockSelector::Name(b.name.clone()))?)))
        .collect()
}

/// Average model and per-client sample sets of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub theta_hat: ParamVector,
    /// `Z_{k,r}`: union of the round's batch indices per client.
    pub sample_sets: Vec<Vec<usize>>,
}

/// `(1/R) Σ_r E_{k∼K}[ R_k(θ̂_r) − (1/|Z_{k,r}|) Σ_{i∈Z_{k,r}} l(θ̂_r, z_{k,i}) ]`.
pub fn roundwise_gen_error(
    trace: &[RoundTrace],
    shards: &[DatasetShard],
    model: &ModelSpec,
    source: &EvalSource,
    weights: &[f64],
) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::NoEvalSource("empty round trace".into()));
    }
    check_weights(shards.len(), weights)?;
    let mut total = 0.0;
    for rt in trace {
        if rt.sample_sets.len() != shards.len() {
            return Err(Error::CountMismatch("sample sets per client".into()));
        }
        let mut round_gap = 0.0;
        for (k, (shard, w)) in shards.iter().zip(weights).enumerate() {
            let pop = client_population_risk(model, &rt.theta_hat, source, k)?.0;
            let z = shard.select(&rt.sample_sets[k]);
            let emp = model.loss(&rt.theta_hat, &z)?;
            round_gap += w * (pop - emp);
        }
        total += round_gap;
    }
    Ok(total / trace.len() as f64)
}

/// `δ_k = R_{s_k}(global) − R_{s_k}(local_k)` for each client.
pub fn non_iidness(
    model: &ModelSpec,
    shards: &[DatasetShard],
    global: &ParamVector,
    locals: &[ParamVector],
) -> Result<Vec<f64>> {
    if shards.len() != locals.len() {
        return Err(Error::CountMismatch(format!("{} shards, {} local models", shards.len(), locals.len())));
    }
    shards
        .iter()
        .zip(locals)
        .map(|(s, local)| Ok(mean_loss(model, global, &s.samples)? - mean_loss(model, local, &s.samples)?))
        .collect()
}
