//! Round/step simulation of FedAvg, FedALS, SCAFFOLD and FedALS + SCAFFOLD.
//!
//! Steps are counted globally: `s = rτ + t + 1` after the `t`-th local step of
//! round `r` (zero-based). Head blocks synchronize when `s mod τ = 0`;
//! representation blocks additionally when `s mod ατ = 0`. FedAvg and
//! SCAFFOLD synchronize every block every `τ` steps.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_round_batches, BatchSampling, DatasetShard};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalSource, MetricsRecord, RoundTrace};
use crate::model::ModelSpec;
use crate::params::{weighted_average, weighted_sum, BlockLayout, ParamVector, Role};
use crate::rng::{stream, Domain, StreamRng};

/// Batch losses above this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedals")]
    FedAls,
    Scaffold,
    #[serde(rename = "fedals_scaffold")]
    FedAlsScaffold,
}

impl AlgoKind {
    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::FedAvg => "fedavg",
            AlgoKind::FedAls => "fedals",
            AlgoKind::Scaffold => "scaffold",
            AlgoKind::FedAlsScaffold => "fedals_scaffold",
        }
    }

    pub fn adaptive(self) -> bool {
        matches!(self, AlgoKind::FedAls | AlgoKind::FedAlsScaffold)
    }

    pub fn uses_control(self) -> bool {
        matches!(self, AlgoKind::Scaffold | AlgoKind::FedAlsScaffold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Head synchronization period in local steps.
    pub tau: usize,
    /// Representation period is `alpha * tau`.
    pub alpha: usize,
    pub eta: f64,
    pub rounds: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sampling: BatchSampling,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.alpha == 0 || self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSchedule("tau, alpha, rounds and batch_size must be >= 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidSchedule(format!("learning rate must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.rounds * self.tau
    }

    pub fn representation_period(&self) -> usize {
        self.alpha * self.tau
    }
}

/// Whether blocks of `role` synchronize after global step `step` (≥ 1).
pub fn sync_due(step: usize, role: Role, schedule: &ScheduleSpec) -> bool {
    match role {
        Role::Head => step % schedule.tau == 0,
        Role::Representation => step % schedule.representation_period() == 0,
    }
}

/// Roles synchronizing at `step` under `algorithm`, as an aggregation filter.
/// `None` means nothing is due; `Some(None)` means every block.
fn due_filter(step: usize, algorithm: AlgoKind, schedule: &ScheduleSpec) -> Option<Option<Role>> {
    let head = sync_due(step, Role::Head, schedule);
    let rep = if algorithm.adaptive() { sync_due(step, Role::Representation, schedule) } else { head };
    match (head, rep) {
        (true, true) => Some(None),
        (true, false) => Some(Some(Role::Head)),
        (false, true) => Some(Some(Role::Representation)),
        (false, false) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParticipationMode {
    Full,
    /// Case I: `k_hat` draws from `K(·)` with replacement, equal weights.
    WithReplacement {
        k_hat: usize,
    },
    /// Case II: `k_hat` distinct uniform draws, weight `K(k)·K/k_hat`.
    WithoutReplacement {
        k_hat: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationSpec {
    pub mode: ParticipationMode,
    pub base_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participants {
    /// Client indices in draw order; may repeat under Case I.
    pub clients: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ParticipationSpec {
    pub fn full(base_weights: Vec<f64>) -> Self {
        Self { mode: ParticipationMode::Full, base_weights }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.base_weights.len();
        if k == 0 {
            return Err(Error::InvalidParticipation("no clients".into()));
        }
        if self.base_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParticipation("client weights must be finite and >= 0".into()));
        }
        let total: f64 = self.base_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParticipation(format!("client weights sum to {total}, expected 1")));
        }
        match self.mode {
            ParticipationMode::Full => {}
            ParticipationMode::WithReplacement { k_hat } if k_hat == 0 => {
                return Err(Error::InvalidParticipation("k_hat must be >= 1".into()))
            }
            ParticipationMode::WithoutReplacement { k_hat } if k_hat == 0 || k_hat > k => {
                return Err(Error::InvalidParticipation(format!("k_hat = {k_hat} must be in 1..={k}")))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Draw this round's participants and their aggregation weights.
pub fn sample_participants(spec: &ParticipationSpec, rng: &mut StreamRng) -> Result<Participants> {
    spec.validate()?;
    let k = spec.base_weights.len();
    Ok(match spec.mode {
        ParticipationMode::Full => Participants { clients: (0..k).collect(), weights: spec.base_weights.clone() },
        ParticipationMode::WithReplacement { k_hat } => {
            let clients = (0..k_hat)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (i, w) in spec.base_weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            return i;
                        }
                    }
                    // rounding left u above the cumulative sum: last positive weight
                    spec.base_weights.iter().rposition(|w| *w > 0.0).unwrap_or(k - 1)
                })
                .collect();
            Participants { clients, weights: vec![1.0 / k_hat as f64; k_hat] }
        }
        ParticipationMode::WithoutReplacement { k_hat } => {
            let mut clients = rand::seq::index::sample(rng, k, k_hat).into_vec();
            clients.sort_unstable();
            let scale = k as f64 / k_hat as f64;
            let weights = clients.iter().map(|&c| spec.base_weights[c] * scale).collect();
            Participants { clients, weights }
        }
    })
}

/// `c_k − c̄ + (θ_start − θ_end)/(η·period)` on the selected blocks; other
/// blocks keep `c_k`.
pub fn scaffold_control_update(
    control: &ParamVector,
    control_mean: &ParamVector,
    theta_start: &ParamVector,
    theta_end: &ParamVector,
    eta: f64,
    period: usize,
    filter: Option<Role>,
) -> Result<ParamVector> {
    let mut out = control.clone();
    let layout = Arc::clone(control.layout());
    let scale = 1.0 / (eta * period as f64);
    for b in layout.selected(filter) {
        for i in b.range() {
            out.values_mut()[i] = control.values()[i] - control_mean.values()[i]
                + scale * (theta_start.values()[i] - theta_end.values()[i]);
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Per-client simulation state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub k: usize,
    pub params: ParamVector,
    /// Control variate `c_k`; its representation and head blocks are `c^φ` and `c^h`.
    pub control: Option<ParamVector>,
    /// Representation parameters as of the last representation sync.
    pub phi_snapshot: Option<ParamVector>,
    pub shard: Arc<DatasetShard>,
    round_start: ParamVector,
    correction: Option<ParamVector>,
    batches: Vec<Vec<usize>>,
}

impl ClientState {
    pub fn new(k: usize, params: ParamVector, shard: Arc<DatasetShard>, algorithm: AlgoKind) -> Self {
        let zeros = ParamVector::zeros(Arc::clone(params.layout()));
        Self {
            k,
            control: algorithm.uses_control().then(|| zeros.clone()),
            phi_snapshot: (algorithm == AlgoKind::FedAlsScaffold).then(|| params.clone()),
            correction: algorithm.uses_control().then(|| zeros.clone()),
            round_start: params.clone(),
            params,
            shard,
            batches: Vec::new(),
        }
    }
}

/// One local step `θ ← θ − η(g + (c̄ − c_k))`; returns the batch loss.
/// Without a correction this is plain minibatch SGD.
pub fn local_sgd_step(
    client: &mut ClientState,
    model: &ModelSpec,
    batch: &[usize],
    eta: f64,
    correction: Option<&ParamVector>,
) -> Result<f64> {
    let samples = client.shard.select(batch);
    let eval = model.loss_and_grad(&client.params, &samples)?;
    let mut direction = eval.grad;
    if let Some(c) = correction {
        direction.axpy(1.0, c, None)?;
    }
    client.params.axpy(-eta, &direction, None)?;
    Ok(eval.value)
}

/// Parameters communicated per client in each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommCount {
    pub uploaded_per_client: u64,
    pub downloaded_per_client: u64,
    pub total: u64,
}

/// Event-driven counter of communicated parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommCounter {
    pub uploaded: Vec<u64>,
    pub downloaded: Vec<u64>,
}

impl CommCounter {
    pub fn new(k: usize) -> Self {
        Self { uploaded: vec![0; k], downloaded: vec![0; k] }
    }

    /// One sync event: each distinct participant uploads the synced blocks,
    /// every client downloads the broadcast.
    pub fn record(&mut self, layout: &BlockLayout, filter: Option<Role>, participants: &[usize]) {
        let n = layout.count(filter) as u64;
        let distinct: BTreeSet<usize> = participants.iter().copied().collect();
        for c in distinct {
            self.uploaded[c] += n;
        }
        for d in &mut self.downloaded {
            *d += n;
        }
    }

    pub fn total_uploaded(&self) -> u64 {
        self.uploaded.iter().sum()
    }

    pub fn total_downloaded(&self) -> u64 {
        self.downloaded.iter().sum()
    }

    /// Replay the sync schedule of `algorithm` over `R·τ` steps with full participation.
    pub fn simulate(algorithm: AlgoKind, schedule: &ScheduleSpec, layout: &BlockLayout, k: usize) -> Self {
        let mut c = Self::new(k);
        let all: Vec<usize> = (0..k).collect();
        for s in 1..=schedule.total_steps() {
            if let Some(filter) = due_filter(s, algorithm, schedule) {
                c.record(layout, filter, &all);
            }
        }
        c
    }
}

/// Closed form `(T/τ)|h| + ⌊T/(ατ)⌋|φ|` per client per direction.
pub fn comm_closed_form(algorithm: AlgoKind, schedule: &ScheduleSpec, layout: &BlockLayout, k: usize) -> CommCount {
    let t = schedule.total_steps() as u64;
    let tau = schedule.tau as u64;
    let rep_period = if algorithm.adaptive() { schedule.representation_period() as u64 } else { tau };
    let per = (t / tau) * layout.count(Some(Role::Head)) as u64
        + (t / rep_period) * layout.count(Some(Role::Representation)) as u64;
    CommCount { uploaded_per_client: per, downloaded_per_client: per, total: per * k as u64 }
}

/// Everything a run needs besides the model and data.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub algorithm: AlgoKind,
    pub schedule: ScheduleSpec,
    pub participation: ParticipationSpec,
    pub seed: u64,
    /// Emit a metrics row every `cadence` global steps (and at the last step).
    pub cadence: usize,
    pub eval: Option<EvalSource>,
    /// Keep SCAFFOLD control variates at zero.
    pub pin_controls_zero: bool,
    pub record_trace: bool,
    /// Worker threads for client stepping; results do not depend on it.
    pub workers: usize,
    /// Compute risks at sync events (otherwise only at the last step).
    pub risks_at_sync: bool,
}

impl RunSpec {
    pub fn new(algorithm: AlgoKind, schedule: ScheduleSpec, k: usize, seed: u64) -> Self {
        Self {
            algorithm,
            schedule,
            participation: ParticipationSpec::full(vec![1.0 / k as f64; k]),
            seed,
            cadence: 0,
            eval: None,
            pin_controls_zero: false,
            record_trace: false,
            workers: 1,
            risks_at_sync: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Uniform average of the final client models.
    pub final_model: ParamVector,
    pub comm: CommCounter,
    pub trace: Vec<RoundTrace>,
    pub last_record: Option<MetricsRecord>,
}

/// A single simulation instance. Not shared between concurrent experiments.
pub struct Simulation {
    model: ModelSpec,
    layout: Arc<BlockLayout>,
    shards: Vec<DatasetShard>,
    spec: RunSpec,
    clients: Vec<ClientState>,
    comm: CommCounter,
    sync_events: u64,
}

impl Simulation {
    /// Clients start from one shared initialization drawn from the seed.
    pub fn new(model: ModelSpec, layout: Arc<BlockLayout>, shards: Vec<DatasetShard>, spec: RunSpec) -> Result<Self> {
        let mut rng = stream(spec.seed, Domain::Init, 0, 0);
        let init = model.init_params(Arc::clone(&layout), &mut rng);
        Self::with_init(model, shards, spec, init)
    }

    pub fn with_init(model: ModelSpec, shards: Vec<DatasetShard>, spec: RunSpec, init: ParamVector) -> Result<Self> {
        model.validate()?;
        spec.schedule.validate()?;
        spec.participation.validate()?;
        let layout = Arc::clone(init.layout());
        if layout.total() != model.param_count() {
            return Err(Error::LayoutMismatch("layout does not match the model".into()));
        }
        let k = shards.len();
        if k == 0 || spec.participation.base_weights.len() != k {
            return Err(Error::CountMismatch(format!(
                "{k} shards for {} client weights",
                spec.participation.base_weights.len()
            )));
        }
        if spec.algorithm.adaptive() && !(layout.has_role(Role::Head) && layout.has_role(Role::Representation)) {
            return Err(Error::InvalidLayout(format!(
                "{} needs both representation and head blocks",
                spec.algorithm.name()
            )));
        }
        if spec.algorithm.uses_control() && spec.schedule.eta == 0.0 && !spec.pin_controls_zero {
            return Err(Error::InvalidSchedule(format!("{} needs a positive learning rate", spec.algorithm.name())));
        }
        if spec.schedule.sampling == BatchSampling::WithoutReplacement {
            let need = spec.schedule.tau * spec.schedule.batch_size;
            if let Some(s) = shards.iter().find(|s| s.len() < need) {
                return Err(Error::BatchOverflow { requested: need, available: s.len() });
            }
        }
        let clients = shards
            .iter()
            .enumerate()
            .map(|(i, s)| ClientState::new(i, init.clone(), Arc::new(s.clone()), spec.algorithm))
            .collect();
        Ok(Self { model, layout, shards, comm: CommCounter::new(k), spec, clients, sync_events: 0 })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn client_refs(&self) -> Vec<&ParamVector> {
        self.clients.iter().map(|c| &c.params).collect()
    }

    fn uniform_average(&self) -> Result<ParamVector> {
        let k = self.clients.len();
        weighted_average(&self.client_refs(), &vec![1.0 / k as f64; k], None)
    }

    /// Run all rounds, calling `hook` for every metrics row.
    pub fn run(&mut self, hook: &mut dyn FnMut(&MetricsRecord)) -> Result<RunOutcome> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.spec.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let sched = self.spec.schedule.clone();
        let mut trace = Vec::new();
        let mut last_record = None;
        let total = sched.total_steps();
        for r in 0..sched.rounds {
            for c in &mut self.clients {
                let mut rng = stream(self.spec.seed, Domain::Batches, c.k as u64, r as u64);
                c.batches = draw_round_batches(c.shard.len(), sched.tau, sched.batch_size, sched.sampling, &mut rng)?;
                c.round_start = c.params.clone();
            }
            for t in 0..sched.tau {
                let step = r * sched.tau + t + 1;
                self.step_clients(&pool, r, t)?;
                let due = due_filter(step, self.spec.algorithm, &sched);
                if let Some(filter) = due {
                    self.synchronize(step, filter)?;
                }
                let emit = (self.spec.cadence > 0 && step % self.spec.cadence == 0) || step == total;
                if emit {
                    let with_risk = step == total || (self.spec.risks_at_sync && due.is_some());
                    let rec = self.record(r + 1, step, with_risk)?;
                    hook(&rec);
                    last_record = Some(rec);
                }
            }
            if self.spec.record_trace {
                trace.push(RoundTrace {
                    round: r + 1,
                    theta_hat: self.uniform_average()?,
                    sample_sets: self.clients.iter().map(|c| c.batches.concat()).collect(),
                });
            }
        }
        Ok(RunOutcome { final_model: self.uniform_average()?, comm: self.comm.clone(), trace, last_record })
    }

    fn step_clients(&mut self, pool: &rayon::ThreadPool, r: usize, t: usize) -> Result<()> {
        let model = &self.model;
        let eta = self.spec.schedule.eta;
        let step_one = |c: &mut ClientState| -> Result<()> {
            let batch = std::mem::take(&mut c.batches[t]);
            let correction = c.correction.take();
            let res = local_sgd_step(c, model, &batch, eta, correction.as_ref());
            c.batches[t] = batch;
            c.correction = correction;
            let loss = res?;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    round: r + 1,
                    step: r * self.spec.schedule.tau + t + 1,
                    client: c.k,
                    loss,
                });
            }
            Ok(())
        };
        let results: Vec<Result<()>> = if self.spec.workers > 1 {
            pool.install(|| self.clients.par_iter_mut().map(step_one).collect())
        } else {
            self.clients.iter_mut().map(step_one).collect()
        };
        // lowest client index wins so the reported error is deterministic
        results.into_iter().collect()
    }

    fn synchronize(&mut self, step: usize, filter: Option<Role>) -> Result<()> {
        let k = self.clients.len();
        let mut rng = stream(self.spec.seed, Domain::Participation, self.sync_events, 0);
        self.sync_events += 1;
        let parts = sample_participants(&self.spec.participation, &mut rng)?;
        let sched = &self.spec.schedule;

        if self.spec.algorithm.uses_control() && !self.spec.pin_controls_zero {
            // (role filter, period, use the φ snapshot as θ_start)
            let updates: Vec<(Option<Role>, usize, bool)> = match self.spec.algorithm {
                AlgoKind::Scaffold => vec![(None, sched.tau, false)],
                _ => {
                    let mut u = Vec::new();
                    if sync_due(step, Role::Head, sched) {
                        u.push((Some(Role::Head), sched.tau, false));
                    }
                    if sync_due(step, Role::Representation, sched) {
                        u.push((Some(Role::Representation), sched.representation_period(), true));
                    }
                    u
                }
            };
            let participating: BTreeSet<usize> = parts.clients.iter().copied().collect();
            for (role, period, lagged) in updates {
                let controls: Vec<&ParamVector> =
                    self.clients.iter().map(|c| c.control.as_ref().expect("control")).collect();
                let mean = weighted_average(&controls, &vec![1.0 / k as f64; k], None)?;
                for c in &mut self.clients {
                    if !participating.contains(&c.k) {
                        continue;
                    }
                    let start = if lagged {
                        c.phi_snapshot.as_ref().ok_or(Error::MissingSnapshot(c.k))?
                    } else {
                        &c.round_start
                    };
                    let ctrl = c.control.as_ref().expect("control");
                    let updated = scaffold_control_update(ctrl, &mean, start, &c.params, sched.eta, period, role)?;
                    c.control = Some(updated);
                }
            }
            let controls: Vec<&ParamVector> =
                self.clients.iter().map(|c| c.control.as_ref().expect("control")).collect();
            let mean = weighted_average(&controls, &vec![1.0 / k as f64; k], None)?;
            for c in &mut self.clients {
                let mut corr = mean.clone();
                corr.axpy(-1.0, c.control.as_ref().expect("control"), None)?;
                c.correction = Some(corr);
            }
        }

        let members: Vec<&ParamVector> = parts.clients.iter().map(|&i| &self.clients[i].params).collect();
        let weight_sum: f64 = parts.weights.iter().sum();
        let aggregate = if (weight_sum - 1.0).abs() <= 1e-12 {
            weighted_average(&members, &parts.weights, filter)?
        } else {
            weighted_sum(&members, &parts.weights, filter)?
        };
        for c in &mut self.clients {
            c.params.copy_blocks_from(&aggregate, filter)?;
            if self.spec.algorithm == AlgoKind::FedAlsScaffold && filter != Some(Role::Head) {
                if let Some(snap) = c.phi_snapshot.as_mut() {
                    snap.copy_blocks_from(&aggregate, Some(Role::Representation))?;
                }
            }
        }
        self.comm.record(&self.layout, filter, &parts.clients);
        Ok(())
    }

    fn record(&self, round: usize, step: usize, with_risk: bool) -> Result<MetricsRecord> {
        let refs = self.client_refs();
        let consensus = metrics::consensus_by_block(&refs)?;
        let mut rec = MetricsRecord {
            round,
            step,
            train_risk: None,
            test_risk: None,
            test_risk_stderr: None,
            gen_gap: None,
            accuracy: None,
            consensus,
            comm_uploaded: self.comm.total_uploaded(),
            comm_downloaded: self.comm.total_downloaded(),
            per_client_risks: None,
        };
        if with_risk {
            let avg = self.uniform_average()?;
            let weights = &self.spec.participation.base_weights;
            let shards = &self.shards;
            let train = metrics::empirical_risk(&self.model, &avg, shards, weights)?;
            rec.train_risk = Some(train);
            rec.per_client_risks = Some(
                shards
                    .iter()
                    .map(|s| metrics::mean_loss(&self.model, &avg, &s.samples))
                    .collect::<Result<Vec<f64>>>()?,
            );
            if let Some(src) = &self.spec.eval {
                let est = metrics::population_risk_estimate(&self.model, &avg, src, weights)?;
                rec.test_risk = Some(est.mean);
                rec.test_risk_stderr = Some(est.stderr);
                rec.gen_gap = Some(est.mean - train);
                if let EvalSource::Holdout(h) = src {
                    let pooled: Vec<_> = h.iter().flat_map(|s| s.samples.iter().cloned()).collect();
                    rec.accuracy = metrics::accuracy(&self.model, &avg, &pooled);
                }
            }
        }
        Ok(rec)
    }
}

/// Convenience wrapper: build and run one simulation.
pub fn run_experiment(
    model: ModelSpec,
    layout: Arc<BlockLayout>,
    shards: Vec<DatasetShard>,
    spec: RunSpec,
    hook: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunOutcome> {
    Simulation::new(model, layout, shards, spec)?.run(hook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn schedule(tau: usize, alpha: usize) -> ScheduleSpec {
        ScheduleSpec { tau, alpha, eta: 0.1, rounds: 1, batch_size: 1, sampling: BatchSampling::WithoutReplacement }
    }

    fn shard(data: &[(f64, f64)]) -> Arc<DatasetShard> {
        Arc::new(DatasetShard {
            samples: data.iter().map(|&(x, y)| Sample { x: vec![x], y }).collect(),
            owner: 0,
            provenance: "test".into(),
        })
    }

    #[test]
    fn sync_examples() {
        let s = schedule(5, 10);
        assert!(sync_due(5, Role::Head, &s) && !sync_due(5, Role::Representation, &s));
        assert!(sync_due(50, Role::Head, &s) && sync_due(50, Role::Representation, &s));
        assert!(!sync_due(3, Role::Head, &s) && !sync_due(3, Role::Representation, &s));
        for step in 1..=500 {
            if sync_due(step, Role::Representation, &s) {
                assert!(sync_due(step, Role::Head, &s));
            }
        }
    }

    #[test]
    fn sgd_step_examples() {
        let model = ModelSpec::ridge(1, 0.0);
        let layout = Arc::new(model.layout());
        let p = ParamVector::from_values(Arc::clone(&layout), vec![1.0]).unwrap();
        let mut c = ClientState::new(0, p.clone(), shard(&[(1.0, 0.0), (0.0, 0.0)]), AlgoKind::FedAvg);
        local_sgd_step(&mut c, &model, &[0], 0.1, None).unwrap();
        assert_eq!(c.params.values(), &[0.9]);

        let mut zero = ClientState::new(0, p.clone(), shard(&[(0.0, 0.0)]), AlgoKind::FedAvg);
        local_sgd_step(&mut zero, &model, &[0], 0.1, None).unwrap();
        assert_eq!(zero.params.values(), p.values());

        let mut plain = ClientState::new(0, p.clone(), shard(&[(0.7, 0.3)]), AlgoKind::Scaffold);
        let mut corrected = plain.clone();
        let ck = ParamVector::from_values(Arc::clone(&layout), vec![0.37]).unwrap();
        let mut corr = ck.clone();
        corr.axpy(-1.0, &ck, None).unwrap();
        local_sgd_step(&mut plain, &model, &[0], 0.1, None).unwrap();
        local_sgd_step(&mut corrected, &model, &[0], 0.1, Some(&corr)).unwrap();
        assert_eq!(plain.params.values()[0].to_bits(), corrected.params.values()[0].to_bits());
    }

    #[test]
    fn control_update_examples() {
        let layout = Arc::new(BlockLayout::from_sizes([("a", 1, Role::Representation), ("b", 1, Role::Head)]).unwrap());
        let pv = |v: [f64; 2]| ParamVector::from_values(Arc::clone(&layout), v.to_vec()).unwrap();
        // θ_0 − θ_τ = ηΣg_t, so the new control is the mean applied gradient
        let (eta, tau) = (0.5, 2);
        let grads = [[1.0, 2.0], [3.0, -2.0]];
        let start = pv([0.0, 0.0]);
        let end = pv([-eta * (grads[0][0] + grads[1][0]), -eta * (grads[0][1] + grads[1][1])]);
        let zero = pv([0.0, 0.0]);
        let c = scaffold_control_update(&zero, &zero, &start, &end, eta, tau, None).unwrap();
        assert_eq!(c.values(), &[2.0, 0.0]);
        let ck = pv([0.3, -0.1]);
        let same = scaffold_control_update(&ck, &ck, &start, &start, eta, tau, None).unwrap();
        assert_eq!(same.values(), &[0.0, 0.0]);
        let head_only = scaffold_control_update(&ck, &zero, &start, &end, eta, tau, Some(Role::Head)).unwrap();
        assert_eq!(head_only.values(), &[0.3, -0.1 + 0.0]);
    }

    #[test]
    fn participation_examples() {
        let mut rng = stream(1, Domain::Participation, 0, 0);
        let full =
            ParticipationSpec { mode: ParticipationMode::WithoutReplacement { k_hat: 4 }, base_weights: vec![0.25; 4] };
        let p = sample_participants(&full, &mut rng).unwrap();
        assert_eq!(p.clients, vec![0, 1, 2, 3]);
        assert_eq!(p.weights, vec![0.25; 4]);
        let one =
            ParticipationSpec { mode: ParticipationMode::WithReplacement { k_hat: 3 }, base_weights: vec![0.5, 0.5] };
        let p = sample_participants(&one, &mut rng).unwrap();
        assert_eq!(p.clients.len(), 3);
        assert_eq!(p.weights, vec![1.0 / 3.0; 3]);
        let bad =
            ParticipationSpec { mode: ParticipationMode::WithoutReplacement { k_hat: 5 }, base_weights: vec![0.25; 4] };
        assert!(matches!(sample_participants(&bad, &mut rng), Err(Error::InvalidParticipation(_))));
    }

    #[test]
    fn comm_examples() {
        let layout = BlockLayout::from_sizes([("phi", 99, Role::Representation), ("h", 1, Role::Head)]).unwrap();
        let s = ScheduleSpec { rounds: 20, ..schedule(5, 10) };
        let c = comm_closed_form(AlgoKind::FedAls, &s, &layout, 3);
        assert_eq!(c.uploaded_per_client, 218);
        assert_eq!(c.total, 654);
        let sim = CommCounter::simulate(AlgoKind::FedAls, &s, &layout, 3);
        assert_eq!(sim.uploaded, vec![218; 3]);
        assert_eq!(sim.downloaded, vec![218; 3]);
        let avg = comm_closed_form(AlgoKind::FedAvg, &s, &layout, 3);
        assert_eq!(avg.uploaded_per_client, 20 * 100);
    }

    #[test]
    fn adaptive_needs_both_roles() {
        let model = ModelSpec::ridge(1, 0.0);
        let layout = Arc::new(model.layout());
        let shards = vec![(*shard(&[(1.0, 1.0); 4])).clone(); 2];
        let spec = RunSpec::new(AlgoKind::FedAls, schedule(2, 2), 2, 0);
        assert!(matches!(Simulation::new(model, layout, shards, spec), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn batch_overflow_is_reported() {
        let model = ModelSpec::ridge(1, 0.0);
        let layout = Arc::new(model.layout());
        let shards = vec![(*shard(&[(1.0, 1.0); 3])).clone()];
        let spec = RunSpec::new(AlgoKind::FedAvg, ScheduleSpec { batch_size: 2, ..schedule(2, 1) }, 1, 0);
        let err = Simulation::new(model, layout, shards, spec).err().unwrap();
        assert_eq!(err, Error::BatchOverflow { requested: 4, available: 3 });
    }
}
