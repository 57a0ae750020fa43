//! Synthetic generators, file ingestion, client partitioners and the
//! per-round batch sampler.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::cholesky_psd;
use crate::rng::{stream, Domain, StreamRng};

/// One example: features and a target (regression value or class id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn label(&self) -> Result<usize> {
        if self.y >= 0.0 && self.y.fract() == 0.0 {
            Ok(self.y as usize)
        } else {
            Err(Error::Partition(format!("target {} is not a class id", self.y)))
        }
    }
}

/// A client's local dataset `S_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub samples: Vec<Sample>,
    pub owner: usize,
    pub provenance: String,
}

impl DatasetShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// `x ~ N(0, Σ)`, `y = xᵀθ*_k + s·ε`. One shared `θ*` means iid clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianLinear {
    pub cov: Vec<Vec<f64>>,
    pub theta_star: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl GaussianLinear {
    pub fn dim(&self) -> usize {
        self.cov.len()
    }

    pub fn theta_star_for(&self, client: usize) -> &[f64] {
        if self.theta_star.len() == 1 {
            &self.theta_star[0]
        } else {
            &self.theta_star[client]
        }
    }
}

/// Balanced-label Gaussian clusters: `x ~ N(m_y, Σ_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianClusters {
    pub class_means: Vec<Vec<f64>>,
    pub class_cov: Vec<Vec<f64>>,
}

impl GaussianClusters {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    GaussianLinear(GaussianLinear),
    GaussianClusters(GaussianClusters),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub seed: u64,
}

fn flat_cov(cov: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let d = cov.len();
    if d == 0 {
        return Err(Error::InvalidCovariance("empty covariance".into()));
    }
    let mut flat = Vec::with_capacity(d * d);
    for row in cov {
        if row.len() != d {
            return Err(Error::InvalidCovariance("covariance is not square".into()));
        }
        flat.extend_from_slice(row);
    }
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (flat[i * d + j], flat[j * d + i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::InvalidCovariance(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok((flat, d))
}

/// A generator with its covariance factor precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGenerator {
    spec: GeneratorSpec,
    chol: Vec<f64>,
    dim: usize,
}

impl GeneratorSpec {
    /// Validate against `k` clients and factor the covariance.
    pub fn prepare(&self, k: usize) -> Result<PreparedGenerator> {
        let (cov, dim) = match &self.kind {
            GeneratorKind::GaussianLinear(g) => {
                let (flat, d) = flat_cov(&g.cov)?;
                if !(g.noise_std >= 0.0) || !g.noise_std.is_finite() {
                    return Err(Error::InvalidGenerator("noise_std must be >= 0".into()));
                }
                if g.theta_star.len() != 1 && g.theta_star.len() != k {
                    return Err(Error::InvalidGenerator(format!(
                        "{} theta* vectors for {k} clients (expected 1 or {k})",
                        g.theta_star.len()
                    )));
                }
                if g.theta_star.iter().any(|t| t.len() != d) {
                    return Err(Error::InvalidGenerator("theta* dimension differs from covariance".into()));
                }
                (flat, d)
            }
            GeneratorKind::GaussianClusters(c) => {
                let (flat, d) = flat_cov(&c.class_cov)?;
                if c.class_means.is_empty() || c.class_means.iter().any(|m| m.len() != d) {
                    return Err(Error::InvalidGenerator("class means missing or of wrong dimension".into()));
                }
                (flat, d)
            }
        };
        let chol = cholesky_psd(&cov, dim)?;
        Ok(PreparedGenerator { spec: self.clone(), chol, dim })
    }
}

impl PreparedGenerator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn gaussian(&self, mean: Option<&[f64]>, rng: &mut StreamRng) -> Vec<f64> {
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| {
                let m = mean.map_or(0.0, |m| m[i]);
                m + (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum::<f64>()
            })
            .collect()
    }

    /// One draw from `D_k`. For clusters the label is uniform over classes.
    pub fn draw(&self, client: usize, rng: &mut StreamRng) -> Sample {
        match &self.spec.kind {
            GeneratorKind::GaussianLinear(g) => {
                let x = self.gaussian(None, rng);
                let star = g.theta_star_for(client);
                let eps: f64 = rng.sample(StandardNormal);
                let y = x.iter().zip(star).map(|(a, b)| a * b).sum::<f64>() + g.noise_std * eps;
                Sample { x, y }
            }
            GeneratorKind::GaussianClusters(c) => {
                let label = rng.random_range(0..c.num_classes());
                self.draw_class(c, label, rng)
            }
        }
    }

    fn draw_class(&self, c: &GaussianClusters, label: usize, rng: &mut StreamRng) -> Sample {
        Sample { x: self.gaussian(Some(&c.class_means[label]), rng), y: label as f64 }
    }

    /// `n` draws for client `client` from an explicit stream.
    pub fn draw_many(&self, client: usize, n: usize, rng: &mut StreamRng) -> Vec<Sample> {
        (0..n).map(|_| self.draw(client, rng)).collect()
    }

    /// A pooled dataset of `n` samples; clusters get exactly balanced labels
    /// (`label = i mod C`). `pool` separates e.g. training from held-out pools.
    pub fn pool(&self, n: usize, pool: u64) -> Vec<Sample> {
        let mut rng = stream(self.spec.seed, Domain::Generator, u64::MAX, pool);
        match &self.spec.kind {
            GeneratorKind::GaussianLinear(_) => self.draw_many(0, n, &mut rng),
            GeneratorKind::GaussianClusters(c) => {
                (0..n).map(|i| self.draw_class(c, i % c.num_classes(), &mut rng)).collect()
            }
        }
    }
}

/// `n_per_client` i.i.d. draws from each `D_k`, one stream per client.
pub fn generate(spec: &GeneratorSpec, n_per_client: usize, k: usize) -> Result<Vec<DatasetShard>> {
    if k == 0 || n_per_client == 0 {
        return Err(Error::InvalidGenerator("need K >= 1 and n_per_client >= 1".into()));
    }
    let gen = spec.prepare(k)?;
    Ok((0..k)
        .map(|client| {
            let mut rng = stream(spec.seed, Domain::Generator, client as u64, 0);
            DatasetShard {
                samples: gen.draw_many(client, n_per_client, &mut rng),
                owner: client,
                provenance: format!("generator:seed={}", spec.seed),
            }
        })
        .collect())
}

fn split_contiguous(samples: Vec<Sample>, k: usize, provenance: &str) -> Vec<DatasetShard> {
    let n = samples.len();
    let (base, extra) = (n / k, n % k);
    let mut it = samples.into_iter();
    (0..k)
        .map(|owner| {
            let size = base + usize::from(owner < extra);
            DatasetShard { samples: it.by_ref().take(size).collect(), owner, provenance: provenance.to_string() }
        })
        .collect()
}

/// Uniform shuffle, then `K` contiguous shards whose sizes differ by at most one.
pub fn partition_iid(dataset: &[Sample], k: usize, seed: u64) -> Result<Vec<DatasetShard>> {
    if k == 0 || dataset.len() < k {
        return Err(Error::Partition(format!("{} samples cannot fill {k} shards", dataset.len())));
    }
    let mut data = dataset.to_vec();
    data.shuffle(&mut stream(seed, Domain::Partition, 0, 0));
    Ok(split_contiguous(data, k, &format!("iid:seed={seed}")))
}

/// Stable sort by label, then `K` contiguous near-equal shards.
pub fn partition_label_sorted(dataset: &[Sample], k: usize, classes_per_client: usize) -> Result<Vec<DatasetShard>> {
    if k == 0 || dataset.len() < k {
        return Err(Error::Partition(format!("{} samples cannot fill {k} shards", dataset.len())));
    }
    let mut labelled: Vec<(f64, Sample)> = dataset.iter().map(|s| (s.y, s.clone())).collect();
    let num_classes = {
        let mut ys: Vec<f64> = labelled.iter().map(|(y, _)| *y).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        ys.len()
    };
    if classes_per_client == 0 || num_classes < classes_per_client {
        return Err(Error::Partition(format!(
            "{num_classes} classes cannot give {classes_per_client} classes per client"
        )));
    }
    // sort_by is stable, so ties keep their original index order
    labelled.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(split_contiguous(
        labelled.into_iter().map(|(_, s)| s).collect(),
        k,
        &format!("label_sorted:cpc={classes_per_client}"),
    ))
}

/// `Dir(α·1_K)` proportions by normalized Gamma draws in log space, which
/// stays finite for very small `α`.
fn dirichlet(k: usize, alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    // Gamma(α) = Gamma(α + 1) · U^{1/α}
    let g = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.sample(rng).ln() + u.ln() / alpha
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Per-class Dirichlet allocation. Shards left empty by the draw receive
/// one sample from the currently largest shard.
pub fn partition_dirichlet(dataset: &[Sample], k: usize, concentration: f64, seed: u64) -> Result<Vec<DatasetShard>> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::Partition(format!("concentration must be positive, got {concentration}")));
    }
    if k == 0 || dataset.len() < k {
        return Err(Error::Partition(format!("{} samples cannot fill {k} shards", dataset.len())));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_class.entry(s.label()?).or_default().push(i);
    }
    let max_label = *by_class.keys().last().expect("non-empty dataset");
    if let Some(c) = (0..=max_label).find(|c| !by_class.contains_key(c)) {
        return Err(Error::Partition(format!("class {c} has no samples")));
    }
    let mut rng = stream(seed, Domain::Partition, 1, 0);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let p = dirichlet(k, concentration, &mut rng);
        for i in idx {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut shard = k - 1;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    shard = j;
                    break;
                }
            }
            assigned[shard].push(i);
        }
    }
    while let Some(empty) = assigned.iter().position(|a| a.is_empty()) {
        let largest = (0..k).max_by_key(|&j| (assigned[j].len(), std::cmp::Reverse(j))).expect("k >= 1");
        let moved = assigned[largest].pop().expect("largest shard is non-empty");
        assigned[empty].push(moved);
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(owner, idx)| DatasetShard {
            samples: idx.into_iter().map(|i| dataset[i].clone()).collect(),
            owner,
            provenance: format!("dirichlet:alpha={concentration},seed={seed}"),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSampling {
    /// All `τ·b` indices of a round are distinct.
    #[default]
    WithoutReplacement,
    /// Each batch is drawn independently; batches may overlap.
    WithReplacement,
}

/// The `τ` batches of one round, as index lists into the shard.
pub fn draw_round_batches(
    shard_len: usize,
    tau: usize,
    batch_size: usize,
    mode: BatchSampling,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || tau == 0 {
        return Err(Error::InvalidSchedule("tau and batch_size must be positive".into()));
    }
    let batches = match mode {
        BatchSampling::WithoutReplacement => {
            let requested = tau * batch_size;
            if requested > shard_len {
                return Err(Error::BatchOverflow { requested, available: shard_len });
            }
            let mut idx: Vec<usize> = (0..shard_len).collect();
            let (chosen, _) = idx.partial_shuffle(rng, requested);
            let out: Vec<Vec<usize>> = chosen.chunks(batch_size).map(|c| c.to_vec()).collect();
            if cfg!(debug_assertions) {
                let mut all: Vec<usize> = out.iter().flatten().copied().collect();
                all.sort_unstable();
                all.dedup();
                debug_assert_eq!(all.len(), requested, "round batches must be disjoint");
            }
            out
        }
        BatchSampling::WithReplacement => {
            if batch_size > shard_len {
                return Err(Error::BatchOverflow { requested: batch_size, available: shard_len });
            }
            (0..tau).map(|_| rand::seq::index::sample(rng, shard_len, batch_size).into_vec()).collect()
        }
    };
    Ok(batches)
}

/// Parse delimited numeric text: one sample per line, comma or whitespace
/// separated, label last; `#` lines and blank lines are skipped.
pub fn parse_delimited(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("{t:?}: {e}") }))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() < 2 {
            return Err(Error::Parse { line: i + 1, msg: "need at least one feature and a label".into() });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: i + 1, msg: "non-finite value".into() });
        }
        let d = vals.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Parse { line: i + 1, msg: format!("expected {} features, found {d}", dim.unwrap()) });
        }
        let (x, y) = vals.split_at(d);
        out.push(Sample { x: x.to_vec(), y: y[0] });
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no samples".into() });
    }
    Ok(out)
}

/// Load a delimited file; returns the samples and the hex SHA-256 of its bytes.
pub fn load_delimited(path: &Path) -> Result<(Vec<Sample>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    Ok((parse_delimited(&text)?, digest))
}
