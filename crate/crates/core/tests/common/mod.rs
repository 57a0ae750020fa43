#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fedals::bound::{verify_one_round_bound, BoundTrialConfig};
use fedals::data::{
    partition_iid, partition_label_sorted, DatasetShard, GaussianClusters, GaussianLinear, GeneratorKind,
    GeneratorSpec, Sample,
};
use fedals::model::{Activation, ModelSpec};
use fedals::params::{BlockLayout, ParamVector};
use fedals::rng::{stream, Domain};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Shared `θ*` with entries drawn from the seed, identity covariance.
pub fn linear_generator(d: usize, noise_std: f64, seed: u64) -> GeneratorSpec {
    let mut rng = stream(seed, Domain::Trial, u64::MAX, 0);
    let theta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    GeneratorSpec {
        kind: GeneratorKind::GaussianLinear(GaussianLinear { cov: identity(d), theta_star: vec![theta], noise_std }),
        seed,
    }
}

/// `classes` Gaussian clusters in `dim` dimensions, means `N(0, spread² I)`.
pub fn cluster_generator(classes: usize, dim: usize, spread: f64, seed: u64) -> GeneratorSpec {
    let mut rng = stream(seed, Domain::Trial, u64::MAX, 1);
    let class_means =
        (0..classes).map(|_| (0..dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    GeneratorSpec {
        kind: GeneratorKind::GaussianClusters(GaussianClusters { class_means, class_cov: identity(dim) }),
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    LabelSorted,
    Iid,
}

pub struct Task {
    pub model: ModelSpec,
    pub layout: Arc<BlockLayout>,
    pub shards: Vec<DatasetShard>,
    pub holdout: Vec<DatasetShard>,
}

pub const MLP_CLASSES: usize = 10;
pub const MLP_DIM: usize = 16;
pub const MLP_CLIENTS: usize = 5;

/// 3-hidden-layer MLP on 10 Gaussian clusters, 5 clients.
pub fn mlp_task(seed: u64, partition: Partition) -> Task {
    let model = ModelSpec::mlp(MLP_DIM, vec![32, 32, 32], MLP_CLASSES, Activation::Relu, 1e-4);
    let layout = Arc::new(model.layout());
    let gen = cluster_generator(MLP_CLASSES, MLP_DIM, 0.6, 1000 + seed).prepare(MLP_CLIENTS).unwrap();
    let split = |pool: Vec<Sample>| match partition {
        Partition::LabelSorted => partition_label_sorted(&pool, MLP_CLIENTS, 2).unwrap(),
        Partition::Iid => partition_iid(&pool, MLP_CLIENTS, seed).unwrap(),
    };
    Task { model, layout, shards: split(gen.pool(5000, 0)), holdout: split(gen.pool(2000, 1)) }
}

pub struct FdReport {
    pub worst: f64,
    pub draws: usize,
    pub per_family: Vec<(&'static str, f64)>,
}

/// Central differences at step `h` against the analytic gradient; error is
/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-12)`.
pub fn finite_difference_suite(draws: usize) -> FdReport {
    let mut rng = stream(7, Domain::Trial, 0, 0);
    let mut per_family: Vec<(&'static str, f64)> =
        vec![("ridge", 0.0), ("logistic", 0.0), ("mlp_tanh", 0.0), ("mlp_relu", 0.0)];
    for i in 0..draws {
        let which = i % 4;
        let d = rng.random_range(1..=5);
        let model = match which {
            0 => ModelSpec::ridge(d, rng.random_range(0.0..1.0)),
            1 => ModelSpec::logistic(d, rng.random_range(0.0..1.0)),
            2 => ModelSpec::mlp(
                d,
                vec![rng.random_range(1..=4), rng.random_range(1..=4)],
                rng.random_range(1..=3),
                Activation::Tanh,
                1e-3,
            ),
            _ => ModelSpec::mlp(d, vec![rng.random_range(1..=4)], rng.random_range(1..=3), Activation::Relu, 1e-3),
        };
        let layout = Arc::new(model.layout());
        let values: Vec<f64> = (0..layout.total()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let theta = ParamVector::from_values(Arc::clone(&layout), values.clone()).unwrap();
        let n = rng.random_range(1..=6);
        let batch: Vec<Sample> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let y = match which {
                    0 => rng.sample(StandardNormal),
                    1 => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    _ if model.output_dim > 1 => rng.random_range(0..model.output_dim) as f64,
                    _ => rng.sample(StandardNormal),
                };
                Sample { x, y }
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let analytic = model.loss_and_grad(&theta, &refs).unwrap().grad;
        let h = 1e-6;
        let numeric: Vec<f64> = (0..values.len())
            .map(|j| {
                let mut plus = values.clone();
                let mut minus = values.clone();
                plus[j] += h;
                minus[j] -= h;
                let f = |v: Vec<f64>| {
                    model.loss(&ParamVector::from_values(Arc::clone(&layout), v).unwrap(), &refs).unwrap()
                };
                (f(plus) - f(minus)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.values().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .values()
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        per_family[which].1 = per_family[which].1.max(diff / scale);
    }
    let worst = per_family.iter().map(|p| p.1).fold(0.0, f64::max);
    FdReport { worst, draws, per_family }
}

fn random_ridge_data(rng: &mut impl Rng, d: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample { x: (0..d).map(|_| rng.sample(StandardNormal)).collect(), y: rng.sample(StandardNormal) })
        .collect()
}

/// Largest empirical-risk gradient norm at the closed-form ERM.
pub fn erm_gradient_norms(draws: usize) -> f64 {
    let mut rng = stream(8, Domain::Trial, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let d = rng.random_range(1..=8);
        let model = ModelSpec::ridge(d, rng.random_range(0.01..1.0));
        let n = rng.random_range(1..=60);
        let data = random_ridge_data(&mut rng, d, n);
        let theta = model.erm_closed_form(Arc::new(model.layout()), &data).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let g = model.loss_and_grad(&theta, &refs).unwrap().grad;
        worst = worst.max(g.squared_l2(None).unwrap().sqrt());
    }
    worst
}

pub struct ConvexityReport {
    pub pairs: usize,
    pub violations: usize,
}

/// `μ/2‖y−x‖² ≤ f(y) − f(x) − ⟨∇f(x), y−x⟩ ≤ L/2‖y−x‖²` for the ridge
/// empirical risk with its exact constants.
pub fn convexity_pairs(pairs: usize) -> ConvexityReport {
    let mut rng = stream(9, Domain::Trial, 0, 0);
    let mut violations = 0;
    for _ in 0..pairs {
        let d = rng.random_range(1..=6);
        let model = ModelSpec::ridge(d, rng.random_range(0.01..1.0));
        let n = rng.random_range(2..=40);
        let data = random_ridge_data(&mut rng, d, n);
        let refs: Vec<&Sample> = data.iter().collect();
        let (mu, l) = model.mu_l_exact(&data).unwrap();
        let layout = Arc::new(model.layout());
        let mut point = || {
            let v: Vec<f64> = (0..d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            ParamVector::from_values(Arc::clone(&layout), v).unwrap()
        };
        let (x, y) = (point(), point());
        let fx = model.loss_and_grad(&x, &refs).unwrap();
        let fy = model.loss(&y, &refs).unwrap();
        let diff: Vec<f64> = y.values().iter().zip(x.values()).map(|(a, b)| a - b).collect();
        let gap = fy - fx.value - fx.grad.values().iter().zip(&diff).map(|(g, e)| g * e).sum::<f64>();
        let sq: f64 = diff.iter().map(|e| e * e).sum();
        let tol = 1e-10 * (1.0 + fy.abs() + fx.value.abs());
        if gap < 0.5 * mu * sq - tol || gap > 0.5 * l * sq + tol {
            violations += 1;
        }
    }
    ConvexityReport { pairs, violations }
}

fn cluster_toml(spec: &GeneratorSpec) -> String {
    let GeneratorKind::GaussianClusters(c) = &spec.kind else { unreachable!() };
    let rows = |m: &Vec<Vec<f64>>| {
        m.iter()
            .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "[data.generator]\nseed = {}\nkind = {{ kind = \"gaussian_clusters\", class_means = [{}], class_cov = [{}] }}\n",
        spec.seed,
        rows(&c.class_means),
        rows(&c.class_cov)
    )
}

/// Small configs covering every algorithm and participation mode.
pub fn determinism_configs(dir: &Path) -> Vec<(String, PathBuf)> {
    let gen = cluster_toml(&cluster_generator(4, 5, 1.5, 3));
    let cases = [
        ("fedavg", "algorithm = \"fedavg\"", "participation = { mode = \"full\" }"),
        ("fedals", "algorithm = \"fedals\"", "participation = { mode = \"with_replacement\", k_hat = 3 }"),
        ("scaffold", "algorithm = \"scaffold\"", "participation = { mode = \"without_replacement\", k_hat = 2 }"),
        ("fedals_scaffold", "algorithm = \"fedals_scaffold\"", "participation = { mode = \"full\" }"),
    ];
    cases
        .iter()
        .map(|(name, algo, part)| {
            let text = format!(
                "{algo}\nseeds = [5, 6]\ncadence = 3\n{part}\n\n[model]\ninput_dim = 5\noutput_dim = 4\nfamily = {{ family = \"mlp\", hidden = [6, 6], activation = \"relu\", l2 = 0.001 }}\n\n[data]\nclients = 4\npool_size = 400\nholdout_size = 200\npartition = {{ scheme = \"dirichlet\", concentration = 0.5 }}\n\n{gen}\n[schedule]\ntau = 3\nalpha = 2\neta = 0.05\nrounds = 6\nbatch_size = 4\nsampling = \"with_replacement\"\n\n[eval]\nroundwise = true\n"
            );
            let path = dir.join(format!("{name}.toml"));
            std::fs::write(&path, text).unwrap();
            (name.to_string(), path)
        })
        .collect()
}

/// Every output file except the wall-clock sidecar.
pub fn read_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().to_string();
        if name != "timing.json" {
            out.insert(name, std::fs::read(entry.path()).unwrap());
        }
    }
    out
}

/// Bound report JSON computed inside a pool of `workers` threads.
pub fn bound_json(workers: usize) -> String {
    let cfg = BoundTrialConfig {
        k: 3,
        n_k: 20,
        generator: linear_generator(3, 0.5, 4),
        lambda: 0.3,
        weights: Some(vec![0.5, 0.3, 0.2]),
        trials: 150,
        seed: 9,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    pool.install(|| serde_json::to_string(&verify_one_round_bound(&cfg).unwrap()).unwrap())
}
