//! Synthetic multi-class data and federated partitioning.
//!
//! A Gaussian mixture (one component per class) stands in for a real
//! corpus, min-max scaled into the unit box. Partition schemes: IID,
//! Dirichlet(alpha) class-proportion splits, and label skew where each
//! client draws a few dominant classes that receive most of its mass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Result, SafeLmError};
use crate::seeds;

/// Row-major feature matrix in `[0,1]^{n x f}` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Self {
        assert_eq!(features.len(), labels.len() * n_features);
        Dataset {
            features,
            labels,
            n_features,
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Materialize a subset by row indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        assert_eq!(row.len(), self.n_features);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Deterministic stratified split: `(held_in, held_out)` where the
    /// held-out side receives `fraction` of every class.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = seeds::rng(seed, &[seeds::purpose::PARTITION, 0x511]);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64) * fraction).round() as usize;
            test_idx.extend_from_slice(&idx[..k.min(idx.len())]);
            train_idx.extend_from_slice(&idx[k.min(idx.len())..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        (self.subset(&train_idx), self.subset(&test_idx))
    }

    /// Write as CSV: header `f0..f{F-1},label`, label in the last column.
    pub fn save_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.n_features).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", row.join(","), self.labels[i])?;
        }
        Ok(())
    }

    pub fn load_csv<R: BufRead>(r: R, n_classes: usize) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| SafeLmError::invalid("empty dataset CSV"))??;
        let n_features = header.split(',').count() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_features + 1 {
                return Err(SafeLmError::invalid(format!(
                    "CSV row has {} fields, expected {}",
                    fields.len(),
                    n_features + 1
                )));
            }
            for field in &fields[..n_features] {
                features.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| SafeLmError::invalid(format!("bad feature value: {e}")))?,
                );
            }
            labels.push(
                fields[n_features]
                    .parse::<usize>()
                    .map_err(|e| SafeLmError::invalid(format!("bad label: {e}")))?,
            );
        }
        Ok(Dataset {
            features,
            labels,
            n_features,
            n_classes,
        })
    }
}

/// Partition scheme for splitting a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
    /// Each client draws `2..=3` dominant classes receiving `prob` of its
    /// mass in expectation.
    LabelSkew { prob: f64 },
}

/// Per-sample client assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn shard_indices(&self, client: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == client)
            .collect()
    }

    pub fn shards(&self, ds: &Dataset) -> Vec<Dataset> {
        (0..self.clients)
            .map(|k| ds.subset(&self.shard_indices(k)))
            .collect()
    }
}

/// Gaussian mixture generator. Class means sit at `separation` times a
/// random unit direction; unit-variance noise; the whole matrix is then
/// min-max scaled per feature into `[0,1]`. `imbalance_ratio < 1` shrinks
/// the upper half of the class indices to `ratio * per_class` samples.
pub fn generate(
    classes: usize,
    features: usize,
    per_class: usize,
    separation: f64,
    imbalance_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || features < 2 || per_class < 1 {
        return Err(SafeLmError::invalid(
            "generate requires classes >= 2, features >= 2, per_class >= 1",
        ));
    }
    if !(0.0 < imbalance_ratio && imbalance_ratio <= 1.0) {
        return Err(SafeLmError::invalid("imbalance_ratio must be in (0, 1]"));
    }
    let mut rng = seeds::rng(seed, &[seeds::purpose::DATA]);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // Class means: separation * random unit direction.
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let raw: Vec<f64> = (0..features).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.push(raw.into_iter().map(|x| x / norm * separation).collect::<Vec<f64>>());
    }

    let mut features_out = Vec::new();
    let mut labels = Vec::new();
    for (class, mean) in means.iter().enumerate() {
        let count = if class >= classes.div_ceil(2) {
            ((per_class as f64) * imbalance_ratio).round().max(1.0) as usize
        } else {
            per_class
        };
        for _ in 0..count {
            for m in mean {
                features_out.push(m + std_normal.sample(&mut rng));
            }
            labels.push(class);
        }
    }

    // Min-max scale each feature column into [0,1].
    let n = labels.len();
    for j in 0..features {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = features_out[i * features + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for i in 0..n {
            let v = &mut features_out[i * features + j];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        }
    }

    Ok(Dataset {
        features: features_out,
        labels,
        n_features: features,
        n_classes: classes,
    })
}

const PARTITION_RETRIES: usize = 8;

/// Assign every sample to a client under `scheme`. Redraws (bounded) when
/// a client ends up empty; under extreme concentration (for example
/// Dirichlet alpha far below 1 with more clients than classes) redraws
/// cannot succeed, so as a last resort single samples migrate from the
/// largest shards into the empty ones.
pub fn partition(
    ds: &Dataset,
    scheme: PartitionScheme,
    clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(SafeLmError::invalid("partition requires at least one client"));
    }
    if clients > ds.len() {
        return Err(SafeLmError::invalid(format!(
            "cannot fill {clients} clients from {} samples",
            ds.len()
        )));
    }
    let mut last: Option<Vec<usize>> = None;
    for attempt in 0..PARTITION_RETRIES {
        let mut rng = seeds::rng(seed, &[seeds::purpose::PARTITION, attempt as u64]);
        let assignment = match scheme {
            PartitionScheme::Iid => draw_iid(ds, clients, &mut rng),
            PartitionScheme::Dirichlet { alpha } => draw_dirichlet(ds, clients, alpha, &mut rng)?,
            PartitionScheme::LabelSkew { prob } => draw_label_skew(ds, clients, prob, &mut rng)?,
        };
        let mut counts = vec![0usize; clients];
        for &c in &assignment {
            counts[c] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok(PartitionPlan {
                scheme,
                clients,
                assignment,
            });
        }
        last = Some(assignment);
    }
    let mut assignment = last.expect("at least one draw attempted");
    repair_empty_shards(&mut assignment, clients);
    Ok(PartitionPlan {
        scheme,
        clients,
        assignment,
    })
}

/// Move one sample from the currently largest shard into each empty one.
fn repair_empty_shards(assignment: &mut [usize], clients: usize) {
    loop {
        let mut counts = vec![0usize; clients];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..clients).max_by_key(|&k| counts[k]).unwrap();
        let moved = assignment.iter().position(|&c| c == donor).unwrap();
        assignment[moved] = empty;
    }
}

fn draw_iid(ds: &Dataset, clients: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    (0..ds.len()).map(|_| rng.random_range(0..clients)).collect()
}

/// Per class, route samples to clients with proportions drawn from
/// `Dir(alpha * 1_K)` (sampled as normalized Gammas).
fn draw_dirichlet(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if alpha <= 0.0 {
        return Err(SafeLmError::invalid("dirichlet alpha must be positive"));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| SafeLmError::invalid(format!("bad dirichlet alpha: {e}")))?;
    let mut assignment = vec![0usize; ds.len()];
    for class in 0..ds.n_classes {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        let mut weights: Vec<f64> = (0..clients).map(|_| gamma.sample(rng).max(1e-300)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        for &i in &idx {
            assignment[i] = sample_categorical(&weights, rng);
        }
    }
    Ok(assignment)
}

/// Each client draws 2 or 3 dominant classes; a sample of class `c` routes
/// to clients weighting `c` dominant with mass `prob` spread over its
/// dominants and `1 - prob` spread over the rest.
fn draw_label_skew(
    ds: &Dataset,
    clients: usize,
    prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(SafeLmError::invalid("label-skew prob must be in [0,1]"));
    }
    let classes = ds.n_classes;
    let mut dominants: Vec<Vec<usize>> = Vec::with_capacity(clients);
    for _ in 0..clients {
        let count = 2 + rng.random_range(0..2usize); // 2 or 3
        let mut picks: Vec<usize> = (0..classes).collect();
        picks.shuffle(rng);
        picks.truncate(count.min(classes));
        dominants.push(picks);
    }
    let mut assignment = vec![0usize; ds.len()];
    for class in 0..classes {
        let holders: Vec<usize> = (0..clients)
            .filter(|&k| dominants[k].contains(&class))
            .collect();
        let others: Vec<usize> = (0..clients)
            .filter(|&k| !dominants[k].contains(&class))
            .collect();
        let mut weights = vec![0.0f64; clients];
        if holders.is_empty() {
            weights.fill(1.0 / clients as f64);
        } else if others.is_empty() {
            for &k in &holders {
                weights[k] = 1.0 / holders.len() as f64;
            }
        } else {
            for &k in &holders {
                weights[k] = prob / holders.len() as f64;
            }
            for &k in &others {
                weights[k] = (1.0 - prob) / others.len() as f64;
            }
        }
        for i in (0..ds.len()).filter(|&i| ds.labels[i] == class) {
            assignment[i] = sample_categorical(&weights, rng);
        }
    }
    Ok(assignment)
}

fn sample_categorical(weights: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}
