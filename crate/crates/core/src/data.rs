//! Dataset synthesis and loading, plus non-IID partitioning across clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;

/// A plain classification dataset: one feature vector and one label per
/// sample, labels in `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Argument("dataset must be nonempty".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape(
                "feature rows must share one nonzero dimension".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
        })
    }

    /// Empty carrier with matching dims; used for degenerate test splits.
    pub(crate) fn empty_like(dim: usize, class_count: usize) -> Self {
        let _ = dim;
        LabeledDataset {
            features: Vec::new(),
            labels: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the given sample indices into a new dataset (empty is allowed).
    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// The whole dataset as one mini-batch.
    pub fn to_batch(&self) -> Result<Batch> {
        let dim = self.input_dim();
        let inputs = self
            .features
            .iter()
            .flat_map(|f| f.iter().copied())
            .collect();
        Batch::new(inputs, dim, self.labels.clone())
    }
}

/// One client's share of the data, split 75/25 into train and test with the
/// same per-class proportions on both sides.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Per-class training sample counts.
    pub class_counts: Vec<usize>,
}

impl ClientDataset {
    pub fn train_len(&self) -> usize {
        self.train.len()
    }
}

/// A point on the class simplex: entries nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument(
                "distribution must have at least one class".into(),
            ));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Argument(
                "distribution entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    pub fn uniform(class_count: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Argument("cannot normalize all-zero counts".into()));
        }
        Ok(ClassDistribution {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Euclidean distance to another distribution on the same simplex.
    pub fn l2_distance(&self, other: &ClassDistribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// The empirical class distribution of a client's training data.
pub fn true_distribution(client: &ClientDataset) -> Result<ClassDistribution> {
    if client.train.is_empty() {
        return Err(Error::Argument(format!(
            "client {} has no training data",
            client.client_id
        )));
    }
    ClassDistribution::from_counts(&client.class_counts)
}

/// Synthesizes `classes` unit-covariance Gaussian clusters whose means are at
/// mutual distance >= `separation`; labels are the cluster index.
pub fn synth_gaussian_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::Argument("feature dimension must be positive".into()));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be at least 1".into()));
    }
    if separation <= 0.0 {
        return Err(Error::Argument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random means, rescaled so the closest pair sits exactly at `separation`.
    let mut means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if min_dist <= 0.0 {
        return Err(Error::Numerical("degenerate cluster means".into()));
    }
    let scale = separation / min_dist;
    for mean in means.iter_mut() {
        for v in mean.iter_mut() {
            *v *= scale;
        }
    }

    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let sample: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(sample);
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path, field: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Parse {
        field: field.into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse {
            field: field.into(),
            reason: format!("file truncated at byte {offset} while reading header"),
        });
    }
    Ok(u32::from_be_bytes(
        bytes[offset..end].try_into().expect("4 bytes"),
    ))
}

/// Loads an MNIST-style IDX image/label file pair.
///
/// Pixels are scaled to `[0, 1]`; labels must lie in `[0, 10)`. No partial
/// dataset is produced on malformed input.
pub fn load_idx_mnist(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<LabeledDataset> {
    if limit == Some(0) {
        return Err(Error::Argument("limit must be at least 1".into()));
    }
    let images = read_file(images_path, "images.path")?;
    let labels = read_file(labels_path, "labels.path")?;

    let magic = read_be_u32(&images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            field: "images.magic".into(),
            reason: format!("expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let image_count = read_be_u32(&images, 4, "images.count")? as usize;
    let rows = read_be_u32(&images, 8, "images.rows")? as usize;
    let cols = read_be_u32(&images, 12, "images.cols")? as usize;
    let pixel_dim = rows * cols;
    let expected = 16 + image_count * pixel_dim;
    if images.len() < expected {
        return Err(Error::Parse {
            field: "images.data".into(),
            reason: format!("expected {expected} bytes, file has {}", images.len()),
        });
    }

    let magic = read_be_u32(&labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            field: "labels.magic".into(),
            reason: format!("expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let label_count = read_be_u32(&labels, 4, "labels.count")? as usize;
    if labels.len() < 8 + label_count {
        return Err(Error::Parse {
            field: "labels.data".into(),
            reason: format!(
                "expected {} bytes, file has {}",
                8 + label_count,
                labels.len()
            ),
        });
    }
    if image_count != label_count {
        return Err(Error::Parse {
            field: "count".into(),
            reason: format!("images file has {image_count} items, labels file has {label_count}"),
        });
    }

    let take = limit.map_or(image_count, |l| l.min(image_count));
    if take == 0 {
        return Err(Error::Parse {
            field: "count".into(),
            reason: "files contain zero samples".into(),
        });
    }
    let mut features = Vec::with_capacity(take);
    let mut out_labels = Vec::with_capacity(take);
    for i in 0..take {
        let start = 16 + i * pixel_dim;
        let pixels = &images[start..start + pixel_dim];
        features.push(pixels.iter().map(|&p| p as f64 / 255.0).collect());
        let label = labels[8 + i] as usize;
        if label >= 10 {
            return Err(Error::Parse {
                field: "labels.data".into(),
                reason: format!("label {label} at index {i} is outside [0, 10)"),
            });
        }
        out_labels.push(label);
    }
    LabeledDataset::new(features, out_labels, 10)
}

/// Result of a partitioning pass: the clients plus any per-class samples the
/// equal-shard requirement forced us to drop.
#[derive(Debug)]
pub struct PartitionReport {
    pub clients: Vec<ClientDataset>,
    pub truncated_per_class: Vec<usize>,
}

/// Stratified 75/25 split of per-class index lists into one client.
///
/// The client keeps `round(0.75 * n_i)` training samples overall, allocated
/// across its classes by largest remainder so the test split mirrors the
/// client's own class proportions.
fn build_client(
    data: &LabeledDataset,
    client_id: usize,
    per_class: &[Vec<usize>],
) -> ClientDataset {
    let n: usize = per_class.iter().map(Vec::len).sum();
    debug_assert!(n > 0, "clients are guaranteed at least one sample");
    let target = if n == 1 {
        1
    } else {
        ((3 * n + 2) / 4).clamp(1, n - 1)
    };

    let mut train_counts: Vec<usize> = per_class
        .iter()
        .map(|idx| (target * idx.len() / n).min(idx.len()))
        .collect();
    let assigned: usize = train_counts.iter().sum();
    // hand out the remainder to the largest fractional shares
    let mut by_remainder: Vec<usize> = (0..per_class.len())
        .filter(|&c| train_counts[c] < per_class[c].len())
        .collect();
    by_remainder.sort_by_key(|&c| (std::cmp::Reverse(target * per_class[c].len() % n), c));
    for &c in by_remainder.iter().take(target - assigned) {
        train_counts[c] += 1;
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (indices, &t) in per_class.iter().zip(&train_counts) {
        train_idx.extend_from_slice(&indices[..t]);
        test_idx.extend_from_slice(&indices[t..]);
    }
    let train = data.subset(&train_idx);
    let test = if test_idx.is_empty() {
        LabeledDataset::empty_like(data.input_dim(), data.class_count)
    } else {
        data.subset(&test_idx)
    };
    let class_counts = train.class_counts();
    ClientDataset {
        client_id,
        train,
        test,
        class_counts,
    }
}

/// Splits the dataset so every client holds exactly `classes_per_client`
/// distinct classes, carved from disjoint equal-size shards per class.
pub fn partition_pathological(
    data: &LabeledDataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionReport> {
    let k = data.class_count;
    if clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > k {
        return Err(Error::Argument(format!(
            "classes_per_client must be in [1, {k}], got {classes_per_client}"
        )));
    }
    let total_shards = clients * classes_per_client;
    if !total_shards.is_multiple_of(k) {
        return Err(Error::Partition(format!(
            "clients x classes_per_client = {total_shards} must be divisible by {k} classes"
        )));
    }
    let shards_per_class = total_shards / k;
    let counts = data.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n < shards_per_class {
            return Err(Error::Partition(format!(
                "class {c} has {n} samples but needs at least {shards_per_class} for equal shards"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in data.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let shard_sizes: Vec<usize> = counts.iter().map(|&n| n / shards_per_class).collect();
    let truncated_per_class: Vec<usize> = counts
        .iter()
        .zip(&shard_sizes)
        .map(|(&n, &s)| n - s * shards_per_class)
        .collect();

    // Deal shards most-remaining-first with seeded tie-breaking. Equal
    // supply keeps the greedy feasible (at most `classes_per_client` classes
    // can ever sit at the remaining-client bound, and all get picked), and
    // the shuffled ties vary which classes share a client.
    let mut remaining = vec![shards_per_class; k];
    let mut next_shard = vec![0usize; k];
    let mut tie_order: Vec<usize> = (0..k).collect();
    let mut out = Vec::with_capacity(clients);
    for i in 0..clients {
        tie_order.shuffle(&mut rng);
        let mut ranked = tie_order.clone();
        ranked.sort_by_key(|&c| std::cmp::Reverse(remaining[c]));
        let chosen: Vec<usize> = ranked
            .into_iter()
            .filter(|&c| remaining[c] > 0)
            .take(classes_per_client)
            .collect();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &c in &chosen {
            let s = shard_sizes[c];
            let start = next_shard[c] * s;
            per_class[c] = pools[c][start..start + s].to_vec();
            next_shard[c] += 1;
            remaining[c] -= 1;
        }
        out.push(build_client(data, i, &per_class));
    }
    Ok(PartitionReport {
        clients: out,
        truncated_per_class,
    })
}

/// One draw from a symmetric Dirichlet via gamma normalization; falls back to
/// a one-hot vector if every gamma draw underflows (tiny concentration).
fn sample_dirichlet(alpha: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum.is_finite() && sum > 1e-300 {
        draws.iter().map(|&d| d / sum).collect()
    } else {
        let hot = rng.random_range(0..m);
        let mut v = vec![0.0; m];
        v[hot] = 1.0;
        v
    }
}

/// Splits each class across clients by Dirichlet(beta)-drawn proportions.
///
/// Every client is guaranteed at least one training sample: if a client comes
/// up empty, one sample is reassigned from the currently largest client.
pub fn partition_dirichlet(
    data: &LabeledDataset,
    clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionReport> {
    if clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Argument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    if data.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {clients} clients with one sample each",
            data.len()
        )));
    }
    let k = data.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in data.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    // per_class[i][c] = indices of class c given to client i
    let mut per_class: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k]; clients];
    for (c, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let props = sample_dirichlet(beta, clients, &mut rng);
        let n = pool.len();
        let mut cum = 0.0;
        let mut prev_cut = 0usize;
        for (i, &p) in props.iter().enumerate() {
            cum += p;
            let cut = if i + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(prev_cut, n)
            };
            per_class[i][c].extend_from_slice(&pool[prev_cut..cut]);
            prev_cut = cut;
        }
    }

    // guarantee at least one sample per client
    loop {
        let totals: Vec<usize> = per_class
            .iter()
            .map(|pc| pc.iter().map(Vec::len).sum())
            .collect();
        let Some(empty) = totals.iter().position(|&t| t == 0) else {
            break;
        };
        let donor = totals
            .iter()
            .enumerate()
            .max_by_key(|&(i, &t)| (t, std::cmp::Reverse(i)))
            .map(|(i, _)| i)
            .expect("at least one client");
        let class = per_class[donor]
            .iter()
            .enumerate()
            .max_by_key(|&(c, v)| (v.len(), std::cmp::Reverse(c)))
            .map(|(c, _)| c)
            .expect("donor has samples");
        let moved = per_class[donor][class].pop().expect("donor class nonempty");
        per_class[empty][class].push(moved);
    }

    let out = (0..clients)
        .map(|i| build_client(data, i, &per_class[i]))
        .collect();
    Ok(PartitionReport {
        clients: out,
        truncated_per_class: vec![0; k],
    })
}
