//! Dataset containers, synthetic data generation, IDX ingestion, and the
//! IID/Dirichlet/shard client partitioning schemes.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{derive_stream, RngStream};

/// Dense classification dataset: `n x p` features, integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>, // row-major, n * p
    labels: Vec<u32>,
    n: usize,
    p: usize,
    num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        p: usize,
        num_classes: usize,
        name: &str,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Usage(
                "dataset must contain at least one example".into(),
            ));
        }
        if features.len() != n * p {
            return Err(Error::Usage(format!(
                "feature buffer has {} entries, expected n*p = {}",
                features.len(),
                n * p
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at flat index {i}"
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Usage(format!(
                "label {} at index {i} exceeds num_classes = {num_classes}",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            labels,
            n,
            p,
            num_classes,
            name: name.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_features(&self) -> usize {
        self.p
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// Global class histogram as counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// One client's slice of the dataset: sorted global indices plus its weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    client_id: usize,
    indices: Vec<usize>,
    n_k: usize,
}

impl ClientShard {
    pub fn new(client_id: usize, mut indices: Vec<usize>, dataset_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Usage(format!("client {client_id} received no data")));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Usage(format!(
                "client {client_id} holds duplicate indices"
            )));
        }
        if *indices.last().unwrap() >= dataset_len {
            return Err(Error::Usage(format!(
                "client {client_id} index {} out of range (n = {dataset_len})",
                indices.last().unwrap()
            )));
        }
        let n_k = indices.len();
        Ok(Self {
            client_id,
            indices,
            n_k,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }
}

/// How to split a dataset across `k` clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Iid,
    Dirichlet {
        alpha: f64,
    },
    Shard {
        shards_per_client: usize,
        classes_per_shard: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub k: usize,
    pub seed: u64,
}

/// Named heterogeneity presets; shard parameters mirror the
/// mild/moderate/severe shard recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeverityPreset {
    Mild,
    Moderate,
    Severe,
}

impl SeverityPreset {
    /// Concrete spec for a dataset with `num_classes` classes.
    pub fn spec(self, k: usize, num_classes: usize, seed: u64) -> PartitionSpec {
        let scheme = match self {
            // large shards balancing all classes, two per client
            SeverityPreset::Mild => Scheme::Shard {
                shards_per_client: 2,
                classes_per_shard: num_classes,
            },
            // medium shards dominated by a few classes
            SeverityPreset::Moderate => Scheme::Shard {
                shards_per_client: 2,
                classes_per_shard: 4.min(num_classes),
            },
            // small shards covering 1-2 classes, one per client
            SeverityPreset::Severe => Scheme::Shard {
                shards_per_client: 1,
                classes_per_shard: 2.min(num_classes),
            },
        };
        PartitionSpec { scheme, k, seed }
    }
}

/// Gaussian class clusters with means at radius `class_sep / 2` on random
/// directions (antipodal for two classes, so the blobs are separable through
/// the origin). Deterministic per seed; labels round-robin so any prefix is
/// label-balanced up to rounding.
pub fn synth_classification(
    n: usize,
    p: usize,
    num_classes: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Usage("synth data needs at least 2 classes".into()));
    }
    if n < num_classes {
        return Err(Error::Usage(format!(
            "n = {n} must be at least num_classes = {num_classes}"
        )));
    }
    if p < 2 {
        return Err(Error::Usage(format!("p = {p} must be at least 2")));
    }
    if !(class_sep >= 0.0 && class_sep.is_finite()) {
        return Err(Error::Usage(format!(
            "class_sep = {class_sep} must be finite and >= 0"
        )));
    }

    let mut rng = derive_stream(seed, "synth", 0).rng();

    let mut means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if num_classes == 2 && c == 1 {
            let first: &Vec<f64> = &means[0];
            means.push(first.iter().map(|v| -v).collect());
            continue;
        }
        let mut dir: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v *= 0.5 * class_sep / norm;
        }
        means.push(dir);
    }

    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c as u32);
        for &m in &means[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(m + noise);
        }
    }

    Dataset::new(features, labels, p, num_classes, "synth")
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read, field: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {field}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an MNIST-format IDX image/label pair. Pixels are scaled to [0, 1];
/// labels must be digits 0-9.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32_be(&mut img, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n_img = read_u32_be(&mut img, "images count")? as usize;
    let rows = read_u32_be(&mut img, "images rows")? as usize;
    let cols = read_u32_be(&mut img, "images cols")? as usize;
    let p = rows * cols;
    let mut pixels = vec![0u8; n_img * p];
    img.read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated file while reading images pixel data".into()))?;

    let mut lab = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut lab, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n_lab = read_u32_be(&mut lab, "labels count")? as usize;
    if n_lab != n_img {
        return Err(Error::Format(format!(
            "count mismatch: images count = {n_img}, labels count = {n_lab}"
        )));
    }
    let mut raw_labels = vec![0u8; n_lab];
    lab.read_exact(&mut raw_labels)
        .map_err(|_| Error::Format("truncated file while reading labels data".into()))?;

    if let Some(i) = raw_labels.iter().position(|&l| l > 9) {
        return Err(Error::Format(format!(
            "labels data: label {} at index {i} outside 0-9",
            raw_labels[i]
        )));
    }

    let features = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = raw_labels.iter().map(|&b| u32::from(b)).collect();
    Dataset::new(features, labels, p, 10, "idx")
}

// Binary container for synthetic datasets: little-endian u32 header
// (n, p, num_classes), then f32 features row-major, then u16 labels.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + ds.n * ds.p * 4 + ds.n * 2);
    out.extend_from_slice(&(ds.n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.p as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for &v in &ds.features {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Format("truncated dataset container header".into()));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let p = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let num_classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n * p * 4 + n * 2;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset container size {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    let mut features = Vec::with_capacity(n * p);
    for chunk in bytes[12..12 + n * p * 4].chunks_exact(4) {
        features.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    let mut labels = Vec::with_capacity(n);
    for chunk in bytes[12 + n * p * 4..].chunks_exact(2) {
        labels.push(u32::from(u16::from_le_bytes(chunk.try_into().unwrap())));
    }
    Dataset::new(features, labels, p, num_classes, "container")
}

/// Hold out a global test set before partitioning. The split is a
/// stream-shuffled cut; both halves keep the original feature space.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Usage(format!(
            "test_fraction = {test_fraction} must lie in [0, 1)"
        )));
    }
    let n_test = ((ds.n as f64) * test_fraction).round() as usize;
    if ds.n - n_test == 0 {
        return Err(Error::Usage("split leaves no training data".into()));
    }
    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut rng = derive_stream(seed, "split", 0).rng();
    order.shuffle(&mut rng);

    let take = |idxs: &[usize], name: &str| -> Result<Dataset> {
        let mut features = Vec::with_capacity(idxs.len() * ds.p);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            features.extend_from_slice(ds.row(i));
            labels.push(ds.label(i));
        }
        Dataset::new(features, labels, ds.p, ds.num_classes, name)
    };
    let test = if n_test > 0 {
        take(&order[..n_test], &format!("{}/test", ds.name))?
    } else {
        // empty test sets are not representable; callers wanting no test
        // split should skip the call
        return Err(Error::Usage(
            "test_fraction yields an empty test set".into(),
        ));
    };
    let train = take(&order[n_test..], &format!("{}/train", ds.name))?;
    Ok((train, test))
}

/// Split `ds` across `spec.k` clients. Shards are disjoint and cover the
/// whole index range; deterministic per `(dataset, spec, seed)`.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if spec.k > ds.n {
        return Err(Error::Usage(format!(
            "k = {} exceeds dataset size n = {}",
            spec.k, ds.n
        )));
    }
    let shards = match &spec.scheme {
        Scheme::Iid => partition_iid(ds, spec.k, spec.seed),
        Scheme::Dirichlet { alpha } => partition_dirichlet(ds, spec.k, *alpha, spec.seed),
        Scheme::Shard {
            shards_per_client,
            classes_per_shard,
        } => partition_shard(
            ds,
            spec.k,
            *shards_per_client,
            *classes_per_shard,
            spec.seed,
        ),
    }?;

    debug_assert!(
        shards_are_partition(&shards, ds.n),
        "partitioner broke coverage/disjointness"
    );
    Ok(shards)
}

fn shards_are_partition(shards: &[ClientShard], n: usize) -> bool {
    let mut seen = vec![false; n];
    for s in shards {
        for &i in s.indices() {
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|b| b)
}

fn partition_iid(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut rng = derive_stream(seed, "partition.iid", 0).rng();
    order.shuffle(&mut rng);

    let base = ds.n / k;
    let extra = ds.n % k;
    let mut shards = Vec::with_capacity(k);
    let mut cursor = 0;
    for client in 0..k {
        let size = base + usize::from(client < extra);
        let chunk = order[cursor..cursor + size].to_vec();
        cursor += size;
        shards.push(ClientShard::new(client, chunk, ds.n)?);
    }
    Ok(shards)
}

fn partition_dirichlet(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Usage(format!(
            "dirichlet alpha = {alpha} must be positive"
        )));
    }
    let mut rng = derive_stream(seed, "partition.dirichlet", 0).rng();
    let gamma = GammaDist::new(alpha, 1.0)
        .map_err(|e| Error::Usage(format!("dirichlet alpha = {alpha}: {e}")))?;

    // Per-class index pools, shuffled.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for i in 0..ds.n {
        pools[ds.label(i) as usize].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for pool in &pools {
        if pool.is_empty() {
            continue;
        }
        // Dirichlet draw as normalized Gamma(alpha, 1) samples.
        let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            draws = vec![1.0; k];
        }
        let total: f64 = draws.iter().sum();
        let n_c = pool.len();
        // Cumulative rounding so the class allocates exactly n_c examples.
        let mut cum = 0.0;
        let mut prev_cut = 0usize;
        for (client, &w) in draws.iter().enumerate() {
            cum += w / total;
            let cut = if client + 1 == k {
                n_c
            } else {
                (cum * n_c as f64).round() as usize
            };
            let cut = cut.clamp(prev_cut, n_c);
            assignments[client].extend_from_slice(&pool[prev_cut..cut]);
            prev_cut = cut;
        }
    }

    // Empty-client repair: move one example from the largest client, repeat.
    while let Some(empty) = assignments.iter().position(|a| a.is_empty()) {
        let donor = assignments
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        if assignments[donor].len() <= 1 {
            return Err(Error::Usage(format!(
                "cannot repair empty client {empty}: no donor has more than one example"
            )));
        }
        let moved = assignments[donor].pop().unwrap();
        assignments[empty].push(moved);
    }

    assignments
        .into_iter()
        .enumerate()
        .map(|(client, idxs)| ClientShard::new(client, idxs, ds.n))
        .collect()
}

fn partition_shard(
    ds: &Dataset,
    k: usize,
    shards_per_client: usize,
    classes_per_shard: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if shards_per_client == 0 || classes_per_shard == 0 {
        return Err(Error::Usage(
            "shards_per_client and classes_per_shard must be at least 1".into(),
        ));
    }
    let c = ds.num_classes;
    if classes_per_shard > c {
        return Err(Error::Usage(format!(
            "classes_per_shard = {classes_per_shard} exceeds num_classes = {c}"
        )));
    }
    let total_shards = k * shards_per_client;
    let total_slots = total_shards * classes_per_shard;
    if !total_slots.is_multiple_of(c) {
        return Err(Error::Usage(format!(
            "shard supply infeasible: k*shards_per_client*classes_per_shard = {total_slots} \
             must be divisible by num_classes = {c}"
        )));
    }
    let slots_per_class = total_slots / c;

    let mut rng = derive_stream(seed, "partition.shard", 0).rng();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..ds.n {
        pools[ds.label(i) as usize].push(i);
    }
    for (label, pool) in pools.iter_mut().enumerate() {
        if pool.len() < slots_per_class {
            return Err(Error::Usage(format!(
                "class {label} has {} examples but the shard layout needs at least {slots_per_class}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
    }

    // Label slots in label order, dealt to shards by stride (slot j -> shard
    // j mod S); each slot consumes the next chunk of its label's pool, so
    // every shard covers exactly classes_per_shard distinct labels.
    let mut shard_indices: Vec<Vec<usize>> = vec![Vec::new(); total_shards];
    for (label, pool) in pools.iter().enumerate() {
        let n_c = pool.len();
        let base = n_c / slots_per_class;
        let extra = n_c % slots_per_class;
        let mut cursor = 0;
        for slot in 0..slots_per_class {
            let j = label * slots_per_class + slot;
            let size = base + usize::from(slot < extra);
            let shard = j % total_shards;
            shard_indices[shard].extend_from_slice(&pool[cursor..cursor + size]);
            cursor += size;
        }
    }

    let mut order: Vec<usize> = (0..total_shards).collect();
    order.shuffle(&mut rng);

    let mut shards = Vec::with_capacity(k);
    for client in 0..k {
        let mut idxs = Vec::new();
        for s in 0..shards_per_client {
            idxs.extend_from_slice(&shard_indices[order[client * shards_per_client + s]]);
        }
        shards.push(ClientShard::new(client, idxs, ds.n)?);
    }
    Ok(shards)
}

/// Per-client class histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientHistogram {
    pub client_id: usize,
    pub n_k: usize,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
}

impl ClientHistogram {
    pub fn distinct_classes(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Heterogeneity summary: histograms plus pairwise total-variation distances
/// between client class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityReport {
    pub per_client: Vec<ClientHistogram>,
    /// (client_a, client_b, tv) for a < b; empty when k = 1.
    pub pairwise_tv: Vec<(usize, usize, f64)>,
    pub mean_pairwise_tv: Option<f64>,
}

pub fn heterogeneity_report(shards: &[ClientShard], ds: &Dataset) -> HeterogeneityReport {
    let c = ds.num_classes;
    let per_client: Vec<ClientHistogram> = shards
        .iter()
        .map(|s| {
            let mut counts = vec![0usize; c];
            for &i in s.indices() {
                counts[ds.label(i) as usize] += 1;
            }
            let n_k = s.n_k();
            let proportions = counts.iter().map(|&x| x as f64 / n_k as f64).collect();
            ClientHistogram {
                client_id: s.client_id(),
                n_k,
                counts,
                proportions,
            }
        })
        .collect();

    let mut pairwise_tv = Vec::new();
    for a in 0..per_client.len() {
        for b in (a + 1)..per_client.len() {
            let tv = 0.5
                * per_client[a]
                    .proportions
                    .iter()
                    .zip(&per_client[b].proportions)
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
            pairwise_tv.push((per_client[a].client_id, per_client[b].client_id, tv));
        }
    }
    let mean_pairwise_tv = if pairwise_tv.is_empty() {
        None
    } else {
        Some(pairwise_tv.iter().map(|t| t.2).sum::<f64>() / pairwise_tv.len() as f64)
    };

    HeterogeneityReport {
        per_client,
        pairwise_tv,
        mean_pairwise_tv,
    }
}

/// Epoch batches for a shard: stream-shuffled, without replacement, cut into
/// `ceil(n_k / batch_size)` batches. A batch covering everything keeps the
/// given index order (shuffling a full batch changes nothing but float
/// summation order).
pub fn epoch_batches(indices: &[usize], batch_size: usize, stream: &RngStream) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= indices.len() {
        return vec![indices.to_vec()];
    }
    let mut order = indices.to_vec();
    let mut rng = stream.rng();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
