//! Datasets: IDX ingestion, the per-class subset protocol, label-skew
//! federated partitioning, and a synthetic Gaussian-blob generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;
use crate::seed::{derive_seed, Stream};

pub const IDX_LABELS: u32 = 0x0000_0801;
pub const IDX_IMAGES: u32 = 0x0000_0803;
/// Two-dimensional array of big-endian `f64`.
pub const IDX_F64_MATRIX: u32 = 0x0000_0E02;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{found:08x}")]
    BadMagic { found: u32 },
    #[error("IDX payload truncated: expected {expected} bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("IDX dimensions overflow the address space")]
    DimensionOverflow,
    #[error("class {class}: need {needed} examples, only {available} available")]
    InsufficientExamples { class: usize, needed: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Decoded IDX array.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxArray {
    Labels(Vec<u8>),
    /// Pixels scaled to `[0, 1]`, row-major per image.
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<f64> },
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or(DataError::TruncatedPayload { expected: 4 * i + 4, got: bytes.len() })
    };
    let magic = word(0)?;
    let (ndims, elem) = match magic {
        IDX_LABELS => (1, 1),
        IDX_IMAGES => (3, 1),
        IDX_F64_MATRIX => (2, 8),
        found => return Err(DataError::BadMagic { found }),
    };
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 * (ndims + 1);
    let payload = dims
        .iter()
        .try_fold(elem, |acc: usize, &d| acc.checked_mul(d))
        .ok_or(DataError::DimensionOverflow)?;
    let expected = header.checked_add(payload).ok_or(DataError::DimensionOverflow)?;
    if bytes.len() < expected {
        return Err(DataError::TruncatedPayload { expected, got: bytes.len() });
    }
    let body = &bytes[header..expected];
    Ok(match magic {
        IDX_LABELS => IdxArray::Labels(body.to_vec()),
        IDX_IMAGES => IdxArray::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: body.iter().map(|&b| f64::from(b) / 255.0).collect(),
        },
        _ => IdxArray::Matrix {
            rows: dims[0],
            cols: dims[1],
            data: body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes"))).collect(),
        },
    })
}

fn idx_header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| DataError::DimensionOverflow)?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = idx_header(IDX_LABELS, &[labels.len()])?;
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(DataError::Invalid(format!("{} pixels for {count}x{rows}x{cols} images", pixels.len())));
    }
    let mut out = idx_header(IDX_IMAGES, &[count, rows, cols])?;
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_matrix(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != rows * cols {
        return Err(DataError::Invalid(format!("{} values for a {rows}x{cols} matrix", data.len())));
    }
    let mut out = idx_header(IDX_F64_MATRIX, &[rows, cols])?;
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

/// Feature vectors with class labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} examples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Self { dim, num_classes, features, labels })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self { dim, num_classes, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn samples(&self) -> Vec<Sample<'_, f64>> {
        (0..self.len()).map(|i| Sample::class(self.x(i), self.labels[i])).collect()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.x(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Self { dim: self.dim, num_classes: self.num_classes, features, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Example indices grouped by class, in storage order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Distinct labels present, ascending.
    pub fn distinct_labels(&self) -> Vec<usize> {
        self.class_indices().iter().enumerate().filter(|(_, v)| !v.is_empty()).map(|(c, _)| c).collect()
    }

    /// Appends `other` (same dimension and class count).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim || self.num_classes != other.num_classes {
            return Err(DataError::Invalid("cannot concatenate sets of different shape".into()));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Joins an IDX image file and an IDX label file into one set.
pub fn labeled_set_from_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<LabeledSet> {
    let IdxArray::Images { count, rows, cols, pixels } = parse_idx(images)? else {
        return Err(DataError::Invalid("expected an IDX image file".into()));
    };
    let IdxArray::Labels(ls) = parse_idx(labels)? else {
        return Err(DataError::Invalid("expected an IDX label file".into()));
    };
    if ls.len() != count {
        return Err(DataError::Invalid(format!("{count} images but {} labels", ls.len())));
    }
    LabeledSet::new(rows * cols, num_classes, pixels, ls.into_iter().map(usize::from).collect())
}

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Loads the standard train/test IDX quadruple (MNIST or Fashion-MNIST
/// naming) from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let read = |name: &str| read_file(&dir.join(name));
    let train = labeled_set_from_idx(&read(MNIST_FILES[0])?, &read(MNIST_FILES[1])?, 10)?;
    let test = labeled_set_from_idx(&read(MNIST_FILES[2])?, &read(MNIST_FILES[3])?, 10)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSize {
    Small,
    Large,
    Full,
}

impl SubsetSize {
    /// Train and test examples per class; `None` keeps everything.
    pub fn per_class(self) -> Option<(usize, usize)> {
        match self {
            SubsetSize::Small => Some((50, 950)),
            SubsetSize::Large => Some((900, 300)),
            SubsetSize::Full => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubsetSize::Small => "small",
            SubsetSize::Large => "large",
            SubsetSize::Full => "full",
        }
    }
}

/// Draws a per-class subset of the given size.
///
/// Train and test pools are merged per class and shuffled before drawing,
/// because some classes have fewer official test images than the small
/// protocol asks for. Each example lands in at most one split.
pub fn subset_protocol(train: &LabeledSet, test: &LabeledSet, size: SubsetSize, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    let Some((n_train, n_test)) = size.per_class() else {
        return Ok((train.clone(), test.clone()));
    };
    let pool = train.concat(test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Subset, 0, 0));
    let mut tr = Vec::with_capacity(n_train * pool.num_classes());
    let mut te = Vec::with_capacity(n_test * pool.num_classes());
    for (class, mut idx) in pool.class_indices().into_iter().enumerate() {
        let needed = n_train + n_test;
        if idx.len() < needed {
            return Err(DataError::InsufficientExamples { class, needed, available: idx.len() });
        }
        idx.shuffle(&mut rng);
        tr.extend_from_slice(&idx[..n_train]);
        te.extend_from_slice(&idx[n_train..needed]);
    }
    Ok((pool.subset(&tr), pool.subset(&te)))
}

/// Gaussian blobs with unit covariance around `separation`-scaled random unit
/// directions; the first 80% of each class (rounded) is the train split.
pub fn synthetic_mixture(n_classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(separation > 0.0) {
        return Err(DataError::Invalid("separation must be positive".into()));
    }
    if n_classes == 0 || dim == 0 {
        return Err(DataError::Invalid("synthetic data needs at least one class and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Synthetic, 0, 0));
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|a| separation * a / norm).collect()
        })
        .collect();
    let n_train = (0.8 * per_class as f64).round() as usize;
    let (mut trx, mut trl, mut tex, mut tel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (c, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let (xs, ls) = if k < n_train { (&mut trx, &mut trl) } else { (&mut tex, &mut tel) };
            xs.extend(mean.iter().map(|m| m + normal()));
            ls.push(c);
        }
    }
    Ok((LabeledSet::new(dim, n_classes, trx, trl)?, LabeledSet::new(dim, n_classes, tex, tel)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub id: usize,
    pub labels: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub clients: Vec<ClientManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: usize,
    pub labels: Vec<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub seed: u64,
    pub clients: Vec<ClientData>,
}

impl FederatedDataset {
    pub fn manifest(&self) -> PartitionManifest {
        PartitionManifest {
            seed: self.seed,
            clients: self
                .clients
                .iter()
                .map(|c| ClientManifest { id: c.id, labels: c.labels.clone(), train_count: c.train.len(), test_count: c.test.len() })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.clients.first().map_or(0, |c| c.train.dim())
    }

    pub fn num_classes(&self) -> usize {
        self.clients.first().map_or(0, |c| c.train.num_classes())
    }
}

/// Label sets per client: a sliding window of `labels_per_client` over a
/// seeded permutation of the classes, with window starts spread evenly, so
/// every client gets distinct labels and each label has about
/// `n_clients * labels_per_client / num_classes` holders.
pub fn assign_labels(num_classes: usize, n_clients: usize, labels_per_client: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Partition, 0, 0));
    perm.shuffle(&mut rng);
    (0..n_clients)
        .map(|c| {
            let start = c * num_classes / n_clients;
            let mut ls: Vec<usize> = (0..labels_per_client).map(|k| perm[(start + k) % num_classes]).collect();
            ls.sort_unstable();
            ls
        })
        .collect()
}

/// Splits `indices` into `parts` contiguous chunks whose sizes differ by at
/// most one (earlier chunks take the remainder).
fn even_split(indices: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = indices.len() / parts;
    let rem = indices.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let n = base + usize::from(p < rem);
        out.push(&indices[at..at + n]);
        at += n;
    }
    out
}

/// Non-IID split where client `c` only sees the labels from
/// [`assign_labels`]; each label's train and test examples are shuffled and
/// divided evenly among the clients holding it.
pub fn partition_label_skew(
    train: &LabeledSet,
    test: &LabeledSet,
    n_clients: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    let classes = train.num_classes();
    if n_clients == 0 || labels_per_client == 0 || labels_per_client > classes {
        return Err(DataError::Invalid(format!(
            "cannot give {labels_per_client} of {classes} labels to each of {n_clients} clients"
        )));
    }
    if test.num_classes() != classes || test.dim() != train.dim() {
        return Err(DataError::Invalid("train and test sets have different shapes".into()));
    }
    let labels = assign_labels(classes, n_clients, labels_per_client, seed);
    let mut holders = vec![Vec::new(); classes];
    for (c, ls) in labels.iter().enumerate() {
        for &l in ls {
            holders[l].push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Partition, 1, 0));
    let mut split = |set: &LabeledSet, require: bool| -> Result<Vec<Vec<usize>>> {
        let mut per_client = vec![Vec::new(); n_clients];
        for (class, mut idx) in set.class_indices().into_iter().enumerate() {
            let hs = &holders[class];
            if hs.is_empty() {
                continue;
            }
            if require && idx.len() < hs.len() {
                return Err(DataError::InsufficientExamples { class, needed: hs.len(), available: idx.len() });
            }
            idx.shuffle(&mut rng);
            for (&c, chunk) in hs.iter().zip(even_split(&idx, hs.len())) {
                per_client[c].extend_from_slice(chunk);
            }
        }
        Ok(per_client)
    };
    let train_idx = split(train, true)?;
    let test_idx = split(test, false)?;
    let clients = labels
        .into_iter()
        .enumerate()
        .map(|(id, labels)| ClientData { id, labels, train: train.subset(&train_idx[id]), test: test.subset(&test_idx[id]) })
        .collect();
    Ok(FederatedDataset { seed, clients })
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn shard_paths(dir: &Path, id: usize, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("client_{id:03}_{split}_x.idx")), dir.join(format!("client_{id:03}_{split}_y.idx")))
}

fn write_shard(set: &LabeledSet, x: &Path, y: &Path) -> Result<()> {
    write_file(x, &write_idx_matrix(set.len(), set.dim(), set.features())?)?;
    let labels: Vec<u8> = set
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit a byte"))))
        .collect::<Result<_>>()?;
    write_file(y, &write_idx_labels(&labels)?)
}

fn read_shard(x: &Path, y: &Path, dim: usize, num_classes: usize) -> Result<LabeledSet> {
    let IdxArray::Matrix { rows, cols, data } = parse_idx(&read_file(x)?)? else {
        return Err(DataError::Invalid(format!("{}: expected an f64 matrix", x.display())));
    };
    let IdxArray::Labels(ls) = parse_idx(&read_file(y)?)? else {
        return Err(DataError::Invalid(format!("{}: expected labels", y.display())));
    };
    if ls.len() != rows || (rows > 0 && cols != dim) {
        return Err(DataError::Invalid(format!("{}: shard shape disagrees with its labels", x.display())));
    }
    LabeledSet::new(dim, num_classes, data, ls.into_iter().map(usize::from).collect())
}

/// On-disk header for serialized shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ShardInfo {
    dim: usize,
    num_classes: usize,
}

/// Writes `manifest.json` plus per-client IDX shards into `dir`.
pub fn write_federated(dir: &Path, fed: &FederatedDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let info = ShardInfo { dim: fed.input_dim(), num_classes: fed.num_classes() };
    let manifest = serde_json::to_string_pretty(&fed.manifest()).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_file(&dir.join("shape.json"), serde_json::to_string(&info).expect("shape serializes").as_bytes())?;
    for c in &fed.clients {
        let (x, y) = shard_paths(dir, c.id, "train");
        write_shard(&c.train, &x, &y)?;
        let (x, y) = shard_paths(dir, c.id, "test");
        write_shard(&c.test, &x, &y)?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// Inverse of [`write_federated`].
pub fn read_federated(dir: &Path) -> Result<FederatedDataset> {
    let manifest: PartitionManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let info: ShardInfo = read_json(&dir.join("shape.json"))?;
    let mut clients = Vec::with_capacity(manifest.clients.len());
    for m in manifest.clients {
        let (x, y) = shard_paths(dir, m.id, "train");
        let train = read_shard(&x, &y, info.dim, info.num_classes)?;
        let (x, y) = shard_paths(dir, m.id, "test");
        let test = read_shard(&x, &y, info.dim, info.num_classes)?;
        if train.len() != m.train_count || test.len() != m.test_count {
            return Err(DataError::Invalid(format!("client {} shards disagree with the manifest", m.id)));
        }
        clients.push(ClientData { id: m.id, labels: m.labels, train, test });
    }
    Ok(FederatedDataset { seed: manifest.seed, clients })
}
