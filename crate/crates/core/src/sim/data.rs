//! Datasets: IDX files, synthetic Gaussian blobs, and device partitions.

use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Row-major samples with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Dataset(format!(
                "{} values for {} samples of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffled split into `(train, test)` with `test_len` test samples.
    pub fn split(&self, test_len: usize, rng: &mut SimRng) -> Result<(Dataset, Dataset)> {
        if test_len == 0 || test_len >= self.len() {
            return Err(Error::Dataset(format!("cannot hold out {test_len} of {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, rng);
        Ok((self.subset(&idx[test_len..]), self.subset(&idx[..test_len])))
    }
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut SimRng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

/// Raw IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX file: rank-3 images or rank-1 labels.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Dataset("IDX header truncated".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let rank = match magic {
        0x0000_0803 => 3,
        0x0000_0801 => 1,
        _ => return Err(Error::Dataset(format!("bad IDX magic {magic:#010x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Dataset("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("four bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() < header + count {
        return Err(Error::Dataset(format!(
            "IDX body has {} bytes, header promises {count}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..header + count].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes)
}

/// Pairs an image file with a label file; pixels scaled to `[0, 1]`.
pub fn idx_dataset(images: &IdxArray, labels: &IdxArray, limit: Option<usize>) -> Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 {
        return Err(Error::Dataset("expected rank-3 images and rank-1 labels".into()));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Dataset(format!("{} images but {} labels", images.dims[0], labels.dims[0])));
    }
    let n = limit.map_or(images.dims[0], |l| l.min(images.dims[0]));
    let dim = images.dims[1] * images.dims[2];
    let features = images.data[..n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.data[..n].iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(dim, classes, features, labels)
}

/// Loads `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` from `dir`.
pub fn load_mnist_dir(dir: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = load_idx(&dir.join("train-images-idx3-ubyte"))?;
    let labels = load_idx(&dir.join("train-labels-idx1-ubyte"))?;
    idx_dataset(&images, &labels, limit)
}

/// Isotropic Gaussian clusters, one per class.
///
/// Centers are drawn with per-coordinate scale `separation`; samples add
/// unit noise. Labels cycle through the classes.
pub fn synthesize_blobs(classes: usize, dims: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dims == 0 || n == 0 {
        return Err(Error::Dataset(format!("blobs need classes >= 2, dims > 0, n > 0; got {classes}, {dims}, {n}")));
    }
    let mut rng = SimRng::new(seed);
    let centers: Vec<f64> = (0..classes * dims).map(|_| rng.normal() * separation).collect();
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dims {
            features.push(centers[c * dims + d] + rng.normal());
        }
    }
    Dataset::new(dims, classes, features, labels)
}

/// How samples are spread over devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    /// Sorted by label, cut into `2K` shards, two per device.
    LabelShard,
    /// Per-class device proportions drawn from a symmetric Dirichlet.
    Dirichlet(f64),
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "label-shard" | "shard" => Ok(Self::LabelShard),
            _ => {
                let beta = s
                    .strip_prefix("dirichlet:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .filter(|b| *b > 0.0)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown partition '{s}'")))?;
                Ok(Self::Dirichlet(beta))
            }
        }
    }
}

/// Sample indices held by each of `k` devices.
pub fn partition(ds: &Dataset, k: usize, mode: PartitionMode, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    let n = ds.len();
    let parts = match mode {
        PartitionMode::Iid => {
            if k > n {
                return Err(Error::Dataset(format!("{k} devices for {n} samples")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            shuffle(&mut idx, rng);
            (0..k).map(|d| idx[d * n / k..(d + 1) * n / k].to_vec()).collect()
        }
        PartitionMode::LabelShard => {
            if 2 * k > n {
                return Err(Error::Dataset(format!("{} shards from {n} samples", 2 * k)));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| ds.labels[i]);
            let shards = 2 * k;
            let shard = |s: usize| &idx[s * n / shards..(s + 1) * n / shards];
            (0..k).map(|d| [shard(d), shard(d + k)].concat()).collect()
        }
        PartitionMode::Dirichlet(beta) => {
            if !(beta > 0.0) {
                return Err(Error::InvalidArgument(format!("Dirichlet concentration {beta}")));
            }
            let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut parts = vec![Vec::new(); k];
            for c in 0..ds.classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == c).collect();
                shuffle(&mut members, rng);
                let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut start = 0;
                let mut acc = 0.0;
                for (d, w) in draws.iter().enumerate() {
                    acc += w;
                    let end = if d + 1 == k || total == 0.0 {
                        members.len()
                    } else {
                        ((acc / total) * members.len() as f64).round() as usize
                    };
                    let end = end.clamp(start, members.len());
                    parts[d].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            parts
        }
    };
    if let Some(d) = parts.iter().position(Vec::is_empty) {
        return Err(Error::Dataset(format!("device {} received no samples", d + 1)));
    }
    Ok(parts)
}

/// Where a training run gets its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    /// Directory with MNIST-style IDX files, optionally truncated.
    Idx { dir: std::path::PathBuf, limit: Option<usize> },
    Blobs { classes: usize, dims: usize, n: usize, separation: f64 },
}

impl DatasetSpec {
    /// Loads the data and holds out a fifth of it for testing.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let ds = match self {
            Self::Idx { dir, limit } => load_mnist_dir(dir, *limit)?,
            Self::Blobs {
                classes,
                dims,
                n,
                separation,
            } => synthesize_blobs(*classes, *dims, *n, *separation, seed)?,
        };
        let test = (ds.len() / 5).max(1);
        ds.split(test, &mut SimRng::new(seed ^ 0x5EED))
    }
}

impl std::str::FromStr for DatasetSpec {
    type Err = Error;

    /// `idx:<dir>[@limit]` or `blobs:key=value,...` with keys `classes`,
    /// `dims`, `n` and `sep`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(msg);
        if let Some(rest) = s.strip_prefix("idx:") {
            let (dir, limit) = match rest.rsplit_once('@') {
                Some((d, l)) => (d, Some(l.parse::<usize>().map_err(|_| bad(format!("bad sample limit '{l}'")))?)),
                None => (rest, None),
            };
            return Ok(Self::Idx { dir: dir.into(), limit });
        }
        let rest = s
            .strip_prefix("blobs")
            .ok_or_else(|| bad(format!("unknown dataset '{s}'")))?;
        let (mut classes, mut dims, mut n, mut separation) = (10usize, 32usize, 4000usize, 1.0f64);
        for kv in rest.trim_start_matches(':').split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{kv}'")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: '{v}'")));
            match k {
                "classes" => classes = num(v)?,
                "dims" => dims = num(v)?,
                "n" => n = num(v)?,
                "sep" => separation = v.parse().map_err(|_| bad(format!("bad value for sep: '{v}'")))?,
                _ => return Err(bad(format!("unknown blobs key '{k}'"))),
            }
        }
        Ok(Self::Blobs {
            classes,
            dims,
            n,
            separation,
        })
    }
}
