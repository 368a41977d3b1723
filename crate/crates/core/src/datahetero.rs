//! Datasets, the pathological non-IID split and device capability draws.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlpsError, Result};
use crate::netcore::{Batch, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d`, every entry in `[0, 1]`.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows == 0 || features.rows != labels.len() {
            return Err(FlpsError::config(format!(
                "dataset has {} feature rows and {} labels",
                features.rows,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(FlpsError::config(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// Rows `idx` as a new dataset (order preserved, duplicates allowed).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(Matrix::from_vec(idx.len(), d, data)?, labels, self.class_count)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let s = self.subset(idx)?;
        Batch::new(s.features, s.labels)
    }

    /// Uniform with-replacement minibatch.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(FlpsError::config("cannot sample a batch from an empty dataset"));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Dump as CSV with header `label,f0,...,f{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (n, &l) in self.labels.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in self.features.row(n) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| FlpsError::io(path, e))
    }
}

/// Class means of the synthetic clusters, pairwise `sep` apart.
///
/// With `dim >= classes` the means sit at `sep / sqrt(2)` along distinct axes
/// (a regular simplex); otherwise they are spaced `sep` apart along axis 0.
pub fn synth_centroids(classes: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= classes {
                m[c] = sep / std::f64::consts::SQRT_2;
            } else {
                m[0] = sep * c as f64;
            }
            m
        })
        .collect()
}

/// Gaussian clusters with unit covariance, mapped into `[0, 1]` by a fixed
/// affine map covering the means ±4, then clipped.
pub fn synth_dataset<R: Rng + ?Sized>(classes: usize, dim: usize, per_class: usize, sep: f64, rng: &mut R) -> Result<Dataset> {
    if !(sep > 0.0) {
        return Err(FlpsError::config(format!("cluster separation must be positive, got {sep}")));
    }
    if classes == 0 || dim == 0 || per_class == 0 {
        return Err(FlpsError::config("synthetic dataset needs classes, dim and per_class >= 1"));
    }
    let means = synth_centroids(classes, dim, sep);
    let (lo, hi) = synth_range(&means);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let x = m + rng.sample::<f64, _>(StandardNormal);
                data.push(((x - lo) / (hi - lo)).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, classes)
}

fn synth_range(means: &[Vec<f64>]) -> (f64, f64) {
    let all = means.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min) - 4.0;
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max) + 4.0;
    (lo, hi)
}

/// Means of [`synth_dataset`] expressed in its normalised feature space.
pub fn synth_centroids_normalized(classes: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    let means = synth_centroids(classes, dim, sep);
    let (lo, hi) = synth_range(&means);
    means.into_iter().map(|m| m.into_iter().map(|x| (x - lo) / (hi - lo)).collect()).collect()
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FlpsError::Parse {
            path: path.to_string(),
            offset: offset as u64,
            msg: format!("expected 4 header bytes, file has {} bytes", bytes.len()),
        })
}

/// IDX image file: magic 0x803, count, rows, cols, then one byte per pixel.
/// Returns `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FlpsError::Parse { path: path.into(), offset: 0, msg: format!("bad image magic {magic:#010x}") });
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let d = rows * cols;
    let expected = 16 + n * d;
    if bytes.len() != expected {
        return Err(FlpsError::Parse {
            path: path.into(),
            offset: bytes.len().min(expected) as u64,
            msg: format!("expected {expected} bytes for {n} images of {rows}x{cols}, found {}", bytes.len()),
        });
    }
    Ok((n, d, bytes[16..].iter().map(|&b| b as f64 / 255.0).collect()))
}

/// IDX label file: magic 0x801, count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FlpsError::Parse { path: path.into(), offset: 0, msg: format!("bad label magic {magic:#010x}") });
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(FlpsError::Parse {
            path: path.into(),
            offset: bytes.len().min(expected) as u64,
            msg: format!("expected {expected} bytes for {n} labels, found {}", bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FlpsError::io(path, e))
}

/// Load an IDX image/label pair. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, d, pixels) = parse_idx_images(&read_file(images)?, &images.display().to_string())?;
    let ys = parse_idx_labels(&read_file(labels)?, &labels.display().to_string())?;
    if ys.len() != n {
        return Err(FlpsError::config(format!("{n} images but {} labels", ys.len())));
    }
    let classes = ys.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Matrix::from_vec(n, d, pixels)?, ys, classes)
}

pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(images_path: &Path, labels_path: &Path, images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(images_path).map_err(|e| FlpsError::io(images_path, e))?;
    f.write_all(&encode_idx_images(images, rows, cols)).map_err(|e| FlpsError::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(labels)).map_err(|e| FlpsError::io(labels_path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<ClientSplit>,
    pub classes_per_client: usize,
}

/// Pathological non-IID split: every client gets shards from exactly
/// `min(c, classes)` distinct classes.
///
/// The `K * c` shards are spread over the classes as evenly as possible, each
/// class's shuffled samples are cut into equal shards, and the class-sorted
/// shard list is dealt with stride `K`, so no client receives two shards of
/// one class. A fraction of each shard becomes that client's test split.
pub fn pathological_partition<R: Rng + ?Sized>(
    ds: &Dataset,
    clients: usize,
    classes_per_client: usize,
    test_fraction: f64,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(FlpsError::config("need at least one client"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(FlpsError::config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let present: Vec<usize> = {
        let h = ds.label_histogram();
        (0..ds.class_count).filter(|&c| h[c] > 0).collect()
    };
    if classes_per_client == 0 || classes_per_client > present.len() {
        return Err(FlpsError::config(format!(
            "classes_per_client = {classes_per_client} but the dataset has {} populated classes",
            present.len()
        )));
    }
    let c = classes_per_client;
    let total_shards = clients * c;

    let mut class_order = present.clone();
    class_order.shuffle(rng);
    let base = total_shards / class_order.len();
    let extra = total_shards % class_order.len();

    // shards sorted by class (in shuffled class order)
    let mut shards: Vec<(usize, Vec<usize>)> = Vec::with_capacity(total_shards);
    for (rank, &class) in class_order.iter().enumerate() {
        let count = base + usize::from(rank < extra);
        if count == 0 {
            continue;
        }
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(rng);
        if idx.len() < count {
            return Err(FlpsError::config(format!(
                "class {class} has {} samples, too few for {count} shards",
                idx.len()
            )));
        }
        let size = idx.len() / count;
        for s in 0..count {
            shards.push((class, idx[s * size..(s + 1) * size].to_vec()));
        }
    }

    let mut owners: Vec<usize> = (0..clients).collect();
    owners.shuffle(rng);
    let mut plan = vec![ClientSplit { train: Vec::new(), test: Vec::new(), classes: Vec::new() }; clients];
    for (slot, &owner) in owners.iter().enumerate() {
        for j in 0..c {
            let (class, idx) = &shards[slot + j * clients];
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            let split = &mut plan[owner];
            split.test.extend_from_slice(&idx[..n_test]);
            split.train.extend_from_slice(&idx[n_test..]);
            split.classes.push(*class);
        }
    }
    for (k, split) in plan.iter_mut().enumerate() {
        split.classes.sort_unstable();
        if split.train.is_empty() || (test_fraction > 0.0 && split.test.is_empty()) {
            return Err(FlpsError::config(format!("client {k} would get an empty train or test split; shards too small")));
        }
    }
    Ok(PartitionPlan { clients: plan, classes_per_client: c })
}

/// Draw every client's capability level uniformly from `levels`.
pub fn assign_capabilities<R: Rng + ?Sized>(clients: usize, levels: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Err(FlpsError::config("capability level list is empty"));
    }
    if let Some(bad) = levels.iter().find(|&&z| !(z > 0.0 && z <= 1.0)) {
        return Err(FlpsError::config(format!("capability level {bad} outside (0, 1]")));
    }
    Ok((0..clients).map(|_| levels[rng.gen_range(0..levels.len())]).collect())
}
