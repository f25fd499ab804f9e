//! Dataset synthesis, IDX/CSV ingestion, subsampling and epoch batching.

use crate::error::DataError;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::io::Write;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled classification dataset. Inputs keep their natural rank:
/// (n, d) for flat features, (n, c, h, w) for images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers a batch by row indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn validate(self) -> Result<Self, DataError> {
        if self.labels.is_empty() {
            return Err(DataError::Degenerate("dataset is empty".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(DataError::Degenerate(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(self)
    }
}

/// Gaussian clusters with unit variance, one center per class drawn from
/// `separation * N(0, I)`. Class labels are assigned round-robin, so class
/// proportions are equal up to one example.
pub fn make_blobs(
    n: usize,
    class_count: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if class_count < 2 || dim == 0 {
        return Err(DataError::Degenerate(format!(
            "need at least 2 classes and 1 dimension, got {class_count} and {dim}"
        )));
    }
    if n < class_count {
        return Err(DataError::Degenerate(format!(
            "need n >= class_count, got n={n}, classes={class_count}"
        )));
    }
    if separation <= 0.0 {
        return Err(DataError::Degenerate(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut stream = rng::stream(seed, &[rng::fnv1a(b"blobs")]);
    let mut centers = vec![0.0f64; class_count * dim];
    for c in centers.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut stream);
        *c = separation * z;
    }
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count;
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut stream);
            values.push(centers[class * dim + d] + z);
        }
        labels.push(class);
    }
    Dataset {
        inputs: Tensor::from_vec(&[n, dim], values),
        labels,
        class_count,
    }
    .validate()
}

/// Synthetic digit images: seven-segment glyphs on a 14x14 canvas with a
/// random one-pixel jitter and additive Gaussian pixel noise, clamped to
/// [0, 1]. `noise` is the per-pixel noise standard deviation.
pub fn make_digits(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 10 {
        return Err(DataError::Degenerate(format!(
            "need at least 10 digit examples, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(DataError::Degenerate(format!(
            "noise must be in [0, 1], got {noise}"
        )));
    }
    const SIDE: usize = 14;
    // Segment bit order: top, top-left, top-right, middle,
    // bottom-left, bottom-right, bottom.
    const GLYPHS: [[bool; 7]; 10] = [
        [true, true, true, false, true, true, true],    // 0
        [false, false, true, false, false, true, false], // 1
        [true, false, true, true, true, false, true],   // 2
        [true, false, true, true, false, true, true],   // 3
        [false, true, true, true, false, true, false],  // 4
        [true, true, false, true, false, true, true],   // 5
        [true, true, false, true, true, true, true],    // 6
        [true, false, true, false, false, true, false], // 7
        [true, true, true, true, true, true, true],     // 8
        [true, true, true, true, false, true, true],    // 9
    ];
    let mut templates = vec![[0.0f64; SIDE * SIDE]; 10];
    for (digit, template) in templates.iter_mut().enumerate() {
        let seg = GLYPHS[digit];
        let mut put = |r: usize, c: usize| template[r * SIDE + c] = 1.0;
        if seg[0] {
            (4..10).for_each(|c| put(2, c));
        }
        if seg[1] {
            (2..8).for_each(|r| put(r, 4));
        }
        if seg[2] {
            (2..8).for_each(|r| put(r, 9));
        }
        if seg[3] {
            (4..10).for_each(|c| put(7, c));
        }
        if seg[4] {
            (7..13).for_each(|r| put(r, 4));
        }
        if seg[5] {
            (7..13).for_each(|r| put(r, 9));
        }
        if seg[6] {
            (4..10).for_each(|c| put(12, c));
        }
    }
    let mut stream = rng::stream(seed, &[rng::fnv1a(b"digits")]);
    let mut values = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let dy = stream.random_range(-1i64..=1);
        let dx = stream.random_range(-1i64..=1);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let sr = r as i64 - dy;
                let sc = c as i64 - dx;
                let base = if (0..SIDE as i64).contains(&sr) && (0..SIDE as i64).contains(&sc) {
                    templates[digit][sr as usize * SIDE + sc as usize]
                } else {
                    0.0
                };
                let z: f64 = StandardNormal.sample(&mut stream);
                values.push((base + noise * z).clamp(0.0, 1.0));
            }
        }
        labels.push(digit);
    }
    Dataset {
        inputs: Tensor::from_vec(&[n, 1, SIDE, SIDE], values),
        labels,
        class_count: 10,
    }
    .validate()
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(DataError::Truncated {
            path: path.to_string(),
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label file pair (big-endian extents; magic numbers
/// 0x00000803 and 0x00000801). Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();
    let ibytes = fs::read(images_path).map_err(|source| DataError::Io {
        path: ipath.clone(),
        source,
    })?;
    let lbytes = fs::read(labels_path).map_err(|source| DataError::Io {
        path: lpath.clone(),
        source,
    })?;

    let imagic = read_u32_be(&ibytes, 0, &ipath)?;
    if imagic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: ipath,
            got: imagic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let lmagic = read_u32_be(&lbytes, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lpath,
            got: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }

    let n_images = read_u32_be(&ibytes, 4, &ipath)? as usize;
    let rows = read_u32_be(&ibytes, 8, &ipath)? as usize;
    let cols = read_u32_be(&ibytes, 12, &ipath)? as usize;
    let n_labels = read_u32_be(&lbytes, 4, &lpath)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixel_count = n_images * rows * cols;
    if ibytes.len() < 16 + pixel_count {
        return Err(DataError::Truncated {
            path: ipath,
            offset: 16,
            needed: pixel_count,
            available: ibytes.len() - 16,
        });
    }
    if lbytes.len() < 8 + n_labels {
        return Err(DataError::Truncated {
            path: lpath,
            offset: 8,
            needed: n_labels,
            available: lbytes.len() - 8,
        });
    }

    let values: Vec<f64> = ibytes[16..16 + pixel_count]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lbytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset {
        inputs: Tensor::from_vec(&[n_images, 1, rows, cols], values),
        labels,
        class_count,
    }
    .validate()
}

/// Writes a dataset of rank-4 image inputs as an IDX file pair. Values are
/// rounded into u8 on a 0..=255 scale.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let shape = ds.inputs.shape();
    assert_eq!(shape.len(), 4, "write_idx expects (n, 1, h, w) inputs");
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut ibytes = Vec::with_capacity(16 + n * rows * cols);
    ibytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(n as u32).to_be_bytes());
    ibytes.extend_from_slice(&(rows as u32).to_be_bytes());
    ibytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.inputs.values() {
        ibytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lbytes = Vec::with_capacity(8 + n);
    lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lbytes.push(l as u8);
    }
    let write = |path: &Path, bytes: &[u8]| -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(images_path, &ibytes)?;
    write(labels_path, &lbytes)
}

/// Loads a CSV dataset with header row `label,feature_0,...`.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Malformed {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"label") {
        return Err(DataError::Malformed {
            path: pstr,
            line: 1,
            msg: format!("header must start with \"label\", got \"{header}\""),
        });
    }
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(DataError::Malformed {
            path: pstr,
            line: 1,
            msg: "no feature columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(DataError::Malformed {
                path: pstr,
                line: idx + 1,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| DataError::Malformed {
            path: pstr.clone(),
            line: idx + 1,
            msg: format!("bad label \"{}\"", fields[0]),
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| DataError::Malformed {
                path: pstr.clone(),
                line: idx + 1,
                msg: format!("bad feature value \"{f}\""),
            })?;
            values.push(v);
        }
    }
    let n = labels.len();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset {
        inputs: Tensor::from_vec(&[n, dim], values),
        labels,
        class_count,
    }
    .validate()
}

/// Stratified draw of `floor(fraction * n)` indices without replacement,
/// with largest-remainder rounding of per-class quotas. Returned indices are
/// in ascending (original) order.
fn stratified_draw(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>, DataError> {
    let n = ds.len();
    let total = (fraction * n as f64).floor() as usize;

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }

    let mut counts: Vec<usize> = Vec::with_capacity(ds.class_count);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(ds.class_count);
    let mut allocated = 0usize;
    for (class, members) in per_class.iter().enumerate() {
        let ideal = fraction * members.len() as f64;
        let base = ideal.floor() as usize;
        counts.push(base);
        allocated += base;
        remainders.push((class, ideal - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(class, _) in remainders.iter().take(total.saturating_sub(allocated)) {
        counts[class] += 1;
    }

    let mut stream = rng::stream(seed, &[rng::fnv1a(b"subsample")]);
    let mut keep: Vec<usize> = Vec::with_capacity(total);
    for (class, members) in per_class.iter().enumerate() {
        if counts[class] == 0 {
            return Err(DataError::EmptyClass { class });
        }
        let mut pool = members.clone();
        // Partial Fisher-Yates: the first counts[class] slots are the draw.
        for i in 0..counts[class] {
            let j = stream.random_range(i..pool.len());
            pool.swap(i, j);
        }
        keep.extend_from_slice(&pool[..counts[class]]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Draws `floor(fraction * n)` examples without replacement, stratified per
/// class with largest-remainder rounding; the surviving indices keep their
/// original order. `fraction == 1` is the identity.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::FractionOutOfRange(fraction));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let keep = stratified_draw(ds, fraction, seed)?;
    let (inputs, labels) = ds.batch(&keep);
    Dataset {
        inputs,
        labels,
        class_count: ds.class_count,
    }
    .validate()
}

/// One epoch's universal batches: a seeded permutation of `0..n` chunked
/// into `ceil(n / batch_size)` batches; the final batch may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }
}

/// Pure function of (n, batch_size, base_seed, epoch).
pub fn plan_epoch(
    n: usize,
    batch_size: usize,
    base_seed: u64,
    epoch: usize,
) -> Result<BatchPlan, DataError> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::BadBatchSize { size: batch_size, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = rng::stream(base_seed, &[rng::fnv1a(b"epoch-shuffle"), epoch as u64]);
    for i in (1..n).rev() {
        let j = stream.random_range(0..=i);
        order.swap(i, j);
    }
    let batches = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(BatchPlan { batches })
}

/// Per-channel (rank 4) or per-feature (rank 2) standardization statistics.
#[derive(Debug, Clone)]
pub struct Normalizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    per_channel: bool,
}

impl Normalizer {
    /// Statistics computed on the training split only. Zero-variance
    /// channels keep their values unscaled.
    pub fn fit(train: &Dataset) -> Normalizer {
        let shape = train.inputs.shape();
        let per_channel = shape.len() == 4;
        let features = shape[1];
        let stride = if per_channel { shape[2] * shape[3] } else { 1 };
        let n = shape[0];
        let count = (n * stride) as f64;
        let values = train.inputs.values();
        let mut mean = vec![0.0; features];
        let mut inv_std = vec![0.0; features];
        for f in 0..features {
            let mut sum = 0.0;
            for s in 0..n {
                let base = (s * features + f) * stride;
                for k in 0..stride {
                    sum += values[base + k];
                }
            }
            let m = sum / count;
            let mut sq = 0.0;
            for s in 0..n {
                let base = (s * features + f) * stride;
                for k in 0..stride {
                    let d = values[base + k] - m;
                    sq += d * d;
                }
            }
            let sd = (sq / count).sqrt();
            mean[f] = m;
            inv_std[f] = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        }
        Normalizer {
            mean,
            inv_std,
            per_channel,
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let shape = ds.inputs.shape().to_vec();
        let features = shape[1];
        let stride = if self.per_channel { shape[2] * shape[3] } else { 1 };
        let n = shape[0];
        let values = ds.inputs.values_mut();
        for s in 0..n {
            for f in 0..features {
                let base = (s * features + f) * stride;
                for k in 0..stride {
                    values[base + k] = (values[base + k] - self.mean[f]) * self.inv_std[f];
                }
            }
        }
    }
}

/// Splits a dataset into (train, val) with a stratified seeded draw of
/// `floor(val_fraction * n)` validation examples.
pub fn split_validation(
    ds: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::FractionOutOfRange(val_fraction));
    }
    let kept = stratified_draw(ds, val_fraction, seed)?;
    let mut in_val = vec![false; ds.len()];
    for &i in &kept {
        in_val[i] = true;
    }
    let (val_inputs, val_labels) = ds.batch(&kept);
    let val = Dataset {
        inputs: val_inputs,
        labels: val_labels,
        class_count: ds.class_count,
    }
    .validate()?;
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
    let (inputs, labels) = ds.batch(&train_idx);
    let train = Dataset {
        inputs,
        labels,
        class_count: ds.class_count,
    }
    .validate()?;
    Ok((train, val))
}
