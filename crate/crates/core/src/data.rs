//! Datasets, label noise, folds and epoch batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Batch, Matrix};
use crate::rng;
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Inputs scaled to `[0, 1]` for image sources, labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("dataset must hold at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.provenance.clone(),
        )
    }

    /// Batch holding rows `idx`, remembering their dataset indices.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            indices: idx.to_vec(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Reads an IDX image file (magic `0x00000803`) and its IDX label file
/// (magic `0x00000801`). Pixels are divided by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let features = rows * cols;
    let body = &img[16..];
    if body.len() != n * features {
        return Err(Error::format(
            images_path,
            format!("expected {} pixel bytes, found {}", n * features, body.len()),
        ));
    }

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() != n {
        return Err(Error::format(
            labels_path,
            format!("expected {n} label bytes, found {}", label_bytes.len()),
        ));
    }
    if let Some(&bad) = label_bytes.iter().find(|&&b| b >= 10) {
        return Err(Error::format(labels_path, format!("label byte {bad} >= 10")));
    }

    let inputs = Matrix::new(n, features, body.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(inputs, labels, 10, format!("mnist:{}", images_path.display()))
}

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 pixel bytes (R, G, B planes). Pixels are divided by 255.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::format(path, format!("label byte {} >= 10", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let inputs = Matrix::new(n, CIFAR_PIXELS, pixels)?;
    Dataset::new(inputs, labels, 10, format!("cifar10:{}", paths[0].display()))
}

/// Gaussian class blobs. Class `j` is centred on the unit vector `e_j` when
/// `features >= k`, otherwise on the unit circle of the first two coordinates
/// (or at `j` on a line for one feature). Classes are balanced to within one
/// sample and rows come out in shuffled order.
pub fn gen_synthetic_blobs(
    n: usize,
    features: usize,
    k: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || n < k {
        return Err(Error::Config(format!("need n >= k >= 2, got n={n}, k={k}")));
    }
    if features == 0 {
        return Err(Error::Config("need at least one feature".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }
    let center = |j: usize, f: usize| -> f64 {
        if features >= k {
            if f == j {
                1.0
            } else {
                0.0
            }
        } else if features == 1 {
            j as f64
        } else {
            let angle = std::f64::consts::TAU * j as f64 / k as f64;
            match f {
                0 => angle.cos(),
                1 => angle.sin(),
                _ => 0.0,
            }
        }
    };

    let mut rng = rng::stream(seed, rng::tags::DATA);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * features);
    for &y in &labels {
        for f in 0..features {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(center(y, f) + spread * z);
        }
    }
    let inputs = Matrix::new(n, features, data)?;
    Dataset::new(
        inputs,
        labels,
        k,
        format!("blobs:n={n},features={features},k={k},spread={spread},seed={seed}"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Picks `round(fraction * n)` samples uniformly without replacement and
/// redraws each of their labels uniformly over all `k` classes, so a redrawn
/// label may coincide with the original.
pub fn inject_label_noise(ds: &Dataset, spec: NoiseSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::Config(format!(
            "noise fraction must be in [0,1], got {}",
            spec.fraction
        )));
    }
    let n = ds.len();
    let count = (spec.fraction * n as f64).round() as usize;
    let mut out = ds.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = rng::stream(spec.seed, rng::tags::NOISE);
    let chosen = index::sample(&mut rng, n, count);
    for i in chosen.iter() {
        out.labels[i] = rng.random_range(0..ds.classes);
    }
    out.provenance = format!("{}+noise={}", ds.provenance, spec.fraction);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    /// Indices held out in `fold`, ascending.
    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    /// Indices trained on when `fold` is held out, ascending.
    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles `0..n` by seed and deals the permutation round-robin into `k`
/// folds, so fold sizes differ by at most one.
pub fn kfold_assign(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::tags::FOLDS));
    let mut assignment = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldAssignment { k, assignment })
}

/// The permutation used for `epoch`, derived from `(seed, epoch)` only.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(rng::derive(seed, rng::tags::BATCHES), epoch as u64));
    perm
}

/// Disjoint batches covering every sample once; the last one may be short.
pub fn epoch_batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let perm = epoch_permutation(ds.len(), seed, epoch);
    Ok(perm.chunks(batch_size).map(|idx| ds.batch(idx)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend_from_slice(&28u32.to_be_bytes());
        v.extend_from_slice(&28u32.to_be_bytes());
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&magic.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn mnist_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * 784).map(|i| (i % 256) as u8).collect();
        let img = write(dir.path(), "img", &idx_images(4, &pixels));
        let lab = write(dir.path(), "lab", &idx_labels(IDX_LABELS_MAGIC, &[3, 1, 4, 1]));
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.features(), ds.classes), (4, 784, 10));
        assert_eq!(ds.labels, vec![3, 1, 4, 1]);
        assert_eq!(ds.inputs.get(0, 255), 1.0);
        assert_eq!(ds.inputs.get(1, 0), (784 % 256) as f64 / 255.0);
    }

    #[test]
    fn mnist_all_zero_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(2, &[0; 2 * 784]));
        let lab = write(dir.path(), "lab", &idx_labels(IDX_LABELS_MAGIC, &[0, 9]));
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert!(ds.inputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnist_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_images(1, &[0; 784]));
        let wrong_magic = write(dir.path(), "lab", &idx_labels(IDX_IMAGES_MAGIC, &[0]));
        assert!(matches!(
            load_mnist_idx(&img, &wrong_magic),
            Err(Error::Format { .. })
        ));
        let lab2 = write(dir.path(), "lab2", &idx_labels(IDX_LABELS_MAGIC, &[0, 1]));
        assert!(matches!(load_mnist_idx(&img, &lab2), Err(Error::Format { .. })));
        let short = write(dir.path(), "short", &idx_images(2, &[0; 784]));
        let lab1 = write(dir.path(), "lab1", &idx_labels(IDX_LABELS_MAGIC, &[0]));
        assert!(matches!(load_mnist_idx(&short, &lab1), Err(Error::Format { .. })));
        let stub = write(dir.path(), "stub", &[0, 0, 8]);
        assert!(matches!(load_mnist_idx(&stub, &lab1), Err(Error::Format { .. })));
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &lab1),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn cifar_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        bytes.push(2);
        bytes.extend((0..CIFAR_PIXELS).map(|i| (i / 1024) as u8));
        let p = write(dir.path(), "data_batch_1.bin", &bytes);
        let ds = load_cifar10_bin(&[p]).unwrap();
        assert_eq!((ds.len(), ds.features()), (2, 3072));
        assert_eq!(ds.labels, vec![7, 2]);
        assert!(ds.inputs.row(0).iter().all(|&v| v == 1.0));
        // R, G, B planes of 1024 bytes each
        assert_eq!(ds.inputs.get(1, 1023), 0.0);
        assert_eq!(ds.inputs.get(1, 1024), 1.0 / 255.0);
        assert_eq!(ds.inputs.get(1, 3071), 2.0 / 255.0);
    }

    #[test]
    fn cifar_rejects_bad_length_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a", &[0u8; CIFAR_PIXELS]);
        assert!(matches!(load_cifar10_bin(&[p]), Err(Error::Format { .. })));
        let mut rec = vec![255u8];
        rec.extend(std::iter::repeat_n(0u8, CIFAR_PIXELS));
        let p = write(dir.path(), "b", &rec);
        assert!(matches!(load_cifar10_bin(&[p]), Err(Error::Format { .. })));
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let ds = gen_synthetic_blobs(100, 6, 4, 0.3, 9).unwrap();
        assert_eq!(ds.class_counts(), vec![25, 25, 25, 25]);
        assert_eq!(ds, gen_synthetic_blobs(100, 6, 4, 0.3, 9).unwrap());
        assert_ne!(ds, gen_synthetic_blobs(100, 6, 4, 0.3, 10).unwrap());
        let odd = gen_synthetic_blobs(11, 2, 3, 0.3, 9).unwrap();
        assert_eq!(odd.class_counts(), vec![4, 4, 3]);
    }

    #[test]
    fn blobs_without_spread_sit_on_centres() {
        let ds = gen_synthetic_blobs(12, 5, 3, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let y = ds.labels[i];
            for f in 0..5 {
                assert_eq!(ds.inputs.get(i, f), if f == y { 1.0 } else { 0.0 });
            }
        }
        let circle = gen_synthetic_blobs(8, 2, 4, 0.0, 1).unwrap();
        for i in 0..circle.len() {
            let r = circle.inputs.row(i);
            assert!((r[0].hypot(r[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blobs_reject_invalid_counts() {
        assert!(gen_synthetic_blobs(1, 2, 2, 0.1, 0).is_err());
        assert!(gen_synthetic_blobs(10, 2, 1, 0.1, 0).is_err());
        assert!(gen_synthetic_blobs(10, 0, 2, 0.1, 0).is_err());
        assert!(gen_synthetic_blobs(10, 2, 2, -1.0, 0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = gen_synthetic_blobs(50, 3, 5, 0.2, 0).unwrap();
        let same = inject_label_noise(&ds, NoiseSpec { fraction: 0.0, seed: 3 }).unwrap();
        assert_eq!(same.labels, ds.labels);
        assert_eq!(same.inputs, ds.inputs);
    }

    #[test]
    fn noise_changes_at_most_round_fn_labels() {
        let ds = gen_synthetic_blobs(333, 2, 10, 0.2, 0).unwrap();
        for f in [0.1, 0.25, 0.5, 1.0] {
            let noisy = inject_label_noise(&ds, NoiseSpec { fraction: f, seed: 4 }).unwrap();
            let changed = ds.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
            assert!(changed <= (f * 333.0).round() as usize);
            assert_eq!(noisy.inputs, ds.inputs);
        }
        assert!(inject_label_noise(&ds, NoiseSpec { fraction: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn quarter_noise_keeps_expected_fraction_correct() {
        // (1 - f) + f/k with f = 0.25, k = 10
        let expected = 0.75 + 0.25 / 10.0;
        assert!((expected - 0.775f64).abs() < 1e-15);
        let ds = gen_synthetic_blobs(20_000, 1, 10, 0.0, 0).unwrap();
        let noisy = inject_label_noise(&ds, NoiseSpec { fraction: 0.25, seed: 8 }).unwrap();
        let agree = ds.labels.iter().zip(&noisy.labels).filter(|(a, b)| a == b).count();
        let frac = agree as f64 / 20_000.0;
        assert!((frac - expected).abs() < 0.01, "{frac}");
    }

    #[test]
    fn full_noise_on_two_classes_agrees_half_the_time() {
        let ds = gen_synthetic_blobs(10_000, 1, 2, 0.0, 0).unwrap();
        let noisy = inject_label_noise(&ds, NoiseSpec { fraction: 1.0, seed: 5 }).unwrap();
        let agree = ds.labels.iter().zip(&noisy.labels).filter(|(a, b)| a == b).count();
        let frac = agree as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn kfold_sizes_and_errors() {
        let f = kfold_assign(10, 5, 0).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        let mut all: Vec<usize> = (0..5).flat_map(|i| f.validation_indices(i)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut sizes = kfold_assign(10, 3, 0).unwrap().fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert!(kfold_assign(10, 1, 0).is_err());
        assert!(kfold_assign(3, 4, 0).is_err());
        assert_eq!(kfold_assign(30, 4, 2).unwrap(), kfold_assign(30, 4, 2).unwrap());
    }

    #[test]
    fn epoch_batches_shape_and_determinism() {
        let ds = gen_synthetic_blobs(10, 2, 2, 0.1, 0).unwrap();
        let batches = epoch_batches(&ds, 3, 1, 0).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(&ds, 3, 1, 0).unwrap());
        assert_ne!(
            epoch_permutation(100, 1, 0),
            epoch_permutation(100, 1, 1)
        );
        for b in &batches {
            for (r, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.labels[r], ds.labels[i]);
                assert_eq!(b.inputs.row(r), ds.inputs.row(i));
            }
        }
        assert!(epoch_batches(&ds, 0, 1, 0).is_err());
    }
}
