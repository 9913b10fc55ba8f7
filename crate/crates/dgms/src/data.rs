//! Dataset ingestion: the CIFAR-10 binary format (subsetted and
//! standardized), a synthetic blob generator for fast property tests, and a
//! synthetic image generator that writes files in the same binary layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Per-channel standardization constants, declared by the caller (config)
/// rather than computed from the data so runs stay byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CifarNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for CifarNorm {
    fn default() -> Self {
        CifarNorm {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

/// Immutable labeled dataset with a fixed example shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    data: Vec<f64>,
    example_shape: Vec<usize>,
    labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        data: Vec<f64>,
        example_shape: Vec<usize>,
        labels: Vec<usize>,
        classes: usize,
        split: &str,
        provenance: &str,
    ) -> Result<Self> {
        let per: usize = example_shape.iter().product();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "dataset: {} values do not form {} examples of shape {:?}",
                data.len(),
                labels.len(),
                example_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "dataset: label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            data,
            example_shape,
            labels,
            classes,
            split: split.to_string(),
            provenance: provenance.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let per: usize = self.example_shape.iter().product();
        &self.data[i * per..(i + 1) * per]
    }

    /// Gather the given examples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.example_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.example_shape);
        (Tensor::from_vec(&shape, data).unwrap(), labels)
    }
}

/// Isotropic Gaussian clusters at scaled standard-basis vertices (a regular
/// simplex); linearly separable for small spreads.
pub fn synth_blobs(classes: usize, n: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs: need at least 2 classes, got {classes}")));
    }
    if spread < 0.0 || !spread.is_finite() {
        return Err(Error::Config(format!("blobs: invalid spread {spread}")));
    }
    let dim = classes.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            let center = if d == class { 1.0 } else { 0.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(center + spread * noise);
        }
        labels.push(class);
    }
    Dataset::new(
        data,
        vec![dim],
        labels,
        classes,
        "blobs",
        &format!("blobs(classes={classes},n={n},spread={spread},seed={seed})"),
    )
}

fn decode_records(
    raw: &[u8],
    file: &str,
    norm: &CifarNorm,
    out_data: &mut Vec<f64>,
    out_labels: &mut Vec<usize>,
) -> Result<usize> {
    if raw.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "{file}: truncated at byte offset {} ({} bytes is not a multiple of {CIFAR_RECORD_BYTES})",
            raw.len() - raw.len() % CIFAR_RECORD_BYTES,
            raw.len()
        )));
    }
    let records = raw.len() / CIFAR_RECORD_BYTES;
    out_data.reserve(records * CIFAR_PIXELS);
    out_labels.reserve(records);
    for r in 0..records {
        let off = r * CIFAR_RECORD_BYTES;
        let label = raw[off] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "{file}: label {label} out of range at byte offset {off}"
            )));
        }
        out_labels.push(label);
        // Channel planes in R,G,B order, each 32x32 row-major.
        for c in 0..3 {
            let plane = &raw[off + 1 + c * 1024..off + 1 + (c + 1) * 1024];
            for &b in plane {
                let v = b as f64 / 255.0;
                out_data.push((v - norm.mean[c]) / norm.std[c]);
            }
        }
    }
    Ok(records)
}

/// Load a deterministic subset from a directory in the CIFAR-10 binary
/// layout (records of 3073 bytes: label byte + R,G,B planes). Training
/// records come from `data_batch_*.bin`, test records from
/// `test_batch.bin`. `train_n`/`test_n` of 0 keep the split empty.
pub fn load_cifar10_binary(
    dir: &Path,
    train_n: usize,
    test_n: usize,
    seed: u64,
    norm: &CifarNorm,
) -> Result<(Dataset, Dataset)> {
    let mut train_files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Data(format!(
            "{}: no data_batch_*.bin files found",
            dir.display()
        )));
    }

    let mut train_data = Vec::new();
    let mut train_labels = Vec::new();
    for f in &train_files {
        let raw = fs::read(f)?;
        decode_records(&raw, &f.display().to_string(), norm, &mut train_data, &mut train_labels)?;
    }

    let test_path = dir.join("test_batch.bin");
    let mut test_data = Vec::new();
    let mut test_labels = Vec::new();
    if test_path.exists() {
        let raw = fs::read(&test_path)?;
        decode_records(&raw, &test_path.display().to_string(), norm, &mut test_data, &mut test_labels)?;
    } else if test_n > 0 {
        return Err(Error::Data(format!("{}: missing test_batch.bin", test_path.display())));
    }

    let subsample = |data: &[f64], labels: &[usize], n: usize, stream: u64| -> (Vec<f64>, Vec<usize>) {
        let total = labels.len();
        let take = n.min(total);
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        // Fisher-Yates
        for i in (1..total).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut d = Vec::with_capacity(take * CIFAR_PIXELS);
        let mut l = Vec::with_capacity(take);
        for &idx in order.iter().take(take) {
            d.extend_from_slice(&data[idx * CIFAR_PIXELS..(idx + 1) * CIFAR_PIXELS]);
            l.push(labels[idx]);
        }
        (d, l)
    };

    let (td, tl) = subsample(&train_data, &train_labels, train_n, 0x7261696e);
    let (vd, vl) = subsample(&test_data, &test_labels, test_n, 0x74657374);
    let prov = format!("cifar10({},train_n={train_n},test_n={test_n},seed={seed})", dir.display());
    let train = Dataset::new(td, vec![3, 32, 32], tl, CIFAR_CLASSES, "train", &prov)?;
    let test = Dataset::new(vd, vec![3, 32, 32], vl, CIFAR_CLASSES, "test", &prov)?;
    Ok((train, test))
}

/// Write a synthetic 10-class image dataset in the CIFAR-10 binary layout:
/// `data_batch_1.bin` with `train_n` records and `test_batch.bin` with
/// `test_n` records. Each class is a sinusoidal grating at a class-specific
/// orientation; the phase is random per image, so classification requires
/// translation-invariant orientation-selective features rather than pixel
/// lookups. Pixel noise keeps accuracy off the ceiling.
pub fn write_synthetic_cifar(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let render = |path: &Path, n: usize, stream: u64| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let mut buf = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
        for i in 0..n {
            let class = i % CIFAR_CLASSES;
            buf.push(class as u8);
            // Orientations cover a half-turn; frequency splits near-opposite
            // orientations into distinct classes.
            let theta = std::f64::consts::PI * class as f64 / CIFAR_CLASSES as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let freq = 2.0 + (class % 2) as f64;
            let phase_img: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let amp: f64 = rng.random_range(18.0..30.0);
            for c in 0..3 {
                let phase = phase_img + c as f64 * std::f64::consts::FRAC_PI_3;
                for h in 0..32 {
                    for w in 0..32 {
                        let u = (h as f64 * ct + w as f64 * st) / 32.0;
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        let v = 128.0
                            + amp * (freq * u * 2.0 * std::f64::consts::PI + phase).sin()
                            + 95.0 * noise;
                        buf.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    };
    render(&dir.join("data_batch_1.bin"), train_n, 0x01)?;
    render(&dir.join("test_batch.bin"), test_n, 0x02)?;
    Ok(())
}
