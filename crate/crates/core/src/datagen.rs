//! Dataset generation and ingestion: gaussian blob clusters, concentric
//! rings, IDX-format files, and CSV import/export.
//!
//! Blobs are the linearly separable training workhorse; rings give a
//! transfer target that no linear classifier handles well. Both live in
//! [0,1]^d so the alteration clipping conventions apply unchanged.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x d, every entry in [0,1].
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.rank() != 2 || self.inputs.shape()[0] != self.labels.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "inputs {:?} vs {} labels",
                    self.inputs.shape(),
                    self.labels.len()
                ),
            ));
        }
        if self.labels.is_empty() {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if let Some(bad) = self
            .inputs
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidData(format!(
                "input value {bad} outside [0,1]"
            )));
        }
        Ok(())
    }
}

/// Gaussian clusters: one center per class drawn uniformly in [0.2, 0.8]^d,
/// points clipped to [0,1]. Class-major row order, exactly balanced.
pub fn gen_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if n_per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "n_per_class and dim must be positive".into(),
        ));
    }
    if spread < 0.0 {
        return Err(Error::InvalidArgument("spread must be nonnegative".into()));
    }
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, 1]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| stream.gen_range(0.2..0.8)).collect())
        .collect();
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut stream);
                data.push((m + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        inputs: Tensor::from_parts(vec![labels.len(), dim], data),
        labels,
        split: Split::Train,
    })
}

/// Concentric shells in the first two dimensions around (0.5, 0.5), class
/// c at radius 0.15(c+1) with gaussian radial jitter; remaining dimensions
/// are pure noise around 0.5. Everything clipped to [0,1].
pub fn gen_rings(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if n_per_class == 0 || dim < 2 {
        return Err(Error::InvalidArgument(
            "need n_per_class > 0 and dim >= 2".into(),
        ));
    }
    if noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be nonnegative".into()));
    }
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, 2]);
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        let radius = 0.15 * (c + 1) as f64;
        for _ in 0..n_per_class {
            let angle = stream.gen_range(0.0..std::f64::consts::TAU);
            let jitter: f64 = StandardNormal.sample(&mut stream);
            let r = radius + noise * jitter;
            data.push((0.5 + r * angle.cos()).clamp(0.0, 1.0));
            data.push((0.5 + r * angle.sin()).clamp(0.0, 1.0));
            for _ in 2..dim {
                let z: f64 = StandardNormal.sample(&mut stream);
                data.push((0.5 + noise * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        inputs: Tensor::from_parts(vec![labels.len(), dim], data),
        labels,
        split: Split::Train,
    })
}

/// MNIST-style IDX pair: big-endian headers, u8 pixels scaled by 1/255,
/// images flattened row-major, labels paired by index.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ifmt = |d: String| Error::format(images_path.display().to_string(), d);
    let lfmt = |d: String| Error::format(labels_path.display().to_string(), d);

    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = ir
        .read_u32::<BigEndian>()
        .map_err(|_| ifmt("truncated before magic".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ifmt(format!(
            "bad images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = ir
        .read_u32::<BigEndian>()
        .map_err(|_| ifmt("truncated header".into()))? as usize;
    let rows = ir
        .read_u32::<BigEndian>()
        .map_err(|_| ifmt("truncated header".into()))? as usize;
    let cols = ir
        .read_u32::<BigEndian>()
        .map_err(|_| ifmt("truncated header".into()))? as usize;
    let pixel_count = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| ifmt("image dimensions overflow".into()))?;
    let mut pixels = vec![0u8; pixel_count];
    ir.read_exact(&mut pixels)
        .map_err(|_| ifmt("truncated pixel data".into()))?;
    if ir.read(&mut [0u8; 1])? != 0 {
        return Err(ifmt("trailing bytes after pixel data".into()));
    }

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = lr
        .read_u32::<BigEndian>()
        .map_err(|_| lfmt("truncated before magic".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lfmt(format!(
            "bad labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = lr
        .read_u32::<BigEndian>()
        .map_err(|_| lfmt("truncated header".into()))? as usize;
    if ln != n {
        return Err(lfmt(format!("{ln} labels for {n} images")));
    }
    let mut raw = vec![0u8; ln];
    lr.read_exact(&mut raw)
        .map_err(|_| lfmt("truncated label data".into()))?;
    if lr.read(&mut [0u8; 1])? != 0 {
        return Err(lfmt("trailing bytes after label data".into()));
    }

    let inputs = Tensor::from_parts(
        vec![n, rows * cols],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    );
    Ok(Dataset {
        inputs,
        labels: raw.into_iter().map(|b| b as usize).collect(),
        split: Split::Train,
    })
}

/// Header `f0,...,f{d-1},label`, one row per sample, floats printed in
/// shortest round-trip form so a write/read cycle is value-exact.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let d = dataset.dim();
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for (r, &label) in dataset.labels.iter().enumerate() {
        let row: Vec<String> = dataset
            .inputs
            .row(r)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(w, "{},{label}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let fmt = |line: usize, d: String| {
        Error::format(path.display().to_string(), format!("line {line}: {d}"))
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| fmt(1, "empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"label") || cols.len() < 2 {
        return Err(fmt(
            1,
            "expected feature columns then a label column".into(),
        ));
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(fmt(
                lineno,
                format!("expected {} fields, got {}", d + 1, fields.len()),
            ));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| fmt(lineno, format!("bad float {f:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(fmt(lineno, format!("feature {v} outside [0,1]")));
            }
            data.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| fmt(lineno, format!("bad label {:?}", fields[d])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(fmt(2, "no data rows".into()));
    }
    Ok(Dataset {
        inputs: Tensor::from_parts(vec![labels.len(), d], data),
        labels,
        split: Split::Train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_zero_spread_collapses_to_centers() {
        let ds = gen_blobs(5, 2, 3, 0.0, 11).unwrap();
        for c in 0..2 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.inputs.row(i))
                .collect();
            assert_eq!(rows.len(), 5);
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
        }
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gen_blobs(7, 3, 4, 0.05, 3).unwrap();
        let b = gen_blobs(7, 3, 4, 0.05, 3).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 7);
        }
        a.validate().unwrap();
    }

    #[test]
    fn rings_hit_exact_radii_without_noise() {
        let ds = gen_rings(20, 2, 4, 0.0, 5).unwrap();
        for i in 0..ds.len() {
            let row = ds.inputs.row(i);
            let r = ((row[0] - 0.5).powi(2) + (row[1] - 0.5).powi(2)).sqrt();
            let expect = 0.15 * (ds.labels[i] + 1) as f64;
            assert!((r - expect).abs() < 1e-12, "{r} vs {expect}");
            assert_eq!(row[2], 0.5);
            assert_eq!(row[3], 0.5);
        }
    }

    #[test]
    fn rings_are_deterministic() {
        let a = gen_rings(5, 3, 6, 0.01, 9).unwrap();
        let b = gen_rings(5, 3, 6, 0.01, 9).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        a.validate().unwrap();
    }

    #[test]
    fn csv_round_trip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_blobs(4, 2, 3, 0.05, 17).unwrap();
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(ds.inputs.data(), back.inputs.data());
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn csv_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,0.5,0\n0.5,oops,1\n").unwrap();
        let err = read_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    fn write_idx_pair(
        dir: &Path,
        pixels: &[u8],
        labels: &[u8],
        rows: u32,
        cols: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        use byteorder::WriteBytesExt;
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        let mut iw = Vec::new();
        iw.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        iw.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        iw.write_u32::<BigEndian>(rows).unwrap();
        iw.write_u32::<BigEndian>(cols).unwrap();
        iw.extend_from_slice(pixels);
        std::fs::write(&ip, iw).unwrap();
        let mut lw = Vec::new();
        lw.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lw.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        lw.extend_from_slice(labels);
        std::fs::write(&lp, lw).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_scales_pixels_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0, 255, 128, 64], &[3, 1], 2, 1);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 2]);
        assert_eq!(ds.inputs.data()[0], 0.0);
        assert_eq!(ds.inputs.data()[1], 1.0);
        assert_eq!(ds.labels, vec![3, 1]);
    }

    #[test]
    fn idx_count_mismatch_is_an_error() {
        use byteorder::WriteBytesExt;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0, 0], &[1, 0], 1, 1);
        // rewrite labels with a different count
        let mut lw = Vec::new();
        lw.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lw.write_u32::<BigEndian>(3).unwrap();
        lw.extend_from_slice(&[1, 0, 1]);
        std::fs::write(&lp, lw).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("labels for"), "{err}");
    }

    #[test]
    fn idx_bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0], &[0, 0], 1, 1);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn idx_truncation_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0, 1, 2, 3], &[0, 1], 2, 1);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn blobs_are_nearest_neighbor_separable() {
        let data = gen_blobs(50, 4, 16, 0.05, 11).unwrap();
        let (train, test) = crate::downstream::split_dataset(&data, 0.8, 3).unwrap();
        let acc = crate::downstream::knn1_accuracy(
            &train.inputs,
            &train.labels,
            &test.inputs,
            &test.labels,
        )
        .unwrap();
        assert!(acc > 0.99, "accuracy {acc}");
    }

    // least-squares one-vs-all classifier, fit and scored on the full set
    fn linear_classifier_accuracy(data: &Dataset) -> f64 {
        let n = data.len();
        let d = data.dim();
        let c = data.num_classes();
        let cols = d + 1;
        let feat = |i: usize, k: usize| {
            if k < d {
                data.inputs.row(i)[k]
            } else {
                1.0
            }
        };
        // normal equations A^T A W = A^T Y with a tiny ridge
        let mut ata = vec![0.0f64; cols * cols];
        let mut aty = vec![0.0f64; cols * c];
        for i in 0..n {
            for r in 0..cols {
                for s in 0..cols {
                    ata[r * cols + s] += feat(i, r) * feat(i, s);
                }
                aty[r * c + data.labels[i]] += feat(i, r);
            }
        }
        for r in 0..cols {
            ata[r * cols + r] += 1e-8;
        }
        // Gaussian elimination with partial pivoting, one rhs per class
        let mut w = aty;
        for col in 0..cols {
            let pivot = (col..cols)
                .max_by(|&a, &b| {
                    ata[a * cols + col]
                        .abs()
                        .total_cmp(&ata[b * cols + col].abs())
                })
                .unwrap();
            for k in 0..cols {
                ata.swap(col * cols + k, pivot * cols + k);
            }
            for k in 0..c {
                w.swap(col * c + k, pivot * c + k);
            }
            let diag = ata[col * cols + col];
            for row in 0..cols {
                if row == col {
                    continue;
                }
                let factor = ata[row * cols + col] / diag;
                for k in 0..cols {
                    ata[row * cols + k] -= factor * ata[col * cols + k];
                }
                for k in 0..c {
                    w[row * c + k] -= factor * w[col * c + k];
                }
            }
        }
        for r in 0..cols {
            let diag = ata[r * cols + r];
            for k in 0..c {
                w[r * c + k] /= diag;
            }
        }
        let mut correct = 0usize;
        for i in 0..n {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..c {
                let score: f64 = (0..cols).map(|r| feat(i, r) * w[r * c + k]).sum();
                if score > best_score {
                    best_score = score;
                    best = k;
                }
            }
            if best == data.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }

    #[test]
    fn rings_defeat_a_linear_classifier_but_not_nearest_neighbor() {
        let data = gen_rings(100, 2, 4, 0.01, 7).unwrap();
        let linear = linear_classifier_accuracy(&data);
        assert!(linear < 0.8, "linear accuracy {linear}");
        let (train, test) = crate::downstream::split_dataset(&data, 0.8, 5).unwrap();
        let nn = crate::downstream::knn1_accuracy(
            &train.inputs,
            &train.labels,
            &test.inputs,
            &test.labels,
        )
        .unwrap();
        assert!(nn > 0.95, "1-NN accuracy {nn}");
    }
}
