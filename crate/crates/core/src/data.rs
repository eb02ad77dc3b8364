//! Datasets: synthetic Gaussian clusters, IDX image files, and non-IID
//! partitioning across clients.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Per-feature population standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        column_std(&self.features)
    }
}

pub(crate) fn column_std(m: &Array2<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return vec![0.0; m.ncols()];
    }
    m.std_axis(Axis(0), 0.0).to_vec()
}

/// Parameters of the Gaussian-cluster benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of each isotropic cluster.
    pub spread: f64,
    /// Distance of every class mean from the origin.
    pub separation: f64,
}

/// Class means: scaled simplex vertices `separation * e_c` when
/// `dim >= classes`, otherwise seeded random unit directions.
pub fn class_means(spec: &SyntheticSpec, seed: u64) -> Array2<f64> {
    let mut means = Array2::zeros((spec.classes, spec.dim));
    if spec.dim >= spec.classes {
        for c in 0..spec.classes {
            means[[c, c]] = spec.separation;
        }
    } else {
        let mut rng = stream_rng(seed, Stream::Dataset, u64::MAX, 0);
        for mut row in means.rows_mut() {
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt().max(1e-12);
            row *= spec.separation / norm;
        }
    }
    means
}

/// Samples `per_class` points around each class mean. `draw` selects an
/// independent stream so train and test sets never share noise.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64, draw: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config("classes", "need at least two classes"));
    }
    if spec.dim == 0 {
        return Err(Error::config("dim", "must be positive"));
    }
    if !(spec.spread >= 0.0) {
        return Err(Error::config("spread", "must be non-negative"));
    }
    let means = class_means(spec, seed);
    let n = spec.classes * spec.per_class;
    let mut rng = stream_rng(seed, Stream::Dataset, draw, 1);
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        for j in 0..spec.dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = means[[c, j]] + spec.spread * noise;
        }
    }
    Dataset::new(features, labels, spec.classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("truncated while reading {what}"),
        })
}

/// Parsed IDX image file: `count × rows × cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: (16 + body.len()) as u64,
            message: format!("truncated pixel data: expected {need} bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            offset: (8 + body.len()) as u64,
            message: format!("truncated labels: expected {count} bytes, found {}", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

/// Area-average pooling of one row-major image to `out_rows × out_cols`.
pub fn average_pool(
    image: &[f64],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f64> {
    let mut sums = vec![0.0; out_rows * out_cols];
    let mut counts = vec![0usize; out_rows * out_cols];
    for r in 0..rows {
        let orow = r * out_rows / rows;
        for c in 0..cols {
            let ocol = c * out_cols / cols;
            sums[orow * out_cols + ocol] += image[r * cols + c];
            counts[orow * out_cols + ocol] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

/// Converts parsed IDX data into a dataset with pixels scaled to `[0, 1]`,
/// optionally pooled down to `side × side`.
pub fn idx_to_dataset(images: &IdxImages, labels: &[u8], downsample: Option<usize>) -> Result<Dataset> {
    if images.count() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{} images but {} labels",
                images.count(),
                labels.len()
            ),
        });
    }
    let per = images.rows * images.cols;
    let dim = downsample.map(|s| s * s).unwrap_or(per);
    let mut features = Array2::zeros((labels.len(), dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let px: Vec<f64> = images.pixels[i * per..(i + 1) * per]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let px = match downsample {
            Some(side) => average_pool(&px, images.rows, images.cols, side, side),
            None => px,
        };
        row.assign(&Array1::from(px));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(features, labels.iter().map(|&l| l as usize).collect(), classes)
}

pub fn load_idx(images: &Path, labels: &Path, downsample: Option<usize>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    idx_to_dataset(&images, &labels, downsample)
}

/// Splits sample indices among `clients`. Client `i` draws a fraction `q`
/// of its share from its dominant class `i mod C`; the rest is dealt
/// uniformly from what remains. `q = 0` is an IID shuffle.
pub fn partition(labels: &[usize], classes: usize, clients: usize, q: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config("non_iid_q", format!("must be in [0, 1], got {q}")));
    }
    if clients == 0 || clients > labels.len() {
        return Err(Error::Partition(format!(
            "cannot split {} samples among {clients} clients",
            labels.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, 0, 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let base = labels.len() / clients;
    let extra = labels.len() % clients;
    let sizes: Vec<usize> = (0..clients).map(|i| base + usize::from(i < extra)).collect();
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (i, part) in parts.iter_mut().enumerate() {
        let want = (q * sizes[i] as f64).round() as usize;
        let pool = &mut by_class[i % classes];
        if pool.len() < want {
            return Err(Error::Partition(format!(
                "client {i} needs {want} samples of class {} but only {} remain",
                i % classes,
                pool.len()
            )));
        }
        part.extend(pool.drain(pool.len() - want..));
    }
    let mut rest: Vec<usize> = by_class.into_iter().flatten().collect();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let mut rest = rest.into_iter();
    for (i, part) in parts.iter_mut().enumerate() {
        let missing = sizes[i] - part.len();
        part.extend(rest.by_ref().take(missing));
        part.sort_unstable();
    }
    Ok(parts)
}
