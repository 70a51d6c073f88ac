//! Datasets: MNIST IDX files, PPM image regression, synthetic Gaussian blobs.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Target;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// `N × d` feature table with one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    targets: Vec<Target>,
    split: Split,
    num_classes: Option<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, targets: Vec<Target>, split: Split) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::contract("a dataset needs at least one sample"));
        }
        if dim == 0 || features.len() != dim * targets.len() {
            return Err(Error::contract(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("dataset features must be finite"));
        }
        let num_classes = match &targets[0] {
            Target::Class(_) => {
                let mut max = 0;
                for t in &targets {
                    match t {
                        Target::Class(c) => max = max.max(*c),
                        Target::Value(_) => return Err(Error::contract("mixed target kinds")),
                    }
                }
                Some(max + 1)
            }
            Target::Value(first) => {
                for t in &targets {
                    match t {
                        Target::Value(v) if v.len() == first.len() && v.iter().all(|x| x.is_finite()) => {}
                        _ => return Err(Error::contract("regression targets must be finite and equal length")),
                    }
                }
                None
            }
        };
        Ok(Self {
            features,
            dim,
            targets,
            split,
            num_classes,
        })
    }

    /// Overrides the inferred class count (e.g. a subset missing the top class).
    pub fn with_num_classes(mut self, k: usize) -> Result<Self> {
        match self.num_classes {
            Some(inferred) if inferred <= k => {
                self.num_classes = Some(k);
                Ok(self)
            }
            _ => Err(Error::contract(format!("cannot declare {k} classes for this dataset"))),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> &Target {
        &self.targets[i]
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Output width a model needs for this dataset.
    pub fn output_dim(&self) -> usize {
        match (&self.targets[0], self.num_classes) {
            (_, Some(k)) => k,
            (Target::Value(v), None) => v.len(),
            _ => unreachable!(),
        }
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self.targets[i] {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature(i));
            targets.push(self.targets[i].clone());
        }
        let mut out = Dataset::new(features, self.dim, targets, self.split)?;
        if let (Some(k), Some(_)) = (self.num_classes, out.num_classes) {
            out.num_classes = Some(k);
        }
        Ok(out)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset as u64, "file truncated inside the header"))
}

/// Parses an IDX image file. Returns `(count, rows, cols, pixels)`.
fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated: {need} pixel bytes declared, {} present", body.len()),
        ));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated: {n} labels declared, {} present", body.len()),
        ));
    }
    Ok(body[..n].to_vec())
}

/// Loads an MNIST-style IDX image/label pair; pixels are scaled by `1/255`.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes, images)?;
    let lab = parse_idx_labels(&label_bytes, labels)?;
    if lab.len() != n {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {n} images", lab.len()),
        ));
    }
    if n == 0 {
        return Err(parse_err(images, 4, "no images"));
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let targets = lab.iter().map(|&c| Target::Class(c as usize)).collect();
    let ds = Dataset::new(features, rows * cols, targets, split)?;
    let k = ds.num_classes().unwrap_or(1).max(10);
    ds.with_num_classes(k)
}

/// Standard MNIST file names under a directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    match split {
        Split::Train => (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        ),
        Split::Test => (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        ),
    }
}

/// Writes a classification dataset with features in `[0,1]` as an IDX pair.
/// Pixel values are rounded to the nearest `k/255`.
pub fn write_mnist_idx(ds: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::contract("image shape does not match feature width"));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for i in 0..ds.len() {
        for &v in ds.feature(i) {
            img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        match ds.target(i) {
            Target::Class(c) if *c < 256 => lab.push(*c as u8),
            _ => return Err(Error::contract("IDX labels need class targets below 256")),
        }
    }
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobClass {
    pub mean: [f64; 2],
    pub sigma: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: Vec<BlobClass>,
    pub seed: u64,
}

impl BlobSpec {
    /// Three overlapping classes on a triangle, 800 points in total.
    pub fn three_class(seed: u64) -> Self {
        let c = |x, y, count| BlobClass {
            mean: [x, y],
            sigma: 0.6,
            count,
        };
        Self {
            classes: vec![c(-1.0, 0.0, 267), c(1.0, 0.0, 267), c(0.0, 1.6, 266)],
            seed,
        }
    }
}

/// Isotropic Gaussian blobs; samples are emitted in a seeded shuffled order.
pub fn make_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    if spec.classes.len() < 2 {
        return Err(Error::contract("blobs need at least two classes"));
    }
    if let Some(bad) = spec.classes.iter().find(|c| !(c.sigma > 0.0) || c.count == 0) {
        return Err(Error::contract(format!("invalid blob class {bad:?}")));
    }
    let mut rng = Rng::new(spec.seed);
    let mut rows: Vec<([f64; 2], usize)> = Vec::new();
    for (k, class) in spec.classes.iter().enumerate() {
        for _ in 0..class.count {
            let (a, b) = rng.normal_pair();
            rows.push(([class.mean[0] + class.sigma * a, class.mean[1] + class.sigma * b], k));
        }
    }
    rng.shuffle(&mut rows);
    let features = rows.iter().flat_map(|(p, _)| *p).collect();
    let targets = rows.iter().map(|&(_, k)| Target::Class(k)).collect();
    Dataset::new(features, 2, targets, split)?.with_num_classes(spec.classes.len())
}

/// Decoded binary PPM.
#[derive(Clone, Debug, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<PpmImage> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(String, usize)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err(path, start as u64, "unexpected end of PPM header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start))
    };
    let (magic, at) = token(&mut pos)?;
    if magic != "P6" {
        return Err(parse_err(path, at as u64, format!("expected P6, found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let (t, at) = token(pos)?;
        t.parse()
            .map_err(|_| parse_err(path, at as u64, format!("bad {what} {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(parse_err(path, maxval_at as u64, format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(path, 0, "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(parse_err(path, bytes.len() as u64, "truncated raster"));
    }
    Ok(PpmImage {
        width,
        height,
        rgb: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_ppm<W: Write>(img: &PpmImage, mut w: W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.rgb)?;
    Ok(())
}

/// Maps pixel index `i` of `n` onto `[-1, 1]` with both end pixels on the
/// boundary; a single pixel maps to the midpoint 0.
/// Pixel centre of index `i` along an axis of `n` pixels, mapped into `(-1, 1)`.
fn pixel_coordinate(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// One sample per pixel in row-major order: features `(x, y) ∈ (-1,1)²` at pixel centres,
/// targets RGB in `[0,1]³`.
pub fn image_to_dataset(img: &PpmImage, split: Split) -> Result<Dataset> {
    let n = img.width * img.height;
    let mut features = Vec::with_capacity(2 * n);
    let mut targets = Vec::with_capacity(n);
    for row in 0..img.height {
        for col in 0..img.width {
            features.push(pixel_coordinate(col, img.width));
            features.push(pixel_coordinate(row, img.height));
            let p = 3 * (row * img.width + col);
            targets.push(Target::Value(
                img.rgb[p..p + 3].iter().map(|&c| c as f64 / 255.0).collect(),
            ));
        }
    }
    Dataset::new(features, 2, targets, split)
}

pub fn image_regression_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    image_to_dataset(&parse_ppm(&bytes, path)?, Split::Train)
}

/// Deterministic subset of `n` rows without replacement.
///
/// Classification data is stratified with equal allocation: classes receive
/// `n / k` rows each (remainder to the lowest class indices), and a class
/// that runs out passes its share on to the others. The result is returned
/// in a seeded shuffled order.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::contract(format!("subset of {n} requested from {} rows", ds.len())));
    }
    if n == 0 {
        return Err(Error::contract("subset must be non-empty"));
    }
    let mut rng = Rng::new(seed);
    let mut chosen = match ds.num_classes() {
        Some(k) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for i in 0..ds.len() {
                by_class[ds.class_of(i).unwrap()].push(i);
            }
            let mut quota = vec![0usize; k];
            let mut remaining = n;
            while remaining > 0 {
                let mut progressed = false;
                for c in 0..k {
                    if remaining > 0 && quota[c] < by_class[c].len() {
                        quota[c] += 1;
                        remaining -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            let mut chosen = Vec::with_capacity(n);
            for (members, &take) in by_class.iter_mut().zip(&quota) {
                rng.shuffle(members);
                chosen.extend_from_slice(&members[..take]);
            }
            chosen
        }
        None => {
            let mut all: Vec<usize> = (0..ds.len()).collect();
            rng.shuffle(&mut all);
            all.truncate(n);
            all
        }
    };
    rng.shuffle(&mut chosen);
    ds.select(&chosen)
}
