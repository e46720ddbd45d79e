//! Labeled image sets: IDX and CSV ingestion, export, and balanced splits.
//!
//! IDX is the big-endian MNIST container: image files start with magic
//! `0x00000803` followed by `(count, rows, cols)` as `u32` and one unsigned
//! byte per pixel; label files start with `0x00000801`, the count, then one
//! byte per label. Gzip-compressed files are recognised by their magic bytes
//! and decompressed transparently.
//!
//! The CSV interchange format has a mandatory header whose first field is
//! `label` and whose pixel columns are named `r<row>c<col>` in row-major
//! order, so the last column name fixes the image dimensions. Each data row
//! holds the integer label followed by the pixel values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg32;

use crate::error::{Error, Result};
use crate::measure::GrayImage;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images of uniform dimensions with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub width: usize,
    pub height: usize,
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    /// Free-form provenance, e.g. the file the set was read from.
    pub source: String,
}

impl LabeledImageSet {
    pub fn new(width: usize, height: usize, images: Vec<GrayImage>, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::usage(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, img)) = images
            .iter()
            .enumerate()
            .find(|(_, img)| img.width() != width || img.height() != height)
        {
            return Err(Error::usage(format!(
                "image {i} is {}x{}, expected {width}x{height}",
                img.width(),
                img.height()
            )));
        }
        Ok(LabeledImageSet {
            width,
            height,
            images,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// The sub-set at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            width: self.width,
            height: self.height,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source: self.source.clone(),
        }
    }

    pub fn count_per_class(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl IdxReader<'_> {
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let end = self.offset + 4;
        let chunk = self.bytes.get(self.offset..end).ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            field,
            offset: self.offset as u64,
            message: "file truncated in header".into(),
        })?;
        self.offset = end;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn payload(&mut self, field: &'static str, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                field,
                offset: self.bytes.len() as u64,
                message: format!("payload truncated: need {len} bytes, found {available}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }

    fn expect_magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32("magic")?;
        if magic != expected {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                field: "magic",
                offset: 0,
                message: format!("expected {expected:#010x}, found {magic:#010x}"),
            });
        }
        Ok(())
    }
}

/// Reads an IDX image file alone; returns `(width, height, images)`.
pub fn load_idx_images(images_path: impl AsRef<Path>) -> Result<(usize, usize, Vec<GrayImage>)> {
    let images_path = images_path.as_ref();
    let image_bytes = read_maybe_gz(images_path)?;
    let mut r = IdxReader {
        path: images_path,
        bytes: &image_bytes,
        offset: 0,
    };
    r.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            field: "rows",
            offset: 8,
            message: format!("degenerate image dimensions {rows}x{cols}"),
        });
    }
    let pixels = r.payload("pixels", count * rows * cols)?;
    let images = pixels
        .chunks_exact(rows * cols)
        .map(|chunk| GrayImage::from_bytes(cols, rows, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok((cols, rows, images))
}

/// Reads an IDX image file and its IDX label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (cols, rows, images) = load_idx_images(images_path)?;
    let count = images.len();

    let label_bytes = read_maybe_gz(labels_path)?;
    let mut r = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
        offset: 0,
    };
    r.expect_magic(IDX_LABELS_MAGIC)?;
    let label_count = r.u32("label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            field: "label count",
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let labels = r
        .payload("labels", label_count)?
        .iter()
        .map(|&b| usize::from(b))
        .collect();

    LabeledImageSet::new(
        cols,
        rows,
        images,
        labels,
        images_path.display().to_string(),
    )
}

/// Writes a set as an IDX image/label file pair. Pixel values must be
/// integers in `[0, 255]` and labels below 256.
pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let mut out = Vec::with_capacity(16 + set.len() * set.width * set.height);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(set.height as u32).to_be_bytes());
    out.extend_from_slice(&(set.width as u32).to_be_bytes());
    for (k, img) in set.images.iter().enumerate() {
        for &v in img.intensities() {
            if v.fract() != 0.0 || v > 255.0 {
                return Err(Error::domain(format!(
                    "image {k} has pixel value {v}, which is not a byte"
                )));
            }
            out.push(v as u8);
        }
    }
    fs::write(images_path, &out).map_err(|e| Error::io(images_path, e))?;

    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for &l in &set.labels {
        out.push(u8::try_from(l).map_err(|_| Error::domain(format!("label {l} does not fit a byte")))?);
    }
    fs::write(labels_path, &out).map_err(|e| Error::io(labels_path, e))
}

fn pixel_column_name(row: usize, col: usize) -> String {
    format!("r{row}c{col}")
}

fn parse_pixel_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('r')?;
    let (r, c) = rest.split_once('c')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

/// Reads the CSV interchange format described in the module docs.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line_err = |line: usize, message: String| Error::ParseLine {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| line_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.first() != Some(&"label") || fields.len() < 2 {
        return Err(line_err(1, "header must start with `label` followed by pixel columns".into()));
    }
    let (last_r, last_c) = parse_pixel_column(fields[fields.len() - 1])
        .ok_or_else(|| line_err(1, format!("bad pixel column {:?}", fields[fields.len() - 1])))?;
    let (height, width) = (last_r + 1, last_c + 1);
    if fields.len() != 1 + width * height {
        return Err(line_err(
            1,
            format!("header declares {width}x{height} pixels but has {} pixel columns", fields.len() - 1),
        ));
    }
    for (k, name) in fields[1..].iter().enumerate() {
        if parse_pixel_column(name) != Some((k / width, k % width)) {
            return Err(line_err(1, format!("pixel column {k} is {name:?}, expected {}", pixel_column_name(k / width, k % width))));
        }
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split(',').map(str::trim).collect();
        if values.len() != fields.len() {
            return Err(line_err(
                line_no,
                format!("expected {} fields, found {}", fields.len(), values.len()),
            ));
        }
        let label: usize = values[0]
            .parse()
            .map_err(|_| line_err(line_no, format!("bad label {:?}", values[0])))?;
        let mut pixels = Vec::with_capacity(width * height);
        for v in &values[1..] {
            let x: f64 = v
                .parse()
                .map_err(|_| line_err(line_no, format!("bad pixel value {v:?}")))?;
            if !(x.is_finite() && x >= 0.0) {
                return Err(line_err(line_no, format!("pixel value {v} must be finite and nonnegative")));
            }
            pixels.push(x);
        }
        images.push(GrayImage::new(width, height, pixels)?);
        labels.push(label);
    }
    LabeledImageSet::new(width, height, images, labels, path.display().to_string())
}

/// Writes the CSV interchange format. Values are printed exactly (shortest
/// round-trip representation).
pub fn write_csv(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("label");
    for r in 0..set.height {
        for c in 0..set.width {
            header.push(',');
            header.push_str(&pixel_column_name(r, c));
        }
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for (img, label) in set.images.iter().zip(&set.labels) {
        let mut line = label.to_string();
        for v in img.intensities() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Either IDX (image + label file) or CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LabeledImageSet> {
        match self {
            DatasetSource::Idx { images, labels } => load_idx(images, labels),
            DatasetSource::Csv { path } => load_csv(path),
        }
    }
}

/// Sizes of the three disjoint splits drawn from one labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Size of the core subset (the first `core_size` training samples).
    pub core_size: Option<usize>,
    pub rng_seed: u64,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.validation_size == 0 || self.test_size == 0 {
            return Err(Error::usage("split sizes must all be at least 1"));
        }
        if let Some(core) = self.core_size {
            if core == 0 || core > self.train_size {
                return Err(Error::usage(format!(
                    "core size {core} must lie in [1, train size {}]",
                    self.train_size
                )));
            }
        }
        Ok(())
    }
}

/// Result of [`balanced_subsample`]; the index vectors refer to the source
/// set.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledImageSet,
    pub validation: LabeledImageSet,
    pub test: LabeledImageSet,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Quota of each class (in ascending class order) for a split of `size`.
fn quotas(size: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|k| size / classes + usize::from(k < size % classes))
        .collect()
}

/// Interleaves per-class lists round-robin so every prefix stays balanced.
fn interleave(per_class: Vec<Vec<usize>>) -> Vec<usize> {
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(per_class.iter().map(Vec::len).sum());
    for k in 0..longest {
        for list in &per_class {
            if let Some(&i) = list.get(k) {
                out.push(i);
            }
        }
    }
    out
}

/// Draws class-balanced, disjoint train/validation/test splits.
///
/// Each class's samples are shuffled with a PCG32 generator (64-bit state,
/// `rand_pcg::Pcg32`) seeded from `plan.rng_seed`; the class quotas are then
/// taken in order train, validation, test. The quota of a split differs by
/// at most one between classes, and the samples of each split are
/// interleaved by class so that any prefix (such as the core subset) is
/// balanced as well.
pub fn balanced_subsample(set: &LabeledImageSet, plan: &SplitPlan) -> Result<Splits> {
    plan.validate()?;
    let classes = set.classes();
    if classes.is_empty() {
        return Err(Error::usage("cannot split an empty set"));
    }
    let c = classes.len();
    let (qt, qv, qs) = (
        quotas(plan.train_size, c),
        quotas(plan.validation_size, c),
        quotas(plan.test_size, c),
    );

    let mut deficits = Vec::new();
    let mut members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&cls| (0..set.len()).filter(|&i| set.labels[i] == cls).collect())
        .collect();
    for (k, list) in members.iter().enumerate() {
        let need = qt[k] + qv[k] + qs[k];
        if list.len() < need {
            deficits.push(format!(
                "class {}: need {need}, have {} (short by {})",
                classes[k],
                list.len(),
                need - list.len()
            ));
        }
    }
    if !deficits.is_empty() {
        return Err(Error::usage(format!(
            "insufficient samples per class: {}",
            deficits.join("; ")
        )));
    }

    let mut rng = Pcg32::seed_from_u64(plan.rng_seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (k, list) in members.iter_mut().enumerate() {
        list.shuffle(&mut rng);
        train.push(list[..qt[k]].to_vec());
        val.push(list[qt[k]..qt[k] + qv[k]].to_vec());
        test.push(list[qt[k] + qv[k]..qt[k] + qv[k] + qs[k]].to_vec());
    }
    let train_indices = interleave(train);
    let validation_indices = interleave(val);
    let test_indices = interleave(test);
    Ok(Splits {
        train: set.select(&train_indices),
        validation: set.select(&validation_indices),
        test: set.select(&test_indices),
        train_indices,
        validation_indices,
        test_indices,
    })
}
