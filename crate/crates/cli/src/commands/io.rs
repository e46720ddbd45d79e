use std::path::Path;

use wexp_core::classify::error_rate;
use wexp_core::data::{load_csv, load_idx, load_idx_images, write_csv, write_idx, LabeledImageSet};
use wexp_core::measure::GrayImage;
use wexp_core::{Error, Result};

use crate::model::ModelFile;

/// Input images for `predict`, with labels when they are available.
pub enum PredictInput<'a> {
    Idx { images: &'a Path, labels: Option<&'a Path> },
    Csv(&'a Path),
}

fn load_input(input: &PredictInput<'_>) -> Result<(Vec<GrayImage>, Option<Vec<usize>>)> {
    match input {
        PredictInput::Idx { images, labels: Some(l) } => {
            let s = load_idx(images, l)?;
            Ok((s.images, Some(s.labels)))
        }
        PredictInput::Idx { images, labels: None } => Ok((load_idx_images(images)?.2, None)),
        PredictInput::Csv(p) => {
            let s = load_csv(p)?;
            Ok((s.images, Some(s.labels)))
        }
    }
}

/// Labels for every input image, and the error rate when labels are known.
pub fn cmd_predict(model: &Path, input: &PredictInput<'_>) -> Result<(Vec<usize>, Option<f64>)> {
    let model = ModelFile::read(model)?;
    let (images, labels) = load_input(input)?;
    let predicted = model.predict(&images)?;
    let error = labels.filter(|l| !l.is_empty()).map(|l| error_rate(&predicted, &l));
    Ok((predicted, error))
}

/// Conversion target for `export`.
pub enum ExportTarget<'a> {
    Csv(&'a Path),
    Idx { images: &'a Path, labels: &'a Path },
}

pub fn cmd_export(set: &LabeledImageSet, target: &ExportTarget<'_>) -> Result<()> {
    match target {
        ExportTarget::Csv(p) => write_csv(set, p),
        ExportTarget::Idx { images, labels } => {
            if set.labels.iter().any(|&l| l > 255) {
                return Err(Error::domain("IDX labels must fit in one byte"));
            }
            write_idx(set, images, labels)
        }
    }
}
