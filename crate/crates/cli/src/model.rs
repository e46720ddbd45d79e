//! Self-contained model files for `predict`.
//!
//! A model is a WSKN container of kind `Model` whose payload holds the
//! training images (one row each), so new inputs can be compared against
//! them. Sections: `META` (grid, solver settings, method), `MODL` (the
//! LS-SVM ensemble) or `KNN ` (k and labels), and `EIGN` for primal
//! methods.

use std::path::Path;

use nalgebra::DMatrix;
use wexp_core::classify::{DistanceKind, FittedLssvm, KnnModel, OvoEnsemble};
use wexp_core::container::{Container, PayloadKind, SECTION_EIGENPAIRS, SECTION_MODEL};
use wexp_core::kernel::squared_euclidean_distances;
use wexp_core::measure::{CoordinateScale, GrayImage};
use wexp_core::spectral::FeatureMap;
use wexp_core::transport::{ObjectiveKind, SinkhornConfig};
use wexp_core::{Error, Result};

use crate::config::Method;
use crate::experiment::{grid_for_dims, measures_of_images};

const SECTION_META: [u8; 4] = *b"META";
const SECTION_KNN: [u8; 4] = *b"KNN ";

#[derive(Debug, Clone)]
pub enum Classifier {
    Lssvm(FittedLssvm),
    Knn(KnnModel),
}

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub method: Method,
    pub classifier: Classifier,
    pub width: usize,
    pub height: usize,
    pub coordinates: CoordinateScale,
    pub sinkhorn: SinkhornConfig,
    pub training: Vec<GrayImage>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&[u8]> {
        let out = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            field,
            offset: self.pos as u64,
            message: "truncated model section".into(),
        })?;
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn bad(&self, field: &'static str, message: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            field,
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

impl ModelFile {
    fn meta(&self) -> Vec<u8> {
        let mut m = Vec::new();
        let method = Method::ALL.iter().position(|x| *x == self.method).expect("known method") as u8;
        m.push(method);
        put_u32(&mut m, self.width as u32);
        put_u32(&mut m, self.height as u32);
        m.push(u8::from(self.coordinates == CoordinateScale::Unit));
        let s = &self.sinkhorn;
        put_f64(&mut m, s.epsilon);
        put_f64(&mut m, s.marginal_tolerance);
        put_u32(&mut m, s.max_iterations as u32);
        m.push(u8::from(s.objective_kind == ObjectiveKind::TransportCostOnly));
        put_f64(&mut m, s.relaxation);
        m.push(u8::from(s.prune_zero_atoms));
        m.push(u8::from(s.epsilon_scaling));
        put_f64(&mut m, s.kernel_truncation);
        if let Classifier::Lssvm(f) = &self.classifier {
            put_u32(&mut m, f.basis_len as u32);
            put_f64(&mut m, f.lambda_min.unwrap_or(f64::NAN));
            put_f64(&mut m, f.feature_map.as_ref().map_or(0.0, |fm| fm.threshold));
        }
        m
    }

    pub fn to_container(&self) -> Container {
        let p = self.width * self.height;
        let payload = DMatrix::from_fn(self.training.len(), p, |i, j| self.training[i].intensities()[j]);
        let sigma = match &self.classifier {
            Classifier::Lssvm(f) => f.ensemble.sigma,
            Classifier::Knn(_) => 0.0,
        };
        let mut c = Container::new(PayloadKind::Model, self.sinkhorn.epsilon, sigma, payload)
            .with_section(SECTION_META, self.meta());
        match &self.classifier {
            Classifier::Lssvm(f) => {
                c = c.with_section(SECTION_MODEL, f.ensemble.to_section());
                if let Some(fm) = &f.feature_map {
                    c = c.with_section(SECTION_EIGENPAIRS, fm.to_section());
                }
            }
            Classifier::Knn(k) => {
                let mut b = Vec::new();
                put_u32(&mut b, k.k as u32);
                b.push(u8::from(k.distance_kind == DistanceKind::Wasserstein));
                put_u32(&mut b, k.labels.len() as u32);
                for &l in &k.labels {
                    put_u32(&mut b, l as u32);
                }
                c = c.with_section(SECTION_KNN, b);
            }
        }
        c
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != PayloadKind::Model {
            return Err(Error::domain(format!("{} is not a model file", path.display())));
        }
        let meta = c
            .section(SECTION_META)
            .ok_or_else(|| Error::domain(format!("{} has no META section", path.display())))?;
        let mut r = Cursor { bytes: meta, pos: 0, path };
        let method = *Method::ALL
            .get(r.u8("method")? as usize)
            .ok_or_else(|| r.bad("method", "unknown method"))?;
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let coordinates = if r.u8("coordinates")? == 1 {
            CoordinateScale::Unit
        } else {
            CoordinateScale::Pixel
        };
        let sinkhorn = SinkhornConfig {
            epsilon: r.f64("epsilon")?,
            marginal_tolerance: r.f64("tolerance")?,
            max_iterations: r.u32("max iterations")? as usize,
            objective_kind: if r.u8("objective")? == 1 {
                ObjectiveKind::TransportCostOnly
            } else {
                ObjectiveKind::RegularizedObjective
            },
            relaxation: r.f64("relaxation")?,
            prune_zero_atoms: r.u8("prune")? == 1,
            epsilon_scaling: r.u8("scaling")? == 1,
            kernel_truncation: r.f64("truncation")?,
        };
        if width * height != c.matrix.ncols() {
            return Err(r.bad("width", "grid does not match the stored training images"));
        }
        let training = (0..c.matrix.nrows())
            .map(|i| GrayImage::new(width, height, c.matrix.row(i).iter().copied().collect()))
            .collect::<Result<Vec<_>>>()?;
        let classifier = if let Some(b) = c.section(SECTION_MODEL) {
            let basis_len = r.u32("basis length")? as usize;
            let lambda_min = r.f64("lambda min")?;
            let threshold = r.f64("threshold")?;
            let ensemble = OvoEnsemble::from_section(b, path)?;
            let feature_map = c
                .section(SECTION_EIGENPAIRS)
                .map(|e| FeatureMap::from_section(e, path, threshold))
                .transpose()?;
            if ensemble.method.is_primal() != feature_map.is_some() {
                return Err(r.bad("model", "feature map presence does not match the method"));
            }
            if basis_len > training.len() {
                return Err(r.bad("basis length", "exceeds the training set"));
            }
            Classifier::Lssvm(FittedLssvm {
                ensemble,
                feature_map,
                lambda_min: (!lambda_min.is_nan()).then_some(lambda_min),
                basis_len,
            })
        } else if let Some(b) = c.section(SECTION_KNN) {
            let mut k = Cursor { bytes: b, pos: 0, path };
            let kk = k.u32("k")? as usize;
            let kind = if k.u8("distance kind")? == 1 {
                DistanceKind::Wasserstein
            } else {
                DistanceKind::Euclidean
            };
            let n = k.u32("label count")? as usize;
            let labels = (0..n).map(|_| Ok(k.u32("labels")? as usize)).collect::<Result<Vec<_>>>()?;
            if n != training.len() {
                return Err(k.bad("label count", "does not match the training images"));
            }
            Classifier::Knn(KnnModel::new(kk, kind, labels)?)
        } else {
            return Err(Error::domain(format!("{} holds no classifier section", path.display())));
        };
        Ok(ModelFile {
            method,
            classifier,
            width,
            height,
            coordinates,
            sinkhorn,
            training,
        })
    }

    /// Squared distances from `inputs` to the first `cols` training images.
    fn distances(&self, inputs: &[GrayImage], cols: usize) -> Result<DMatrix<f64>> {
        let training = &self.training[..cols];
        if self.method.uses_transport() {
            let grid = grid_for_dims(self.width, self.height, self.coordinates)?;
            let rows = measures_of_images(inputs, &grid)?;
            let train = measures_of_images(training, &grid)?;
            let cost = wexp_core::measure::build_ground_cost(&grid, &grid);
            Ok(wexp_core::transport::cross_distances(&rows, &train, &cost, &self.sinkhorn, None)?.matrix)
        } else {
            let raw = |s: &[GrayImage]| -> Vec<Vec<f64>> { s.iter().map(|i| i.intensities().to_vec()).collect() };
            Ok(squared_euclidean_distances(&raw(inputs), &raw(training)))
        }
    }

    /// One label per input image.
    pub fn predict(&self, inputs: &[GrayImage]) -> Result<Vec<usize>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = inputs.iter().find(|i| i.width() != self.width || i.height() != self.height) {
            return Err(Error::usage(format!(
                "input is {}x{} but the model was trained on {}x{} images",
                bad.width(),
                bad.height(),
                self.width,
                self.height
            )));
        }
        match &self.classifier {
            Classifier::Lssvm(f) => {
                let cols = if f.feature_map.is_some() { f.basis_len } else { self.training.len() };
                f.predict_from_distances(&self.distances(inputs, cols)?)
            }
            Classifier::Knn(k) => k.classify_rows(&self.distances(inputs, self.training.len())?),
        }
    }
}
