//! Experiment configuration.
//!
//! The file format is line-oriented `key = value` with `[section]` headers
//! and `#` comments; see `README.md` for the full key list. Relative paths
//! are resolved against the directory of the config file. The environment
//! variables `WEXP_IMAGES`, `WEXP_LABELS`, `WEXP_CSV`, `WEXP_OUTPUT` and
//! `WEXP_CACHE` override the corresponding paths; nothing else can be set
//! from the environment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use wexp_core::data::DatasetSource;
use wexp_core::measure::CoordinateScale;
use wexp_core::transport::{ObjectiveKind, SinkhornConfig};
use wexp_core::{Error, Result};

/// The six pipelines that can be run and compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Truncated Wasserstein features on the full training set, primal LS-SVM.
    Core,
    /// Features from a core subset, extended to the rest of the training set.
    CoreOos,
    /// Dual LS-SVM on the raw, possibly indefinite, Wasserstein Gram matrix.
    Indefinite,
    /// Dual LS-SVM with a Gaussian kernel on raw intensities.
    Rbf,
    WassKnn,
    L2Knn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Core,
        Method::CoreOos,
        Method::Indefinite,
        Method::Rbf,
        Method::WassKnn,
        Method::L2Knn,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Core => "core",
            Method::CoreOos => "core-oos",
            Method::Indefinite => "indefinite",
            Method::Rbf => "rbf",
            Method::WassKnn => "wass-knn",
            Method::L2Knn => "l2-knn",
        }
    }

    pub fn uses_transport(self) -> bool {
        !matches!(self, Method::Rbf | Method::L2Knn)
    }

    pub fn is_knn(self) -> bool {
        matches!(self, Method::WassKnn | Method::L2Knn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == key)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown method {s:?} (expected one of core, core-oos, indefinite, rbf, wass-knn, l2-knn)"
                ))
            })
    }
}

/// Split sizes; the seed comes from the repetition list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub core: Option<usize>,
}

/// Log-spaced grid `points` values over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl LogGrid {
    fn check(&self, name: &str) -> Result<()> {
        let ok = self.min > 0.0
            && self.max >= self.min
            && self.max.is_finite()
            && self.points >= 1
            && (self.points > 1 || self.min == self.max);
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("{name} grid must satisfy 0 < min ≤ max with at least one point")))
        }
    }

    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        (0..self.points)
            .map(|k| {
                if k == 0 {
                    self.min
                } else if k + 1 == self.points {
                    self.max
                } else {
                    (lo + (hi - lo) * k as f64 / (self.points - 1) as f64).exp()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Keep only the first `limit` samples of the dataset.
    pub limit: Option<usize>,
    pub split: Option<SplitSizes>,
    pub seeds: Vec<u64>,
    pub sinkhorn: SinkhornConfig,
    pub coordinates: CoordinateScale,
    pub methods: Vec<Method>,
    /// σ candidates as multiples of the median pairwise distance.
    pub sigma_factors: LogGrid,
    pub gamma: LogGrid,
    pub k_grid: Vec<usize>,
    pub spectral_threshold: f64,
    /// σ values for `sigma-scan`, as multiples of the median distance.
    pub scan_factors: LogGrid,
    /// σ multiples at which `sigma-scan` writes heatmaps.
    pub heatmap_factors: Vec<f64>,
    /// Training sizes for the sweep; empty disables it.
    pub sweep_train_sizes: Vec<usize>,
    pub concurrent_repetitions: bool,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Csv {
                path: PathBuf::from("data.csv"),
            },
            limit: None,
            split: None,
            seeds: vec![0],
            sinkhorn: SinkhornConfig::default().with_objective(ObjectiveKind::TransportCostOnly),
            coordinates: CoordinateScale::Pixel,
            methods: vec![Method::Indefinite],
            sigma_factors: LogGrid {
                min: 0.1,
                max: 10.0,
                points: 13,
            },
            gamma: LogGrid {
                min: 1e-2,
                max: 1e4,
                points: 13,
            },
            k_grid: vec![1, 3, 5, 7, 9, 11, 13, 15],
            spectral_threshold: 1e-6,
            scan_factors: LogGrid {
                min: 1e-2,
                max: 1e2,
                points: 25,
            },
            heatmap_factors: Vec::new(),
            sweep_train_sizes: Vec::new(),
            concurrent_repetitions: false,
            output_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache"),
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("dataset", &["format", "images", "labels", "csv", "limit"]),
    ("split", &["train", "validation", "test", "core", "seeds"]),
    (
        "transport",
        &[
            "epsilon",
            "tolerance",
            "max_iterations",
            "objective",
            "coordinates",
            "relaxation",
            "epsilon_scaling",
            "truncation",
            "prune_zero_atoms",
        ],
    ),
    (
        "methods",
        &[
            "methods",
            "sigma_min_factor",
            "sigma_max_factor",
            "sigma_points",
            "gamma_min",
            "gamma_max",
            "gamma_points",
            "k_grid",
            "threshold",
        ],
    ),
    ("scan", &["min_factor", "max_factor", "points", "heatmaps"]),
    ("sweep", &["train_sizes"]),
    ("output", &["dir", "cache", "concurrent_repetitions"]),
];

/// Flat `section.key → value` view of a config file plus overrides.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with_base(&text, base)
    }

    pub fn from_str_with_base(text: &str, base: PathBuf) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        let mut raw = RawConfig {
            values: BTreeMap::new(),
            base,
        };
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                raw.set(&format!("{section}.{key}"), value)?;
            }
        }
        Ok(raw)
    }

    /// Sets `section.key`, rejecting unknown keys.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::usage(format!("config key {dotted:?} has no section")))?;
        let known = KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .map(|(_, keys)| keys.contains(&key))
            .unwrap_or(false);
        if !known {
            return Err(Error::usage(format!("unknown config key {dotted:?}")));
        }
        self.values.insert(dotted.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies the path overrides from environment variables.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, key) in [
            ("WEXP_IMAGES", "dataset.images"),
            ("WEXP_LABELS", "dataset.labels"),
            ("WEXP_CSV", "dataset.csv"),
            ("WEXP_OUTPUT", "output.dir"),
            ("WEXP_CACHE", "output.cache"),
        ] {
            if let Some(v) = lookup(var) {
                self.values.insert(key.to_string(), v);
                if matches!(var, "WEXP_IMAGES" | "WEXP_LABELS") && !self.values.contains_key("dataset.format") {
                    self.values.insert("dataset.format".into(), "idx".into());
                }
            }
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::usage(format!("config {key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|_| Error::usage(format!("config {key}: cannot parse {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(Error::usage(format!("config {key}: expected true or false, got {v:?}"))),
            })
            .transpose()
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();

        let format = self.get("dataset.format").map(str::to_ascii_lowercase);
        let format = format.as_deref().unwrap_or(if self.get("dataset.csv").is_some() { "csv" } else { "idx" });
        c.dataset = match format {
            "idx" => DatasetSource::Idx {
                images: self
                    .path("dataset.images")
                    .ok_or_else(|| Error::usage("dataset.images is required for IDX input"))?,
                labels: self
                    .path("dataset.labels")
                    .ok_or_else(|| Error::usage("dataset.labels is required for IDX input"))?,
            },
            "csv" => DatasetSource::Csv {
                path: self
                    .path("dataset.csv")
                    .ok_or_else(|| Error::usage("dataset.csv is required for CSV input"))?,
            },
            other => return Err(Error::usage(format!("dataset.format must be idx or csv, got {other:?}"))),
        };
        c.limit = self.parse("dataset.limit")?;

        let train: Option<usize> = self.parse("split.train")?;
        let validation: Option<usize> = self.parse("split.validation")?;
        let test: Option<usize> = self.parse("split.test")?;
        c.split = match (train, validation, test) {
            (Some(train), Some(validation), Some(test)) => Some(SplitSizes {
                train,
                validation,
                test,
                core: self.parse("split.core")?,
            }),
            (None, None, None) => None,
            _ => return Err(Error::usage("split needs train, validation and test together")),
        };
        if let Some(seeds) = self.list("split.seeds")? {
            c.seeds = seeds;
        }

        let s = &mut c.sinkhorn;
        s.epsilon = self.parse("transport.epsilon")?.unwrap_or(s.epsilon);
        s.marginal_tolerance = self.parse("transport.tolerance")?.unwrap_or(s.marginal_tolerance);
        s.max_iterations = self.parse("transport.max_iterations")?.unwrap_or(s.max_iterations);
        s.objective_kind = self.parse("transport.objective")?.unwrap_or(s.objective_kind);
        s.relaxation = self.parse("transport.relaxation")?.unwrap_or(s.relaxation);
        s.epsilon_scaling = self.flag("transport.epsilon_scaling")?.unwrap_or(s.epsilon_scaling);
        s.kernel_truncation = self.parse("transport.truncation")?.unwrap_or(s.kernel_truncation);
        s.prune_zero_atoms = self.flag("transport.prune_zero_atoms")?.unwrap_or(s.prune_zero_atoms);
        c.coordinates = self.parse("transport.coordinates")?.unwrap_or(c.coordinates);

        if let Some(methods) = self.list("methods.methods")? {
            c.methods = methods;
        }
        let g = &mut c.sigma_factors;
        g.min = self.parse("methods.sigma_min_factor")?.unwrap_or(g.min);
        g.max = self.parse("methods.sigma_max_factor")?.unwrap_or(g.max);
        g.points = self.parse("methods.sigma_points")?.unwrap_or(g.points);
        let g = &mut c.gamma;
        g.min = self.parse("methods.gamma_min")?.unwrap_or(g.min);
        g.max = self.parse("methods.gamma_max")?.unwrap_or(g.max);
        g.points = self.parse("methods.gamma_points")?.unwrap_or(g.points);
        if let Some(k) = self.list("methods.k_grid")? {
            c.k_grid = k;
        }
        c.spectral_threshold = self.parse("methods.threshold")?.unwrap_or(c.spectral_threshold);

        let g = &mut c.scan_factors;
        g.min = self.parse("scan.min_factor")?.unwrap_or(g.min);
        g.max = self.parse("scan.max_factor")?.unwrap_or(g.max);
        g.points = self.parse("scan.points")?.unwrap_or(g.points);
        if let Some(h) = self.list("scan.heatmaps")? {
            c.heatmap_factors = h;
        }
        if let Some(sizes) = self.list("sweep.train_sizes")? {
            c.sweep_train_sizes = sizes;
        }

        if let Some(p) = self.path("output.dir") {
            c.output_dir = p;
        } else {
            c.output_dir = self.base.join(&c.output_dir);
        }
        if let Some(p) = self.path("output.cache") {
            c.cache_dir = p;
        } else {
            c.cache_dir = self.base.join(&c.cache_dir);
        }
        c.concurrent_repetitions = self.flag("output.concurrent_repetitions")?.unwrap_or(false);

        c.validate()?;
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        self.sigma_factors.check("sigma")?;
        self.gamma.check("gamma")?;
        self.scan_factors.check("scan")?;
        if self.methods.is_empty() {
            return Err(Error::usage("no methods configured"));
        }
        if self.seeds.is_empty() {
            return Err(Error::usage("split.seeds is empty"));
        }
        if self.methods.iter().any(|m| m.is_knn()) && (self.k_grid.is_empty() || self.k_grid.contains(&0)) {
            return Err(Error::usage("kNN methods need a k_grid of positive integers"));
        }
        if self.methods.contains(&Method::CoreOos) && self.split.is_some_and(|s| s.core.is_none()) {
            return Err(Error::usage("core-oos needs split.core"));
        }
        if !(self.spectral_threshold.is_finite() && self.spectral_threshold >= 0.0) {
            return Err(Error::usage("methods.threshold must be a nonnegative number"));
        }
        if self.heatmap_factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::usage("scan.heatmaps must hold positive numbers"));
        }
        if self.sweep_train_sizes.contains(&0) {
            return Err(Error::usage("sweep.train_sizes must be positive"));
        }
        Ok(())
    }

    /// Fails with a data error when an input path does not exist.
    pub fn check_paths(&self) -> Result<()> {
        let paths: Vec<&Path> = match &self.dataset {
            DatasetSource::Idx { images, labels } => vec![images, labels],
            DatasetSource::Csv { path } => vec![path],
        };
        for p in paths {
            if !p.exists() {
                return Err(Error::domain(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> Result<ExperimentConfig> {
        RawConfig::from_str_with_base(text, PathBuf::from("/base"))?.resolve()
    }

    #[test]
    fn parses_sections_and_resolves_paths() {
        let c = raw(
            "[dataset]\nimages = img.gz\nlabels = /abs/lab.gz\n\
             [split]\ntrain = 10\nvalidation = 5\ntest = 5\ncore = 4\nseeds = 1, 2\n\
             [transport]\nepsilon = 0.5\nobjective = regularized\n\
             [methods]\nmethods = core-oos, l2_knn\nk_grid = 1,3\n",
        )
        .unwrap();
        assert_eq!(
            c.dataset,
            DatasetSource::Idx {
                images: "/base/img.gz".into(),
                labels: "/abs/lab.gz".into()
            }
        );
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.split.unwrap().core, Some(4));
        assert_eq!(c.sinkhorn.epsilon, 0.5);
        assert_eq!(c.sinkhorn.objective_kind, ObjectiveKind::RegularizedObjective);
        assert_eq!(c.methods, vec![Method::CoreOos, Method::L2Knn]);
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(matches!(raw("[dataset]\ncsv = a\nbogus = 1\n"), Err(Error::Usage(_))));
        assert!(matches!(raw("[dataset]\ncsv = a\n[transport]\nepsilon = abc\n"), Err(Error::Usage(_))));
        assert!(matches!(raw("[dataset]\ncsv = a\n[split]\ntrain = 3\n"), Err(Error::Usage(_))));
        assert!(matches!(raw("[dataset]\nimages = a\n"), Err(Error::Usage(_))));
    }

    #[test]
    fn env_overrides_paths_only() {
        let mut r = RawConfig::from_str_with_base("[dataset]\ncsv = a.csv\n", PathBuf::new()).unwrap();
        r.apply_env(|k| (k == "WEXP_CSV").then(|| "/elsewhere.csv".to_string()));
        let c = r.resolve().unwrap();
        assert_eq!(c.dataset, DatasetSource::Csv { path: "/elsewhere.csv".into() });
    }

    #[test]
    fn log_grid_endpoints() {
        let g = LogGrid {
            min: 0.01,
            max: 1e4,
            points: 13,
        };
        let v = g.values();
        assert_eq!(v.len(), 13);
        assert_eq!(v[0], 0.01);
        assert_eq!(v[12], 1e4);
        assert!((v[4] - 1.0).abs() < 1e-12);
    }
}
