#![allow(dead_code)]

use std::path::{Path, PathBuf};

use wexp_cli::config::{ExperimentConfig, RawConfig};

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Config text reading the bundled MNIST files, writing under `dir`.
pub fn config_text(dir: &Path, body: &str) -> String {
    let data = mnist_dir();
    format!(
        "[dataset]\nimages = {}\nlabels = {}\n{body}\n[output]\ndir = {}\ncache = {}\n",
        data.join("digits-10k-images-idx3-ubyte.gz").display(),
        data.join("digits-10k-labels-idx1-ubyte.gz").display(),
        dir.join("out").display(),
        dir.join("cache").display(),
    )
}

pub fn config(dir: &Path, body: &str) -> ExperimentConfig {
    RawConfig::from_str_with_base(&config_text(dir, body), dir.to_path_buf())
        .unwrap()
        .resolve()
        .unwrap()
}

/// A small split with every method.
pub const SMALL_RUN: &str = "[split]\ntrain = 20\nvalidation = 10\ntest = 10\ncore = 10\nseeds = 3, 4\n\
[transport]\nobjective = transport-cost\ncoordinates = pixel\n\
[methods]\nmethods = core, core-oos, indefinite, rbf, wass-knn, l2-knn\n\
sigma_points = 3\ngamma_points = 3\nk_grid = 1, 3\n";
