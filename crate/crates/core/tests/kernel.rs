use std::sync::Arc;

use proptest::prelude::*;
use wexp_core::kernel::{cross_gram, gram, kernel_value, KernelKind, KernelSpec};
use wexp_core::measure::{build_ground_cost, image_to_measure, DiscreteMeasure, GrayImage, GroundCost, PixelGrid};
use wexp_core::spectral::eigenvalues;
use wexp_core::transport::{sinkhorn_summary, ObjectiveKind, SinkhornConfig};

const KINDS: [KernelKind; 3] = [
    KernelKind::WassersteinExp,
    KernelKind::ReweightedWassersteinExp,
    KernelKind::EuclideanRbf,
];

fn setup(images: &[Vec<f64>]) -> (Vec<DiscreteMeasure>, Vec<GrayImage>, GroundCost) {
    let grid = Arc::new(PixelGrid::pixel(3, 3).unwrap());
    let imgs: Vec<GrayImage> = images.iter().map(|p| GrayImage::new(3, 3, p.clone()).unwrap()).collect();
    let m = imgs.iter().map(|i| image_to_measure(i, &grid).unwrap()).collect();
    (m, imgs, build_ground_cost(&grid, &grid))
}

fn spec(kind: KernelKind, sigma: f64) -> KernelSpec {
    KernelSpec::new(
        kind,
        sigma,
        SinkhornConfig::default().with_objective(ObjectiveKind::TransportCostOnly),
    )
}

fn image_set(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 9), n)
        .prop_filter("nonzero images", |v| v.iter().all(|p| p.iter().sum::<f64>() > 0.5))
}

#[test]
fn single_point_gram_is_one() {
    let (m, _, cost) = setup(&[vec![1.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0]]);
    let g = gram(&m, &spec(KernelKind::WassersteinExp, 1.0), &cost).unwrap();
    assert_eq!(g.entries.as_slice(), &[1.0]);
    assert!(g.diagonal_zeroed);
}

#[test]
fn reweighted_self_value_is_squared_mass() {
    let (m, _, cost) = setup(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]]);
    let v = kernel_value(&m[0], &m[0], &spec(KernelKind::ReweightedWassersteinExp, 0.7), &cost).unwrap();
    assert_eq!(v, 16.0);
}

#[test]
fn cross_gram_of_a_set_with_itself_matches_gram() {
    let (m, _, cost) = setup(&[
        vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        vec![3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0],
    ]);
    let s = spec(KernelKind::WassersteinExp, 1.5);
    let g = gram(&m, &s, &cost).unwrap();
    let other: Vec<DiscreteMeasure> = m.clone();
    let (k, _) = cross_gram(&other, &m, &s, &cost).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert_eq!(k[(i, j)], g.entries[(i, j)]);
            }
        }
        // The self objective is floored, so the solved diagonal is close to one.
        assert!(k[(i, i)] > 0.99 && k[(i, i)] <= 1.0);
    }
    let (row, _) = cross_gram(&m[..1], &m, &s, &cost).unwrap();
    assert_eq!(row.shape(), (1, 3));
    assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gram_matches_single_evaluations(images in image_set(6), sigma in 0.3f64..5.0, kind in proptest::sample::select(KINDS.to_vec())) {
        let (m, _, cost) = setup(&images);
        let s = spec(kind, sigma);
        let g = gram(&m, &s, &cost).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                prop_assert_eq!(g.entries[(i, j)], g.entries[(j, i)]);
                if i != j {
                    let v = kernel_value(&m[i], &m[j], &s, &cost).unwrap();
                    prop_assert_eq!(g.entries[(i, j)].to_bits(), v.to_bits());
                }
            }
            let diag = g.entries[(i, i)];
            match kind {
                KernelKind::ReweightedWassersteinExp => {
                    let mass = m[i].mass_original();
                    prop_assert!((diag - mass * mass).abs() <= 1e-12 * mass * mass);
                }
                _ => prop_assert_eq!(diag, 1.0),
            }
            if kind != KernelKind::ReweightedWassersteinExp {
                prop_assert!(g.entries.row(i).iter().all(|&x| x > 0.0 && x <= 1.0));
            }
        }
    }

    #[test]
    fn kernel_increases_with_sigma(images in image_set(2), sigma in 0.5f64..5.0, kind in proptest::sample::select(KINDS.to_vec())) {
        let (m, _, cost) = setup(&images);
        let narrow = kernel_value(&m[0], &m[1], &spec(kind, sigma / 2.0), &cost).unwrap();
        let wide = kernel_value(&m[0], &m[1], &spec(kind, sigma), &cost).unwrap();
        let d = match kind {
            KernelKind::EuclideanRbf => images[0].iter().zip(&images[1]).map(|(a, b)| (a - b).powi(2)).sum(),
            _ => sinkhorn_summary(&m[0], &m[1], &cost, &spec(kind, sigma).sinkhorn).unwrap().objective,
        };
        prop_assume!(d > 1e-6);
        prop_assert!(narrow < wide, "{narrow} !< {wide}");
    }

    #[test]
    fn reweighted_kernel_scales_with_mass(images in image_set(2), c in 0.1f64..10.0) {
        let (m, imgs, cost) = setup(&images);
        let grid = Arc::clone(m[0].support());
        let scaled = image_to_measure(&imgs[0].scaled(c).unwrap(), &grid).unwrap();
        let s = spec(KernelKind::ReweightedWassersteinExp, 2.0);
        let base = kernel_value(&m[0], &m[1], &s, &cost).unwrap();
        let v = kernel_value(&scaled, &m[1], &s, &cost).unwrap();
        prop_assert!((v - c * base).abs() <= 1e-10 * (1.0 + c * base));
    }

    #[test]
    fn rbf_gram_is_psd(images in image_set(10), sigma in 0.5f64..30.0) {
        let (m, _, cost) = setup(&images);
        let g = gram(&m, &spec(KernelKind::EuclideanRbf, sigma), &cost).unwrap();
        let ev = eigenvalues(&g.entries).unwrap();
        prop_assert!(*ev.last().unwrap() >= -1e-8 * ev[0]);
    }
}

#[test]
fn sigma_must_be_positive() {
    let (m, _, cost) = setup(&[vec![1.0; 9]]);
    for sigma in [0.0, -1.0, f64::NAN] {
        let err = kernel_value(&m[0], &m[0], &spec(KernelKind::WassersteinExp, sigma), &cost);
        assert!(matches!(err, Err(wexp_core::Error::Usage(_))));
    }
}
