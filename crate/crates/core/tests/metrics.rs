use pixelfold::data::{load_png_folder, save_png, synth_blobs, Dataset};
use pixelfold::metrics::{
    feature_stats, frechet_from_stats, proxy_frechet, proxy_frechet_features, FeatureExtractor,
    FEATURE_DIM,
};
use pixelfold::rng::{randn, seed_rng};
use pixelfold::tensor::Tensor;

#[test]
fn identical_sets_have_zero_distance() {
    let ds: Dataset<f64> = synth_blobs(64, 16, 3).unwrap();
    let all: Vec<usize> = (0..64).collect();
    let batch = ds.batch(&all).unwrap();
    let d = proxy_frechet(&FeatureExtractor::frozen(), &ds, &batch).unwrap();
    assert!(d.abs() < 1e-6, "distance between identical sets: {d}");
}

#[test]
fn point_masses_measure_their_squared_separation() {
    let mut a = Tensor::zeros(&[40, 64]);
    let mut b = Tensor::zeros(&[40, 64]);
    for row in 0..40 {
        for j in 0..3 {
            a.data_mut()[row * 64 + j] = 1.0;
            b.data_mut()[row * 64 + j] = 3.0;
        }
    }
    let d = proxy_frechet_features(&a, &b).unwrap();
    assert!((d - 12.0).abs() < 1e-9, "expected 3 * (3-1)^2 = 12, got {d}");
}

#[test]
fn distance_is_symmetric() {
    let a: Tensor<f64> = randn(&mut seed_rng(61, "a"), &[96, FEATURE_DIM]);
    let b: Tensor<f64> = randn(&mut seed_rng(61, "b"), &[96, FEATURE_DIM]).map(|v| 0.7 * v + 0.3);
    let ab = proxy_frechet_features(&a, &b).unwrap();
    let ba = proxy_frechet_features(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
    assert!(ab >= 0.0);
}

#[test]
fn sampled_gaussians_approach_the_closed_form() {
    // N(0, I) against N(0.5, 4 I): per dimension |dmu|^2 = 0.25 and
    // (sigma_r - sigma_f)^2 = 1, so the distance is 64 * 1.25 = 80.
    let n = 4096;
    let a: Tensor<f64> = randn(&mut seed_rng(63, "a"), &[n, FEATURE_DIM]);
    let b: Tensor<f64> = randn(&mut seed_rng(63, "b"), &[n, FEATURE_DIM]).map(|v| 2.0 * v + 0.5);
    let d = proxy_frechet_features(&a, &b).unwrap();
    let analytic = FEATURE_DIM as f64 * (0.25 + 1.0);
    let rel = (d - analytic).abs() / analytic;
    assert!(rel < 0.1, "sampled {d} vs analytic {analytic} (rel {rel})");
}

#[test]
fn moment_helpers_agree_with_direct_formulas() {
    let f: Tensor<f64> = randn(&mut seed_rng(65, "f"), &[128, 4]);
    let (mu, cov) = feature_stats(&f).unwrap();
    let zero = frechet_from_stats(&mu, &cov, &mu, &cov);
    assert!(zero.abs() < 1e-9);
}

#[test]
fn png_roundtrip_preserves_quantized_images() {
    let dir = tempfile::tempdir().unwrap();
    let ds: Dataset<f64> = synth_blobs(3, 16, 77).unwrap();
    for i in 0..3 {
        save_png(&dir.path().join(format!("img_{i}.png")), ds.image(i)).unwrap();
    }
    let loaded: Dataset<f64> = load_png_folder(dir.path(), 16).unwrap();
    assert_eq!(loaded.len(), 3);

    // Quantization to 8 bits happens once on save; a second pass through
    // the codec must be exact.
    let second = tempfile::tempdir().unwrap();
    for i in 0..3 {
        save_png(&second.path().join(format!("round_{i}.png")), loaded.image(i)).unwrap();
    }
    let again: Dataset<f64> = load_png_folder(second.path(), 16).unwrap();
    for i in 0..3 {
        assert_eq!(again.image(i).data(), loaded.image(i).data(), "image {i}");
    }
}

#[test]
fn unreadable_files_are_skipped_and_empty_folders_fail() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    assert!(load_png_folder::<f64>(dir.path(), 16).is_err());

    let ds: Dataset<f64> = synth_blobs(1, 16, 1).unwrap();
    save_png(&dir.path().join("ok.png"), ds.image(0)).unwrap();
    let loaded: Dataset<f64> = load_png_folder(dir.path(), 16).unwrap();
    assert_eq!(loaded.len(), 1);
}
