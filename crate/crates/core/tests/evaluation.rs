use std::fs;
use std::path::{Path, PathBuf};

use slwsr::eval::bench::{dataset_files, degrade};
use slwsr::eval::{evaluate_dataset, score, Bicubic, Upscaler};
use slwsr::imageio::{read_png, write_png};
use slwsr::{Shape, Tensor};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/train")
}

#[test]
fn identical_images_score_the_sentinel() {
    let img = read_png(&fixtures().join("coffee.png")).unwrap();
    let (p, s) = score(&img, &img, 4).unwrap();
    assert_eq!(p, 99.0);
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn bicubic_beats_a_flat_guess() {
    let hr = read_png(&fixtures().join("astronaut.png")).unwrap();
    let lr = degrade(&hr, 4).unwrap();
    assert_eq!(lr.shape(), Shape::new(1, 3, 64, 64));
    let up = Bicubic { scale: 4 }.upscale(&lr).unwrap();
    let flat = Tensor::full(hr.shape(), 0.5f32);
    let (bp, bs) = score(&up, &hr, 4).unwrap();
    let (fp, fs) = score(&flat, &hr, 4).unwrap();
    assert!(bp > fp + 5.0, "{bp} vs {fp}");
    assert!(bs > fs);
    assert!(bp > 20.0 && bp < 40.0);
}

#[test]
fn report_means_are_arithmetic_means() {
    let report = evaluate_dataset(&Bicubic { scale: 4 }, &fixtures(), "fixtures", "bicubic", false).unwrap();
    assert_eq!(report.images.len(), 2);
    let mean = report.images.iter().map(|s| s.psnr).sum::<f64>() / 2.0;
    assert!((report.mean_psnr() - mean).abs() < 1e-12);
    assert!(report.images.iter().all(|s| s.psnr.is_finite() && s.ssim <= 1.0));
}

#[test]
fn metrics_are_symmetric_and_degrade_with_noise() {
    let hr = read_png(&fixtures().join("coffee.png")).unwrap();
    let noisy = |amp: f32| {
        let mut k = 0u32;
        let data = hr
            .data()
            .iter()
            .map(|v| {
                k = k.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                (v + amp * ((k >> 8) as f32 / (1u32 << 24) as f32 - 0.5)).clamp(0.0, 1.0)
            })
            .collect();
        Tensor::new(hr.shape(), data).unwrap()
    };
    let (a, b) = (noisy(0.05), noisy(0.2));
    let (pa, sa) = score(&a, &hr, 4).unwrap();
    let (pb, sb) = score(&b, &hr, 4).unwrap();
    assert_eq!((pa, sa), score(&hr, &a, 4).unwrap());
    assert!(pa > pb && sa > sb);
}

#[test]
fn dataset_listing_prefers_hr_subdirectory_and_skips_other_files() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("HR");
    let img = Tensor::full(Shape::new(1, 3, 8, 8), 0.25f32);
    write_png(&hr.join("b.png"), &img).unwrap();
    write_png(&hr.join("a.png"), &img).unwrap();
    write_png(&dir.path().join("LR.png"), &img).unwrap();
    fs::write(hr.join("readme.txt"), "x").unwrap();
    let names: Vec<_> = dataset_files(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png"]);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let err = dataset_files(Path::new("/nonexistent/Set5")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
