mod support;

use physdiff_core::image::Image;
use physdiff_core::metrics::{evaluate, mean_report, psnr, ssim, uciqe, uiqm};
use support::random_image;

fn close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: library {a} vs oracle {b}");
}

#[test]
fn matches_brute_force_on_twenty_random_images() {
    for seed in 0..20 {
        let (h, w) = (24 + (seed as usize % 3) * 5, 20 + (seed as usize % 4) * 6);
        let a = random_image(h, w, seed);
        let b = random_image(h, w, seed + 100);
        close(psnr(&a, &b).unwrap(), support::psnr(&a, &b), 1e-6, "psnr");
        close(ssim(&a, &b).unwrap(), support::ssim(&a, &b), 1e-4, "ssim");
        close(uciqe(&a), support::uciqe(&a), 1e-3, "uciqe");
        let q = uiqm(&a).unwrap();
        close(q.uicm, support::uicm(&a), 1e-3, "uicm");
        close(q.uism, support::uism(&a), 1e-3, "uism");
        close(q.uiconm, support::uiconm(&a), 1e-3, "uiconm");
        close(q.uiqm, support::uiqm(&a), 1e-3, "uiqm");
    }
}

#[test]
fn psnr_hand_values() {
    let zero = Image::filled(4, 4, [0.0; 3]).unwrap();
    let one = Image::filled(4, 4, [1.0; 3]).unwrap();
    let tenth = Image::filled(4, 4, [0.1; 3]).unwrap();
    assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
    close(psnr(&zero, &tenth).unwrap(), 20.0, 1e-9, "mse 0.01");
    assert_eq!(psnr(&one, &one).unwrap(), f64::INFINITY);
}

#[test]
fn identical_images_score_perfectly() {
    let a = random_image(32, 32, 7);
    let r = evaluate(&a, Some(&a)).unwrap();
    assert_eq!(r.psnr, Some(f64::INFINITY));
    close(r.ssim.unwrap(), 1.0, 1e-12, "ssim");
}

#[test]
fn constant_grey_is_degenerate_but_finite() {
    let g = Image::filled(16, 16, [0.5; 3]).unwrap();
    assert!(uciqe(&g).abs() < 1e-6);
    let q = uiqm(&g).unwrap();
    assert_eq!(q.uism, 0.0);
    assert_eq!(q.uiconm, 0.0);
    assert!(q.uicm.abs() < 1e-9);
}

#[test]
fn no_reference_report_leaves_full_reference_fields_empty() {
    let reports: Vec<_> = (0..3).map(|s| evaluate(&random_image(16, 16, s), None).unwrap()).collect();
    let m = mean_report(&reports).unwrap();
    assert_eq!((m.psnr, m.ssim), (None, None));
    let want = reports.iter().map(|r| r.uiqm).sum::<f64>() / 3.0;
    close(m.uiqm, want, 1e-12, "mean uiqm");
}
