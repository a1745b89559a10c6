mod support;

use physdiff_core::autograd::{Graph, Var};
use physdiff_core::dataset::{
    load_image, synth_degrade, write_synthetic, DepthModel, PairedDataset, Range, SynthesisConfig,
};
use physdiff_core::image::Image;
use physdiff_core::metrics::psnr;
use physdiff_core::networks::{phi_from_parts, ModelBundle, ModelConfig};
use physdiff_core::physics::{
    degrade_unclamped, inverse_transmission, restore_unclamped, AmbientLight, AttenuationParams, Depth,
};
use physdiff_core::schedule::q_sample_items;
use physdiff_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::random_image;

#[test]
fn restore_inverts_degrade_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..100 {
        let img = random_image(16, 16, seed);
        let ambient = AmbientLight::new([0; 3].map(|_: i32| rng.random_range(0.05..0.95))).unwrap();
        let beta = [0; 3].map(|_: i32| rng.random_range(0.01..1.0));
        let depth = if seed % 2 == 0 {
            Depth::Uniform(rng.random_range(0.0..10.0))
        } else {
            let values = (0..256).map(|_| rng.random_range(0.0..10.0)).collect();
            Depth::Map { height: 16, width: 16, values }
        };
        let params = AttenuationParams::matched(beta, depth);
        let raw = degrade_unclamped(img.data(), (16, 16), &ambient, &params).unwrap();
        let inv = inverse_transmission(&params, 16, 16).unwrap();
        let back = restore_unclamped(&raw, (16, 16), &ambient, &inv).unwrap();
        let err = back.iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "image {seed}: max error {err}");
    }
}

#[test]
fn manifest_parameters_restore_the_written_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let clean: Vec<(String, Image)> = (0..6).map(|i| (format!("img{i}"), random_image(24, 24, i))).collect();
    let cfg =
        SynthesisConfig { depth: DepthModel::Scalar { range: Range(0.5, 2.5) }, seed: 9, ..SynthesisConfig::default() };
    let pairs = synth_degrade(&clean, &cfg).unwrap();
    let ds = write_synthetic(dir.path(), &pairs).unwrap();
    let reopened = PairedDataset::open(dir.path()).unwrap();
    assert_eq!(ds, reopened);
    let manifest = reopened.read_manifest().unwrap();
    assert_eq!(manifest.len(), 6);
    for (entry, paths) in manifest.iter().zip(&reopened.pairs) {
        assert_eq!(entry.stem, paths.stem);
        let raw = load_image(&paths.raw).unwrap();
        let reference = load_image(&paths.reference).unwrap();
        let (h, w) = raw.dims();
        let params = entry.params(h, w);
        let inv = inverse_transmission(&params, h, w).unwrap();
        let restored = restore_unclamped(raw.data(), (h, w), &entry.ambient().unwrap(), &inv).unwrap();
        let restored = Image::from_unclamped(h, w, restored).unwrap();
        let p = psnr(&restored, &reference).unwrap();
        assert!(p >= 40.0, "{}: {p:.2} dB", entry.stem);
    }
}

#[test]
fn fixed_seed_synthesis_is_reproducible_and_zero_depth_is_identity() {
    let clean: Vec<(String, Image)> = (0..3).map(|i| (format!("{i}"), random_image(16, 16, i))).collect();
    let cfg = SynthesisConfig::default();
    let a = synth_degrade(&clean, &cfg).unwrap();
    let b = synth_degrade(&clean, &cfg).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.raw, q.raw);
        assert_eq!(p.entry, q.entry);
    }
    let flat = SynthesisConfig { depth: DepthModel::Scalar { range: Range(0.0, 0.0) }, ..cfg };
    for p in synth_degrade(&clean, &flat).unwrap() {
        assert_eq!(p.raw, p.reference);
    }
}

/// With the true A, T and noise, the transform reproduces the diffused clean image.
#[test]
fn phi_with_oracle_physics_equals_diffused_clean_image() {
    let bundle = ModelBundle::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let s = bundle.schedule();
    let clean = random_image(16, 16, 42);
    let ambient = AmbientLight::new([0.2, 0.45, 0.5]).unwrap();
    let params = AttenuationParams::matched([0.6, 0.25, 0.15], Depth::Uniform(2.0));
    let raw = degrade_unclamped(clean.data(), (16, 16), &ambient, &params).unwrap();
    let inv = inverse_transmission(&params, 16, 16).unwrap();
    let restored = restore_unclamped(&raw, (16, 16), &ambient, &inv).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::from_fn(vec![1, 3, 16, 16], |_| rng.sample(StandardNormal));
    let y0 = clean.to_tensor::<f64>();
    for t in [1, 25, 50] {
        let want = q_sample_items(&y0, &[t], &z, s).unwrap();
        let mut g = Graph::<f64>::inference();
        let r = Var::constant(Tensor::new(vec![1, 3, 16, 16], restored.clone()));
        let got = phi_from_parts(&mut g, &r, &Var::constant(z.clone()), &[t], s).to_tensor();
        assert!(got.max_abs_diff(&want) < 1e-9, "t={t}");
    }
}
