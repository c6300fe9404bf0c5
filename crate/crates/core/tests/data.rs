use guidegan_core::config::{DataConfig, SyntheticConfig};
use guidegan_core::data::{
    epoch_pairs, generate_synthetic, prepare, preprocess, Augment, Dataset, Domain, Preprocess, Split, SyntheticSpec,
};
use guidegan_core::Error;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    RgbImage::from_fn(w, h, |_, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        Rgb([s as u8, (s >> 8) as u8, (s >> 16) as u8])
    })
}

fn spec(count: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec::from(&SyntheticConfig {
        train_per_domain: count,
        test_per_domain: 2,
        image_size: 16,
        seed,
        ..SyntheticConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn preprocess_range_and_shape(w in 8u32..48, h in 8u32..48, seed in any::<u64>(), train in any::<bool>()) {
        let p = Preprocess { image_size: 16, resize_to: 18 };
        let t = preprocess(&noise_image(w, h, seed), p, train, seed);
        prop_assert_eq!(t.shape(), &[3, 16, 16]);
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn flip_is_an_exact_mirror(seed in any::<u64>(), x in 0usize..5, y in 0usize..5) {
        let p = Preprocess { image_size: 16, resize_to: 20 };
        let resized = p.resize(&noise_image(32, 32, seed));
        let plain = p.crop(&resized, Augment { x, y, flip: false });
        let flipped = p.crop(&resized, Augment { x, y, flip: true });
        prop_assert!(flipped.bit_eq(&plain.flip_last()));
    }
}

#[test]
fn full_scale_geometry() {
    let p = Preprocess { image_size: 256, resize_to: 286 };
    assert_eq!(preprocess(&noise_image(300, 200, 1), p, true, 9).shape(), [3, 256, 256]);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_is_seeded() {
    let p = Preprocess { image_size: 16, resize_to: 20 };
    let raw = noise_image(24, 24, 3);
    assert!(preprocess(&raw, p, false, 1).bit_eq(&preprocess(&raw, p, false, 2)));
    assert!(preprocess(&raw, p, true, 5).bit_eq(&preprocess(&raw, p, true, 5)));
    let draws: Vec<_> = (0..32).map(|s| p.random(s, true)).collect();
    assert!(draws.iter().any(|a| a.flip) && draws.iter().any(|a| !a.flip));
    assert!(draws.iter().all(|a| a.x <= 4 && a.y <= 4));
    assert!(draws.iter().all(|a| !p.random(a.x as u64, false).flip));
}

#[test]
fn epoch_length_is_the_larger_domain_with_wraparound() {
    let pairs = epoch_pairs(3, 2, 4, 0);
    assert_eq!(pairs.len(), 3);
    let mut a: Vec<_> = pairs.iter().map(|p| p.0).collect();
    a.sort();
    assert_eq!(a, [0, 1, 2]);
    assert!(pairs.iter().all(|p| p.1 < 2));
    assert_eq!(epoch_pairs(3, 2, 4, 0), pairs);
    assert_eq!(epoch_pairs(2, 5, 4, 1).len(), 5);
}

#[test]
fn synthetic_generation_counts_and_determinism() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = spec(10, 11);
    generate_synthetic(&s, d1.path()).unwrap();
    generate_synthetic(&s, d2.path()).unwrap();
    for split in [Split::Train, Split::Test] {
        for dom in [Domain::A, Domain::B] {
            let dir = split.dir(dom);
            let mut names: Vec<_> = std::fs::read_dir(d1.path().join(&dir)).unwrap().map(|e| e.unwrap().file_name()).collect();
            names.sort();
            let expected = if split == Split::Train { 10 } else { 2 };
            assert_eq!(names.len(), expected);
            for n in names {
                let a = std::fs::read(d1.path().join(&dir).join(&n)).unwrap();
                let b = std::fs::read(d2.path().join(&dir).join(&n)).unwrap();
                assert_eq!(a, b);
            }
        }
    }
    let recorded: SyntheticSpec = serde_json::from_slice(&std::fs::read(d1.path().join("synthetic.json")).unwrap()).unwrap();
    assert_eq!(recorded, s);
}

#[test]
fn domains_differ_in_color_only() {
    let s = spec(200, 12);
    let stats = |d: Domain| {
        let (mut red, mut blue) = (0.0, 0.0);
        for i in 0..40 {
            for px in s.render(d, Split::Train, i).pixels() {
                red += f64::from(px[0]);
                blue += f64::from(px[2]);
            }
        }
        (red, blue)
    };
    let (ra, ba) = stats(Domain::A);
    let (rb, bb) = stats(Domain::B);
    assert!(ra > rb && bb > ba);
    // same geometry distribution: mean foreground area agrees across domains
    let area = |d: Domain| {
        (0..200)
            .map(|i| s.render(d, Split::Train, i).pixels().filter(|p| p[0] != p[1] || p[1] != p[2]).count() as f64)
            .sum::<f64>()
            / 200.0
    };
    let (aa, ab) = (area(Domain::A), area(Domain::B));
    assert!((aa - ab).abs() / aa < 0.1, "{aa} vs {ab}");
}

#[test]
fn loading_reports_empty_or_missing_directories() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("trainA")).unwrap();
    std::fs::create_dir_all(dir.path().join("trainB")).unwrap();
    let cfg = DataConfig::default();
    let msg = match Dataset::load(dir.path(), &cfg) {
        Err(e @ Error::Dataset(_)) => e.to_string(),
        other => panic!("unexpected {other:?}"),
    };
    assert!(msg.contains("trainA"), "{msg}");
    let missing = tempfile::tempdir().unwrap();
    assert!(Dataset::load(missing.path(), &cfg).is_err());
}

#[test]
fn undecodable_images_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["trainA", "trainB"] {
        std::fs::create_dir_all(dir.path().join(d)).unwrap();
        noise_image(8, 8, 1).save(dir.path().join(d).join("ok.png")).unwrap();
    }
    std::fs::write(dir.path().join("trainA/broken.png"), b"not a png").unwrap();
    let mut cfg = DataConfig::default();
    cfg.image_size = 8;
    cfg.resize_to = 8;
    assert!(matches!(Dataset::load(dir.path(), &cfg), Err(Error::Image { .. })));
}

#[test]
fn prepare_generates_once_and_rejects_a_different_spec() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("syn");
    let mut cfg = DataConfig::default();
    cfg.root = Some(root.clone());
    cfg.synthetic = Some(SyntheticConfig { train_per_domain: 3, test_per_domain: 2, ..SyntheticConfig::default() });
    prepare(&cfg).unwrap();
    let ds = Dataset::load(&root, &cfg).unwrap();
    assert_eq!((ds.train_a.len(), ds.train_b.len(), ds.epoch_len()), (3, 3, 3));
    assert_eq!(ds.test(Domain::B).unwrap().len(), 2);
    prepare(&cfg).unwrap();
    cfg.synthetic.as_mut().unwrap().seed += 1;
    assert!(prepare(&cfg).is_err());
}

#[test]
fn train_pairs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = DataConfig::default();
    cfg.root = Some(dir.path().to_path_buf());
    cfg.synthetic = Some(SyntheticConfig { train_per_domain: 4, test_per_domain: 2, ..SyntheticConfig::default() });
    prepare(&cfg).unwrap();
    let ds = Dataset::load(dir.path(), &cfg).unwrap();
    let (a1, b1) = ds.train_pair(5, 2, 1);
    let (a2, b2) = ds.train_pair(5, 2, 1);
    assert!(a1.pixels.bit_eq(&a2.pixels) && b1.pixels.bit_eq(&b2.pixels));
    assert_eq!((a1.domain, b1.domain), (Domain::A, Domain::B));
}
