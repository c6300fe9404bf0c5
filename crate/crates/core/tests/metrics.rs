use guidegan_core::config::KidMode;
use guidegan_core::metrics::extractor::DESK_EXTRACTOR_SEED;
use guidegan_core::metrics::kid::KidReport;
use guidegan_core::metrics::subsample::{distance_blocks, distances_to_mean};
use guidegan_core::metrics::{
    embed_images, format_kid_table, kid_score, mmd2_unbiased, subsample_dataset, DeskExtractor, EmbeddingSet, Extractor,
};
use guidegan_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(rows: Vec<Vec<f64>>) -> EmbeddingSet {
    EmbeddingSet::new(rows, "test").unwrap()
}

fn oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| {
        let mut dot = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
        }
        (dot / d + 1.0).powi(3)
    };
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += k(&x[i], &x[j]);
            }
        }
    }
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += k(&y[i], &y[j]);
            }
        }
    }
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    kxx / (n * (n - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (n * m)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| normal(rng) + shift).collect::<Vec<f64>>())
        .collect()
}

#[test]
fn mmd_hand_examples() {
    let p = vec![0.3, -1.0];
    assert_eq!(mmd2_unbiased(&set(vec![p.clone(), p.clone()]), &set(vec![p.clone(), p])).unwrap(), 0.0);
    let x = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let y = set(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
    assert_eq!(mmd2_unbiased(&x, &y).unwrap(), 0.0);
    let zeros = set(vec![vec![0.0, 0.0]; 2]);
    let ones = set(vec![vec![1.0, 1.0]; 2]);
    assert_eq!(mmd2_unbiased(&zeros, &ones).unwrap(), 7.0);
}

#[test]
fn mmd_rejects_small_or_mismatched_sets() {
    let one = set(vec![vec![1.0]]);
    let two = set(vec![vec![1.0], vec![2.0]]);
    assert!(mmd2_unbiased(&one, &two).is_err());
    let wide = set(vec![vec![1.0, 0.0], vec![2.0, 0.0]]);
    assert!(mmd2_unbiased(&wide, &two).is_err());
}

#[test]
fn mmd_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (n, m, d) = (rng.random_range(2..=20), rng.random_range(2..=20), rng.random_range(1..=8));
        let x = gaussian(&mut rng, n, d, 0.0);
        let y = gaussian(&mut rng, m, d, 0.5);
        let got = mmd2_unbiased(&set(x.clone()), &set(y.clone())).unwrap();
        assert!((got - oracle(&x, &y)).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mmd_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = set(gaussian(&mut rng, 7, 3, 0.0));
        let y = set(gaussian(&mut rng, 9, 3, 1.0));
        let (a, b) = (mmd2_unbiased(&x, &y).unwrap(), mmd2_unbiased(&y, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kid_is_invariant_to_row_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fake = gaussian(&mut rng, 30, 4, 0.3);
        let real = gaussian(&mut rng, 30, 4, 0.0);
        let mut fake_p = fake.clone();
        let mut real_p = real.clone();
        rand::seq::SliceRandom::shuffle(fake_p.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(real_p.as_mut_slice(), &mut rng);
        let run = |f: Vec<Vec<f64>>, r: Vec<Vec<f64>>| {
            kid_score("A->B", &set(f), &set(r), None, KidMode::TargetOnly, 10, 5, 3).unwrap()
        };
        prop_assert_eq!(run(fake, real), run(fake_p, real_p));
    }
}

#[test]
fn kid_same_distribution_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cloud = gaussian(&mut rng, 2000, 8, 0.0);
    let (fake, real) = cloud.split_at(1000);
    let r = kid_score("A->B", &set(fake.to_vec()), &set(real.to_vec()), None, KidMode::TargetOnly, 100, 50, 0).unwrap();
    assert!(r.std > 0.0);
    assert!(r.mean.abs() < 3.0 * r.std, "{r:?}");
}

#[test]
fn kid_increases_with_mean_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let real = set(gaussian(&mut rng, 500, 8, 0.0));
    let base = gaussian(&mut rng, 500, 8, 0.0);
    let means: Vec<f64> = [0.0, 1.0, 2.0]
        .iter()
        .map(|&s| {
            let fake: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|v| v + s).collect()).collect();
            kid_score("A->B", &set(fake), &real, None, KidMode::TargetOnly, 100, 10, 0).unwrap().mean
        })
        .collect();
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}

#[test]
fn kid_protocol_details() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let fake = set(gaussian(&mut rng, 20, 3, 1.0));
    let tgt = set(gaussian(&mut rng, 20, 3, 0.0));
    let src = set(gaussian(&mut rng, 20, 3, 2.0));
    let one = kid_score("A->B", &fake, &tgt, None, KidMode::TargetOnly, 10, 1, 0).unwrap();
    assert_eq!(one.std, 0.0);
    // the full set as the only subset is the plain estimator, x 100
    let all = kid_score("A->B", &fake, &tgt, None, KidMode::TargetOnly, 20, 3, 0).unwrap();
    assert!((all.mean - 100.0 * mmd2_unbiased(&fake, &tgt).unwrap()).abs() < 1e-9);
    let both = kid_score("A->B", &fake, &tgt, Some(&src), KidMode::BothDomains, 15, 4, 0).unwrap();
    assert_eq!(both.mode, KidMode::BothDomains);
    assert!(kid_score("A->B", &fake, &tgt, None, KidMode::BothDomains, 10, 4, 0).is_err());
    assert!(kid_score("A->B", &fake, &tgt, None, KidMode::TargetOnly, 21, 4, 0).is_err());
    assert!(kid_score("A->B", &fake, &tgt, None, KidMode::TargetOnly, 1, 4, 0).is_err());
    let other = EmbeddingSet::new(tgt.rows().to_vec(), "other").unwrap();
    assert!(kid_score("A->B", &fake, &other, None, KidMode::TargetOnly, 10, 4, 0).is_err());
}

#[test]
fn kid_table_lists_every_row_and_direction() {
    let report = |dir: &str, mean: f64| KidReport {
        direction: dir.into(),
        mode: KidMode::TargetOnly,
        mean,
        std: 0.5,
        subset_size: 25,
        num_subsets: 10,
        extractor_id: "x".into(),
    };
    let rows = vec![
        ("CycleGAN".to_string(), vec![report("A->B", 3.25), report("B->A", 1.5)]),
        ("+ guidance".to_string(), vec![report("A->B", 2.0)]),
    ];
    let t = format_kid_table("ablation", &["A->B", "B->A"], &rows);
    assert_eq!(t.lines().count(), 6);
    assert!(t.contains("CycleGAN") && t.contains("3.25 ± 0.50") && t.contains(" - "));
}

// ---- extractor --------------------------------------------------------------

fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &Tensor<f64>, b: &Tensor<f64>) -> (Vec<f64>, usize, usize) {
    let (o, k) = (wt.shape()[0], wt.shape()[2]);
    let (oh, ow) = ((h + 2 - k) / 2 + 1, (w + 2 - k) / 2 + 1);
    let mut y = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for u in 0..k {
                        for v in 0..k {
                            let (r, q) = ((i * 2 + u) as isize - 1, (j * 2 + v) as isize - 1);
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                s += wt.data()[((oc * c + ic) * k + u) * k + v] * x[(ic * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                }
                y[(oc * oh + i) * ow + j] = s.max(0.0);
            }
        }
    }
    (y, oh, ow)
}

fn pool(y: &[f64], c: usize) -> Vec<f64> {
    let n = y.len() / c;
    (0..c).map(|i| y[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect()
}

#[test]
fn desk_extractor_zero_image_signature() {
    let ex = DeskExtractor::default();
    assert_eq!(ex.seed, DESK_EXTRACTOR_SEED);
    assert_eq!(ex.id(), format!("desk-randconv-48-v1-seed{DESK_EXTRACTOR_SEED}"));
    let zero = vec![0.0; 3 * 32 * 32];
    let (h1, a, b) = naive_conv(&zero, 3, 32, 32, &ex.w1, &ex.b1);
    let (h2, _, _) = naive_conv(&h1, 16, a, b, &ex.w2, &ex.b2);
    let mut expected = pool(&h1, 16);
    expected.extend(pool(&h2, 32));
    // first block is relu(b1) exactly
    for (e, b) in expected.iter().zip(ex.b1.data()) {
        assert!((e - b.max(0.0)).abs() < 1e-15);
    }
    let got = ex.embed(&Tensor::zeros(vec![3, 32, 32])).unwrap();
    assert_eq!(got.len(), 48);
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn embedding_rows_follow_images() {
    let ex = DeskExtractor::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f32>::uniform(vec![3, 16, 16], -1.0, 1.0, &mut rng);
    let b = Tensor::<f32>::uniform(vec![3, 16, 16], -1.0, 1.0, &mut rng);
    let e = embed_images([&a, &b, &a], &ex).unwrap();
    assert_eq!((e.len(), e.dim()), (3, 48));
    assert_eq!(e.rows()[0], e.rows()[2]);
    assert_ne!(e.rows()[0], e.rows()[1]);
    assert!(ex.embed(&Tensor::zeros(vec![1, 16, 16])).is_err());
}

#[test]
fn embedding_sets_validate_and_round_trip() {
    assert!(EmbeddingSet::new(vec![vec![1.0, 2.0], vec![1.0]], "x").is_err());
    assert!(EmbeddingSet::new(vec![vec![f64::NAN]], "x").is_err());
    let dir = tempfile::tempdir().unwrap();
    let e = EmbeddingSet::new(vec![vec![1.0, -2.5], vec![0.125, 3.0]], "desk").unwrap();
    let names = vec!["a.png".to_string(), "b.png".to_string()];
    let path = dir.path().join("emb.gga");
    e.save(&path, &names).unwrap();
    let (back, back_names) = EmbeddingSet::load(&path).unwrap();
    assert_eq!(back, e);
    assert_eq!(back_names, names);
}

// ---- subsampling ------------------------------------------------------------

fn line(xs: &[f64]) -> EmbeddingSet {
    set(xs.iter().map(|&x| vec![x]).collect())
}

#[test]
fn subsample_micro_case_against_hand_sorted_order() {
    let e = line(&[0.0, 1.0, 2.0, 3.0, 10.0]);
    let d = distances_to_mean(&e);
    for (got, want) in d.iter().zip([3.2, 2.2, 1.2, 0.2, 6.8]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(distance_blocks(&e, 5).unwrap(), vec![vec![3, 2, 1, 0, 4]]);
    assert_eq!(distance_blocks(&e, 1).unwrap(), vec![vec![3], vec![2], vec![1], vec![0], vec![4]]);
    assert_eq!(distance_blocks(&e, 2).unwrap(), vec![vec![3, 2], vec![1, 0, 4]]);
    assert_eq!(subsample_dataset(&e, 1, 0).unwrap(), vec![0, 1, 2, 3, 4]);
    let pick = subsample_dataset(&e, 5, 9).unwrap();
    assert_eq!(pick.len(), 1);
}

#[test]
fn subsample_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e10 = set(gaussian(&mut rng, 10, 3, 0.0));
    let picks = subsample_dataset(&e10, 5, 1).unwrap();
    assert_eq!(picks.len(), 2);
    let blocks = distance_blocks(&e10, 5).unwrap();
    for (b, block) in blocks.iter().enumerate() {
        assert_eq!(picks.iter().filter(|p| block.contains(p)).count(), 1, "block {b}");
    }
    assert_eq!(subsample_dataset(&set(gaussian(&mut rng, 5, 3, 0.0)), 5, 1).unwrap().len(), 1);
    assert!(subsample_dataset(&set(gaussian(&mut rng, 4, 3, 0.0)), 5, 1).is_err());
}

proptest! {
    #[test]
    fn subsample_is_sorted_unique_one_per_block(seed in any::<u64>(), n in 5usize..60, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = set(gaussian(&mut rng, n, 2, 0.0));
        let picks = subsample_dataset(&e, k, seed).unwrap();
        prop_assert_eq!(picks.len(), n / k);
        prop_assert!(picks.windows(2).all(|w| w[0] < w[1]));
        let d = distances_to_mean(&e);
        let blocks = distance_blocks(&e, k).unwrap();
        for pair in blocks.windows(2) {
            let hi = pair[0].iter().map(|&i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let lo = pair[1].iter().map(|&i| d[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(hi <= lo);
        }
        prop_assert_eq!(subsample_dataset(&e, k, seed).unwrap(), picks);
    }
}
