use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unshadow_core::dataset::{
    augment, build_dataset, compose_images, compute_shadow_gt, generate_sample, load_sample, normalize_input,
    normalize_lighting, prepare_sample, sample_files, AugmentConfig, DatasetConfig, Manifest, ShadowGtConfig,
    TrainingSample,
};
use unshadow_core::render::RenderConfig;
use unshadow_core::scene::{generate_scene, SceneConfig};
use unshadow_core::{ImageBuffer, MaskImage};

fn configs(resolution: usize) -> (SceneConfig, DatasetConfig) {
    let mut scene = SceneConfig::default();
    scene.camera.resolution = resolution;
    scene.lighting.env_resolution = 16;
    let cfg = DatasetConfig {
        render: RenderConfig {
            samples_per_pixel: 4,
            shadow_samples: 8,
            seed: 1,
            resolution: 0,
        },
        ..DatasetConfig::default()
    };
    (scene, cfg)
}

fn sample(seed: u64) -> TrainingSample {
    let (scene_cfg, cfg) = configs(24);
    let scene = generate_scene(seed, &scene_cfg).unwrap();
    generate_sample(&scene, "scene_x", &cfg).unwrap()
}

fn joint_max(a: &ImageBuffer, b: &ImageBuffer, m: &MaskImage) -> Vec<f32> {
    let (ma, mb) = (a.masked_max(m).unwrap(), b.masked_max(m).unwrap());
    ma.iter().zip(&mb).map(|(x, y)| x.max(*y)).collect()
}

#[test]
fn generated_samples_satisfy_mask_and_normalization_identities() {
    for seed in 0..6 {
        let s = sample(seed);
        let p = prepare_sample(&s, None, &ShadowGtConfig::default()).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                assert!(!(s.m_o.is_on(y, x) && s.m_r.is_on(y, x)));
                let expected = s.m_o.get(y, x) + s.m_r.get(y, x);
                assert_eq!(s.m_r_prime.get(y, x), expected);
                let m = p.m_r.get(y, x);
                for c in 0..3 {
                    let i = (m * s.t_hat.get(y, x, c) + (1.0 - m)) * p.l.get(y, x, c);
                    assert_eq!(p.i.get(y, x, c), i);
                }
            }
        }
        for v in joint_max(&p.l, &p.l_prime, &p.m_r_prime) {
            assert!((v - 1.0).abs() <= 1e-6, "{v}");
        }
        for v in joint_max(&p.p, &p.p_prime, &p.m_r_prime) {
            assert!((v - 1.0).abs() <= 1e-6, "{v}");
        }
        let scaled = p.i.scale_channels(&p.norm.input_scale);
        for v in scaled.masked_mean(&p.m_r).unwrap() {
            assert!((v - 0.5).abs() <= 1e-6, "{v}");
        }
        assert!(s.s_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sample_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (scene_cfg, cfg) = configs(16);
    let manifest = build_dataset(dir.path(), 2, 7, &scene_cfg, &cfg).unwrap();
    assert_eq!(Manifest::load(dir.path()).unwrap(), manifest);
    assert_eq!(manifest.images.len(), 12);
    assert_eq!(manifest.images, sample_files());
    let scene = generate_scene(8, &scene_cfg).unwrap();
    let fresh = generate_sample(&scene, "scene_00001", &cfg).unwrap();
    let loaded = load_sample(dir.path(), "scene_00001").unwrap();
    assert_eq!(loaded.seed, 8);
    assert_eq!(loaded.norm, fresh.norm);
    for (a, b) in [
        (&loaded.t_hat, &fresh.t_hat),
        (&loaded.l_hat, &fresh.l_hat),
        (&loaded.l_hat_prime, &fresh.l_hat_prime),
        (&loaded.p, &fresh.p),
        (&loaded.p_prime, &fresh.p_prime),
        (&loaded.d, &fresh.d),
        (&loaded.d_prime, &fresh.d_prime),
        (&loaded.d_r, &fresh.d_r),
    ] {
        let (x, y): (Vec<u32>, Vec<u32>) = (
            a.data().iter().map(|v| v.to_bits()).collect(),
            b.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(x, y);
    }
    assert_eq!(loaded.m_o, fresh.m_o);
    assert_eq!(loaded.m_r, fresh.m_r);
    assert_eq!(loaded.m_r_prime, fresh.m_r_prime);
    assert_eq!(loaded.s_hat, fresh.s_hat);
    for entry in &manifest.scenes {
        for name in &manifest.images {
            assert!(dir.path().join(&entry.scene_id).join(name).is_file());
        }
    }
}

#[test]
fn rebuilding_a_dataset_is_byte_identical() {
    let (scene_cfg, cfg) = configs(16);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(a.path(), 2, 3, &scene_cfg, &cfg).unwrap();
    build_dataset(b.path(), 2, 3, &scene_cfg, &cfg).unwrap();
    let mut names = vec!["manifest.json".to_string()];
    for id in ["scene_00000", "scene_00001"] {
        for f in sample_files().into_iter().chain(["sample.json".into(), "scene.json".into()]) {
            names.push(format!("{id}/{f}"));
        }
    }
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn corrupted_file_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (scene_cfg, cfg) = configs(16);
    build_dataset(dir.path(), 1, 0, &scene_cfg, &cfg).unwrap();
    let path = dir.path().join("scene_00000").join("l_hat.pfm");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let err = load_sample(dir.path(), "scene_00000").unwrap_err().to_string();
    assert!(err.contains("l_hat.pfm"), "{err}");

    std::fs::remove_file(dir.path().join("scene_00000").join("m_o.png")).unwrap();
    let err = load_sample(dir.path(), "scene_00000").unwrap_err().to_string();
    assert!(err.contains("l_hat.pfm") || err.contains("m_o.png"), "{err}");
}

#[test]
fn zero_jitter_augmentation_is_identity() {
    let s = sample(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = augment(&s, &mut rng, &AugmentConfig::none()).unwrap();
    assert_eq!(out.t_hat, s.t_hat);
    assert_eq!(out.l_hat, s.l_hat);
    assert_eq!(out.l_hat_prime, s.l_hat_prime);
}

#[test]
fn augmentation_keeps_lighting_ratio_and_normalization() {
    let s = sample(3);
    let cfg = AugmentConfig {
        brightness: (2.0, 2.0),
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = augment(&s, &mut rng, &cfg).unwrap();
    assert_eq!(out.m_o, s.m_o);
    assert_eq!(out.d, s.d);
    for ((a, b), (c, d)) in s
        .l_hat
        .data()
        .iter()
        .zip(s.l_hat_prime.data())
        .zip(out.l_hat.data().iter().zip(out.l_hat_prime.data()))
    {
        if *a > 1e-3 && *c > 1e-3 {
            assert!((b / a - d / c).abs() <= 1e-5 * (b / a).abs().max(1.0), "{} vs {}", b / a, d / c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = prepare_sample(&s, Some((&mut rng, &cfg)), &ShadowGtConfig::default()).unwrap();
    for v in joint_max(&p.l, &p.l_prime, &p.m_r_prime) {
        assert!((v - 1.0).abs() <= 1e-6);
    }
    let (i, i_prime) = compose_images(&out.t_hat, &p.l, &p.l_prime, &out.m_r, &out.m_r_prime).unwrap();
    assert_eq!(i, p.i);
    assert_eq!(i_prime, p.i_hat_prime);
}

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.01f32..4.0, w * h * 3).prop_map(move |v| ImageBuffer::from_vec(w, h, 3, v).unwrap())
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = MaskImage> {
    prop::collection::vec(prop::bool::weighted(0.7), w * h).prop_map(move |v| {
        let mut data: Vec<f32> = v.into_iter().map(|b| b as u8 as f32).collect();
        data[0] = 1.0;
        MaskImage::from_vec(w, h, data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lighting_normalization_is_idempotent(a in image_strategy(6, 5), b in image_strategy(6, 5), m in mask_strategy(6, 5)) {
        let (l, lp, s) = normalize_lighting(&a, &b, &m).unwrap();
        prop_assert!(s.iter().all(|&v| v > 0.0));
        let (l2, lp2, s2) = normalize_lighting(&l, &lp, &m).unwrap();
        for v in s2 {
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
        for (x, y) in l.data().iter().zip(l2.data()).chain(lp.data().iter().zip(lp2.data())) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        for v in joint_max(&l, &lp, &m) {
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn input_normalization_shares_one_scale(a in image_strategy(5, 4), b in image_strategy(5, 4), m in mask_strategy(5, 4)) {
        let (i, ip, s) = normalize_input(&a, &b, &m).unwrap();
        for v in i.masked_mean(&m).unwrap() {
            prop_assert!((v - 0.5).abs() <= 1e-5);
        }
        for k in 0..a.data().len() {
            let c = k % 3;
            prop_assert_eq!(i.data()[k], a.data()[k] * s[c]);
            prop_assert_eq!(ip.data()[k], b.data()[k] * s[c]);
        }
    }

    #[test]
    fn shadow_gt_is_bounded_and_monotone(l in image_strategy(5, 5), m in mask_strategy(5, 5)) {
        let s = compute_shadow_gt(&l, &m, &ShadowGtConfig::default()).unwrap();
        for p in 0..25 {
            let (py, px) = (p / 5, p % 5);
            let v = s.get(py, px);
            prop_assert!((0.0..=1.0).contains(&v));
            if !m.is_on(py, px) {
                prop_assert_eq!(v, 0.0);
                continue;
            }
            // A receiver pixel at least as bright in every channel is no more shadowed.
            for q in 0..25 {
                let (qy, qx) = (q / 5, q % 5);
                if m.is_on(qy, qx) && (0..3).all(|c| l.get(qy, qx, c) >= l.get(py, px, c)) {
                    prop_assert!(s.get(qy, qx) <= v);
                }
            }
        }
    }

    #[test]
    fn normalization_is_a_positive_diagonal_scaling(a in image_strategy(4, 4), b in image_strategy(4, 4), m in mask_strategy(4, 4)) {
        let (l, lp, s) = normalize_lighting(&a, &b, &m).unwrap();
        for k in 0..a.data().len() {
            let c = k % 3;
            prop_assert!(s[c] > 0.0);
            prop_assert!((l.data()[k] - a.data()[k] * s[c]).abs() <= 1e-6 * l.data()[k].max(1.0));
            prop_assert!((lp.data()[k] - b.data()[k] * s[c]).abs() <= 1e-6 * lp.data()[k].max(1.0));
        }
    }
}
