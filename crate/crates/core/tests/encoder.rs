use ctxf_autodiff::rng;
use ctxf_autodiff::Tensor as TensorOf;
use ctxf_core::datasets::{generate, SyntheticSpec};
use ctxf_core::encoder::*;

type Tensor = TensorOf<f32>;

fn small() -> EncoderConfig {
    EncoderConfig {
        widths: vec![8, 16],
        head_hidden: 32,
        ..EncoderConfig::default()
    }
}

#[test]
fn shapes_follow_the_configuration() {
    let enc = Encoder::new(small(), &mut rng::seeded(0)).unwrap();
    let x = Tensor::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng::seeded(1));
    let h = enc.encode(&x).unwrap();
    assert_eq!(h.shape(), &[3, 16]);
    let z = enc.project(&h).unwrap();
    assert_eq!(z.shape(), &[3, EMBED_DIM]);
    for i in 0..3 {
        let n: f32 = z.row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(enc.params.len(), 2 * 2 + 4);
    let total: usize = enc.params.tensors().iter().map(|t| t.len()).sum();
    assert_eq!(total, small().n_params());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let enc = Encoder::new(small(), &mut rng::seeded(0)).unwrap();
    assert!(enc.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    assert!(enc.encode(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
}

#[test]
fn configuration_is_validated() {
    let bad = EncoderConfig {
        widths: vec![8, 8, 8, 8, 8],
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(EncoderConfig {
        widths: vec![],
        ..small()
    }
    .validate()
    .is_err());
    assert!(EncoderConfig::default().validate().is_ok());
}

#[test]
fn architecture_is_recovered_from_parameters() {
    let enc = Encoder::new(small(), &mut rng::seeded(0)).unwrap();
    let back = Encoder::from_params(enc.params.clone(), 32, 32).unwrap();
    assert_eq!(back.config, small());
}

#[test]
fn dataset_embedding_matches_single_images() {
    let ds = generate(&SyntheticSpec::default_ten(), 1, 0).unwrap();
    let enc = Encoder::new(small(), &mut rng::seeded(2)).unwrap();
    let z = enc.embed_dataset(&ds).unwrap();
    assert_eq!(z.shape(), &[10, EMBED_DIM]);
    let x = Tensor::new(&[1, 3, 32, 32], ds.image(4).to_vec()).unwrap();
    let single = enc.project(&enc.encode(&x).unwrap()).unwrap();
    for (a, b) in single.row(0).iter().zip(z.row(4)) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn augmentation_is_deterministic_and_bounded() {
    let ds = generate(&SyntheticSpec::default_ten(), 1, 0).unwrap();
    let img = ds.image(2);
    let cfg = AugmentConfig::default();
    let (a1, b1) = augment(&img, (32, 32), &cfg, &mut rng::derive(5, &[3, 1]));
    let (a2, b2) = augment(&img, (32, 32), &cfg, &mut rng::derive(5, &[3, 1]));
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_ne!(a1, b1);
    for v in a1.iter().chain(&b1) {
        assert!((0.0..=1.0).contains(v));
    }
    assert_eq!(a1.len(), 3 * 32 * 32);
}

#[test]
fn identity_augmentation_returns_the_image() {
    let ds = generate(&SyntheticSpec::default_ten(), 1, 0).unwrap();
    let img = ds.image(0);
    let out = augment_view(&img, (32, 32), &AugmentConfig::identity(32), &mut rng::seeded(0));
    assert_eq!(out, img.to_vec());
}

#[test]
fn resize_halves_by_averaging_pairs() {
    let mut img = vec![0.0f32; 3 * 4 * 4];
    for (i, v) in img.iter_mut().enumerate() {
        *v = if (i % 4) % 2 == 0 { 0.0 } else { 1.0 };
    }
    let out = resize(&img, (4, 4), 2);
    assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-6), "{out:?}");
}

#[test]
fn invalid_augmentation_settings_are_rejected() {
    let cfg = AugmentConfig {
        scale: (0.9, 0.5),
        ..AugmentConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = AugmentConfig {
        flip_p: 1.5,
        ..AugmentConfig::default()
    };
    assert!(cfg.validate().is_err());
}
