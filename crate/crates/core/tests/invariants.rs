//! Property tests over rotations, the group, configs, and datasets.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use i2i_core::data::{Dataset, Sample};
use i2i_core::harness::RunConfig;
use i2i_core::icogroup::{build_group, IcoGroup, GROUP_ORDER};
use i2i_core::rotations::{
    canonicalize_label, det, geodesic_angle, gram_schmidt_6d, procrustes_9d, random_rotation, symmetry_aware_error,
    Rotation, SymmetrySpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn group() -> &'static IcoGroup {
    static G: OnceLock<IcoGroup> = OnceLock::new();
    G.get_or_init(|| build_group().unwrap())
}

fn rotation(seed: u64) -> Rotation {
    random_rotation(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-3.0f64..3.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quaternion_round_trip(seed: u64) {
        let r = rotation(seed);
        let back = Rotation::from_quaternion(r.quaternion());
        prop_assert!(geodesic_angle(&r, &back) < 1e-7);
        let q = r.quaternion();
        prop_assert!(q[0] >= 0.0);
        prop_assert!((q.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_is_a_bi_invariant_metric(a: u64, b: u64, c: u64) {
        let (ra, rb, rc) = (rotation(a), rotation(b), rotation(c));
        let d = geodesic_angle(&ra, &rb);
        prop_assert!((0.0..=PI + 1e-12).contains(&d));
        prop_assert!((d - geodesic_angle(&rb, &ra)).abs() < 1e-12);
        prop_assert!((d - geodesic_angle(&rc.compose(&ra), &rc.compose(&rb))).abs() < 1e-9);
        prop_assert!((d - geodesic_angle(&ra.compose(&rc), &rb.compose(&rc))).abs() < 1e-9);
        prop_assert!(geodesic_angle(&ra, &rc) <= d + geodesic_angle(&rb, &rc) + 1e-9);
    }

    #[test]
    fn gram_schmidt_yields_rotations(a in vec3(), b in vec3(), s in 0.1f64..10.0) {
        prop_assume!(i2i_core::rotations::norm(a) > 0.1);
        prop_assume!(i2i_core::rotations::norm(i2i_core::rotations::cross(a, b)) > 0.1);
        let r = gram_schmidt_6d(a, b).unwrap();
        prop_assert!(r.orthonormality_error() < 1e-12);
        prop_assert!((det(r.matrix()) - 1.0).abs() < 1e-12);
        let scaled = gram_schmidt_6d(a.map(|v| v * s), b).unwrap();
        prop_assert!(geodesic_angle(&r, &scaled) < 1e-7);
    }

    #[test]
    fn procrustes_fixes_rotations(seed: u64, s in 0.1f64..10.0) {
        let r = rotation(seed);
        let m = r.matrix().map(|row| row.map(|v| v * s));
        let p = procrustes_9d(&m).unwrap();
        prop_assert!(geodesic_angle(&r, &p) < 1e-7);
    }

    #[test]
    fn group_is_associative_with_inverses(g in 0..GROUP_ORDER, h in 0..GROUP_ORDER, k in 0..GROUP_ORDER) {
        let grp = group();
        prop_assert_eq!(grp.mul(grp.mul(g, h), k), grp.mul(g, grp.mul(h, k)));
        prop_assert_eq!(grp.mul(g, grp.inv(g)), 0);
        let composed = grp.element(g).compose(grp.element(h));
        prop_assert_eq!(grp.find(&composed), Some(grp.mul(g, h)));
    }

    #[test]
    fn nearest_element_is_nearest(seed: u64) {
        let grp = group();
        let r = rotation(seed);
        let (g, offset) = grp.nearest_element(&r);
        let best = geodesic_angle(grp.element(g), &r);
        for e in grp.elements() {
            prop_assert!(best <= geodesic_angle(e, &r) + 1e-12);
        }
        prop_assert!(geodesic_angle(&grp.element(g).compose(&offset), &r) < 1e-9);
    }

    #[test]
    fn canonical_labels_keep_symmetric_error(seed: u64, n in 2u32..7, k in 0u32..7) {
        let sym = SymmetrySpec::CyclicZ(n);
        let r = rotation(seed);
        let turned = r.compose(&Rotation::rot_z(2.0 * PI * f64::from(k % n) / f64::from(n)));
        let (a, b) = (canonicalize_label(&r, sym), canonicalize_label(&turned, sym));
        prop_assert!(geodesic_angle(&a, &b) < 1e-7);
        prop_assert!(symmetry_aware_error(&r, &turned, sym) < 1e-7);
        prop_assert!(symmetry_aware_error(&r, &turned, SymmetrySpec::ContinuousZ) < 1e-7);
    }

    #[test]
    fn config_text_round_trips(
        epochs in 1usize..500,
        lr in 1e-5f64..1.0,
        lambda in 0.0f64..10.0,
        seed: u64,
        views in 0usize..100,
        shift in 0usize..20,
        clip in 0.0f64..5.0,
        warmup in 0usize..5,
    ) {
        let mut cfg = RunConfig::default();
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.lr_min = lr / 100.0;
        cfg.lambda = lambda;
        cfg.seed = seed;
        cfg.views = views;
        cfg.shift_px = shift;
        cfg.grad_clip = clip;
        cfg.warmup = warmup;
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.lr, cfg.lr);
        prop_assert_eq!(back.seed, cfg.seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_bytes_round_trip(
        side in 1usize..6,
        count in 1usize..5,
        seed: u64,
        pixels in prop::collection::vec(-1.0f32..1.0, 36),
    ) {
        let samples = (0..count)
            .map(|i| Sample {
                class_id: i as u32 % 3,
                instance_id: i as u32,
                quat: rotation(seed ^ i as u64).quaternion(),
                image: pixels[..side * side].to_vec(),
            })
            .collect();
        let ds = Dataset { height: side, width: side, channels: 1, samples };
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, Path::new("<memory>")).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(&back.to_bytes(), &bytes);
        prop_assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], Path::new("<memory>")).is_err());
    }
}
