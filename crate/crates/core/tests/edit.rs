mod common;

use proptest::prelude::*;

use genie_core::edit::{apply_transform, rotation_about, scale_about, translation, EditOp, EditSession, Selection};
use genie_core::{Camera, GenieError, Vec3};

use common::{baked_bundle, equivariance_errors, render_bundle};

fn camera() -> Camera {
    let mut c = Camera::look_at(Vec3::new(0.1, 0.15, 0.55), Vec3::zeros(), Vec3::y(), 20.0, 16, 16);
    c.near = 0.2;
    c.far = 1.0;
    c
}

#[test]
fn translated_scene_and_camera_render_the_same_image() {
    let b = baked_bundle(1, 20);
    assert!(render_bundle(&b, &camera()).acc_alpha.iter().any(|a| *a > 1e-3));
    for t in [Vec3::new(0.3, -0.2, 0.1), Vec3::new(-1.5, 2.0, 0.25)] {
        let (shifted, round, partial) = equivariance_errors(&b, &camera(), t);
        assert!(shifted <= 1e-6, "{shifted}");
        assert!(round <= 1e-6, "{round}");
        assert!(partial <= 1e-6, "{partial}");
    }
}

#[test]
fn moving_only_the_scene_changes_the_image() {
    let b = baked_bundle(2, 20);
    let mut moved = b.clone();
    apply_transform(&mut moved.set, &Selection::All, &translation(Vec3::new(0.05, 0.0, 0.0))).unwrap();
    assert!(render_bundle(&moved, &camera()).mean_abs_diff(&render_bundle(&b, &camera())) > 1e-4);
}

#[test]
fn edits_require_a_baked_scene() {
    let (cfg, set, _) = common::small_run(3);
    let mut t = genie_core::Trainer::new(cfg, set).unwrap();
    let err = apply_transform(&mut t.set, &Selection::All, &translation(Vec3::x()));
    assert!(matches!(err, Err(GenieError::NotBaked(_))), "{err:?}");
}

#[test]
fn session_ops_parse_and_apply() {
    let b = baked_bundle(4, 5);
    let ops: Vec<EditOp> = serde_json::from_str(
        r#"[
            {"op": "translate", "selection": "all", "offset": [0.1, 0, 0]},
            {"op": "rotate", "selection": {"indices": [0, 1]}, "axis": [0, 1, 0], "degrees": 90},
            {"op": "scale", "selection": "all", "factor": 2.0}
        ]"#,
    )
    .unwrap();
    let mut s = EditSession::new(b.set.clone());
    for op in &ops {
        s.apply(op, std::path::Path::new(".")).unwrap();
    }
    assert_eq!(s.set.epoch(), b.set.epoch() + 3);
    let g0 = b.set.get(0);
    let m0 = g0.mean + Vec3::new(0.1, 0.0, 0.0);
    let want = 2.0 * Vec3::new(m0.z, m0.y, -m0.x);
    assert!((s.set.get(0).mean - want).norm() < 1e-12);
    assert!((s.set.get(0).log_scale - g0.log_scale - Vec3::repeat(4f64.ln())).norm() < 1e-12);
    let bad = EditOp::Translate { selection: Selection::Indices(vec![10_000]), offset: [0.0; 3] };
    assert!(s.apply(&bad, std::path::Path::new(".")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_then_inverse_restores_means(
        tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
        deg in -180.0f64..180.0, s in 0.2f64..5.0,
    ) {
        let b = baked_bundle(5, 0);
        let c = Vec3::new(0.1, -0.2, 0.3);
        let m = translation(Vec3::new(tx, ty, tz)) * rotation_about(Vec3::z(), deg, c).unwrap() * scale_about(Vec3::repeat(s), c);
        let mut inv = m.try_inverse().unwrap();
        inv.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        let mut set = b.set.clone();
        apply_transform(&mut set, &Selection::All, &m).unwrap();
        apply_transform(&mut set, &Selection::All, &inv).unwrap();
        for (a, o) in set.gaussians().iter().zip(b.set.gaussians()) {
            prop_assert!((a.mean - o.mean).norm() < 1e-9);
            prop_assert!((a.log_scale - o.log_scale).norm() < 1e-9);
            prop_assert_eq!(&a.feature, &o.feature);
        }
    }
}
