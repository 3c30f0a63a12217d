use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use corrfuse::net::{NetConfig, PoseNet};
use corrfuse::pose::{Quaternion, RigidTransform};
use corrfuse_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cf_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn model(shape: &str, m: usize) -> *mut CfModel {
    let s = CString::new(shape).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cf_model_create(s.as_ptr(), m, 3, &mut h) }, CfStatus::CfOk);
    assert!(!h.is_null());
    h
}

fn sample_pose() -> RigidTransform {
    RigidTransform::new(Quaternion::from_axis_angle([0.3, -1.0, 0.5], 0.8), [0.02, -0.01, 0.6])
}

#[test]
fn model_handle_lifecycle() {
    let h = model("box", 120);
    let mut n = 0usize;
    assert_eq!(unsafe { cf_model_len(h, &mut n) }, CfStatus::CfOk);
    assert_eq!(n, 120);
    let mut sym = false;
    assert_eq!(unsafe { cf_model_is_symmetric(h, &mut sym) }, CfStatus::CfOk);
    assert!(sym);

    let mut buf = vec![0.0; 3 * n];
    assert_eq!(unsafe { cf_model_points(h, buf.as_mut_ptr(), n - 1) }, CfStatus::CfShape);
    assert!(last_error().contains("buffer"));
    assert_eq!(unsafe { cf_model_points(h, buf.as_mut_ptr(), n) }, CfStatus::CfOk);
    assert!(buf.iter().all(|v| v.abs() <= 0.05 + 1e-12));
    unsafe { cf_model_free(h) };

    let l = model("lshape", 60);
    assert_eq!(unsafe { cf_model_is_symmetric(l, &mut sym) }, CfStatus::CfOk);
    assert!(!sym);
    unsafe { cf_model_free(l) };
    unsafe { cf_model_free(ptr::null_mut()) };
}

#[test]
fn bad_arguments_report_status_and_message() {
    let bad = CString::new("sphere").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { cf_model_create(bad.as_ptr(), 50, 1, &mut h) },
        CfStatus::CfInvalidArgument
    );
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { cf_model_create(ptr::null(), 50, 1, &mut h) },
        CfStatus::CfNullPointer
    );
    let mut n = 0usize;
    assert_eq!(unsafe { cf_model_len(ptr::null(), &mut n) }, CfStatus::CfNullPointer);

    let zero = [0.0f64; 7];
    let mut out = [0.0f64; 7];
    assert_eq!(
        unsafe { cf_pose_inverse(zero.as_ptr(), out.as_mut_ptr()) },
        CfStatus::CfInvalidArgument
    );

    let mut v = 0.0;
    assert_eq!(unsafe { cf_auc(ptr::null(), 0, 0.1, &mut v) }, CfStatus::CfInvalidArgument);

    let missing = CString::new("/nonexistent/estimator.ckpt").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { cf_estimator_load(missing.as_ptr(), &mut e) }, CfStatus::CfIo);

    // A success clears the message.
    assert_eq!(unsafe { cf_model_len(model("box", 10), &mut n) }, CfStatus::CfOk);
    assert_eq!(last_error(), "");
}

#[test]
fn distances_match_the_library() {
    let h = model("lshape", 150);
    let gt = sample_pose();
    let pred = RigidTransform::new(Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.1), [0.0, 0.0, 0.01]).compose(&gt);
    let (p, g) = (pred.to_array(), gt.to_array());
    let mut add = 0.0;
    let mut adds = 0.0;
    assert_eq!(unsafe { cf_add(h, p.as_ptr(), g.as_ptr(), &mut add) }, CfStatus::CfOk);
    assert_eq!(unsafe { cf_add_s(h, p.as_ptr(), g.as_ptr(), &mut adds) }, CfStatus::CfOk);

    let m = corrfuse::synth::make_model("lshape".parse().unwrap(), 150, 3).unwrap();
    assert_eq!(add, corrfuse::metrics::add(&m, &pred, &gt));
    assert_eq!(adds, corrfuse::metrics::add_s(&m, &pred, &gt));
    assert!(adds <= add && add > 0.0);
    unsafe { cf_model_free(h) };
}

#[test]
fn threshold_metrics() {
    let d = [0.0, 0.01, 0.03, 0.2];
    let mut frac = 0.0;
    assert_eq!(unsafe { cf_accuracy_below(d.as_ptr(), d.len(), 0.02, &mut frac) }, CfStatus::CfOk);
    assert_eq!(frac, 0.5);
    let mut auc = 0.0;
    assert_eq!(unsafe { cf_auc(d.as_ptr(), d.len(), 0.1, &mut auc) }, CfStatus::CfOk);
    // (1 + 0.9 + 0.7 + 0) / 4 * 100
    assert!((auc - 65.0).abs() < 1e-9, "auc {auc}");
}

#[test]
fn pose_helpers_round_trip() {
    let a = sample_pose();
    let b = RigidTransform::new(Quaternion::from_axis_angle([1.0, 0.0, 0.0], -0.4), [0.1, 0.0, -0.2]);
    let mut c = [0.0; 7];
    assert_eq!(
        unsafe { cf_pose_compose(a.to_array().as_ptr(), b.to_array().as_ptr(), c.as_mut_ptr()) },
        CfStatus::CfOk
    );
    assert_eq!(c, a.compose(&b).to_array());

    let mut inv = [0.0; 7];
    assert_eq!(unsafe { cf_pose_inverse(c.as_ptr(), inv.as_mut_ptr()) }, CfStatus::CfOk);
    let mut ident = [0.0; 7];
    assert_eq!(
        unsafe { cf_pose_compose(c.as_ptr(), inv.as_ptr(), ident.as_mut_ptr()) },
        CfStatus::CfOk
    );
    let expect = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (x, y) in ident.iter().zip(expect) {
        assert!((x - y).abs() < 1e-12);
    }

    // In-place application.
    let mut pts = vec![0.01, 0.02, 0.03, -0.05, 0.0, 0.04];
    let orig = pts.clone();
    assert_eq!(
        unsafe { cf_pose_apply(a.to_array().as_ptr(), pts.as_ptr(), 2, pts.as_mut_ptr()) },
        CfStatus::CfOk
    );
    let want = a.apply(&[[orig[0], orig[1], orig[2]], [orig[3], orig[4], orig[5]]]);
    assert_eq!(&pts[..3], &want[0]);
    assert_eq!(&pts[3..], &want[1]);
}

#[test]
fn estimator_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("est.ckpt");
    let net = PoseNet::new(NetConfig::default(), 11).unwrap();
    net.save(&path).unwrap();

    let obj = corrfuse::synth::SynthObject::new("box", "box".parse().unwrap(), 100, 2).unwrap();
    let scene = corrfuse::synth::make_scene(&obj, &Default::default(), 5).unwrap();
    let obs = &scene.observation;
    let flat = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
    let (pts, cols) = (flat(&obs.points), flat(&obs.colors));

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cf_estimator_load(c.as_ptr(), &mut h) }, CfStatus::CfOk);
    let mut pose = [0.0; 7];
    assert_eq!(
        unsafe { cf_estimator_predict(h, pts.as_ptr(), cols.as_ptr(), obs.len(), pose.as_mut_ptr()) },
        CfStatus::CfOk
    );
    assert_eq!(pose, net.estimate(obs).unwrap().to_array());

    let mut refined = [0.0; 7];
    assert_eq!(
        unsafe { cf_estimator_refine(h, pts.as_ptr(), cols.as_ptr(), obs.len(), pose.as_ptr(), 2, refined.as_mut_ptr()) },
        CfStatus::CfOk
    );
    let want = corrfuse::net::refine(&net.estimate(obs).unwrap(), obs, &net, 2).unwrap();
    assert_eq!(refined, want.to_array());

    assert_eq!(
        unsafe { cf_estimator_predict(h, pts.as_ptr(), ptr::null(), obs.len(), pose.as_mut_ptr()) },
        CfStatus::CfNullPointer
    );
    unsafe { cf_estimator_free(h) };
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/corrfuse.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cf_last_error_message",
        "cf_model_create",
        "cf_model_free",
        "cf_estimator_load",
        "cf_estimator_predict",
        "cf_estimator_free",
        "cf_add",
        "cf_add_s",
        "cf_auc",
        "cf_accuracy_below",
        "cf_pose_compose",
        "cf_pose_apply",
        "typedef struct CfModel CfModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }

    // Type-check a small C client against the header when a compiler exists.
    let Ok(_) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping header compile");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"#include "corrfuse.h"
int client(void) {
    CfModel *m = NULL;
    double pose[7] = {1, 0, 0, 0, 0, 0, 0}, d = 0;
    if (cf_model_create("box", 64, 1, &m) != CF_OK) return 1;
    CfStatus s = cf_add_s(m, pose, pose, &d);
    cf_model_free(m);
    return s == CF_OK ? 0 : (int)s;
}
"#,
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
