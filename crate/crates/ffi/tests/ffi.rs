use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use turbogan_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { tg_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(255));
    s
}

fn synth(kind: TgOracleKind, r: usize, n: usize) -> *mut TgEnsemble {
    let mut e = ptr::null_mut();
    let st = unsafe { tg_ensemble_synth(kind, 1.0 / 3.0, 0.05, 64, r, n, 7, &mut e) };
    assert_eq!(st, TgStatus::Ok, "{}", last_error());
    e
}

#[test]
fn synth_shape_and_data() {
    let e = synth(TgOracleKind::Fbm, 3, 512);
    let (mut r, mut n) = (0, 0);
    assert_eq!(unsafe { tg_ensemble_shape(e, &mut r, &mut n) }, TgStatus::Ok);
    assert_eq!((r, n), (3, 512));
    let mut buf = vec![0.0; r * n];
    assert_eq!(unsafe { tg_ensemble_data(e, buf.as_mut_ptr(), buf.len()) }, TgStatus::Ok);
    let direct = turbogan::oracles::fbm(3, 512, 1.0 / 3.0, 7).unwrap();
    assert_eq!(buf, direct.data());
    assert_eq!(
        unsafe { tg_ensemble_data(e, buf.as_mut_ptr(), 5) },
        TgStatus::InvalidArgument
    );
    unsafe { tg_ensemble_free(e) };
}

#[test]
fn errors_set_status_and_message() {
    let mut e = ptr::null_mut();
    let st = unsafe { tg_ensemble_synth(TgOracleKind::Fbm, 1.5, 0.0, 1, 2, 64, 0, &mut e) };
    assert_eq!(st, TgStatus::InvalidArgument);
    assert!(e.is_null());
    assert!(last_error().contains("Hurst"));

    let st = unsafe { tg_ensemble_synth(TgOracleKind::Gaussian, 0.0, 0.0, 1, 2, 64, 0, ptr::null_mut()) };
    assert_eq!(st, TgStatus::NullPointer);
    let st = unsafe { tg_ensemble_shape(ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, TgStatus::NullPointer);

    let missing = CString::new("/nonexistent/dir/ens").unwrap();
    let st = unsafe { tg_ensemble_read(missing.as_ptr(), &mut e) };
    assert_eq!(st, TgStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { tg_generator_load(bad.as_ptr(), &mut g) }, TgStatus::Format);
    assert!(g.is_null());

    unsafe { tg_ensemble_free(ptr::null_mut()) };
    unsafe { tg_generator_free(ptr::null_mut()) };
}

#[test]
fn write_read_round_trip() {
    let e = synth(TgOracleKind::Gaussian, 2, 256);
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("g").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tg_ensemble_write(e, p.as_ptr()) }, TgStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { tg_ensemble_read(p.as_ptr(), &mut back) }, TgStatus::Ok);
    let mut a = vec![0.0; 512];
    let mut b = vec![0.0; 512];
    unsafe {
        tg_ensemble_data(e, a.as_mut_ptr(), 512);
        tg_ensemble_data(back, b.as_mut_ptr(), 512);
    }
    // files store float32
    assert!(a.iter().zip(&b).all(|(x, y)| (*x as f32) as f64 == *y));
    unsafe {
        tg_ensemble_free(e);
        tg_ensemble_free(back);
    }
}

#[test]
fn statistics_match_library() {
    let data: Vec<f64> = (0..2 * 300).map(|i| ((i * 37 % 101) as f64).sin()).collect();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { tg_ensemble_from_data(data.as_ptr(), 2, 300, &mut e) }, TgStatus::Ok);
    let lags = [1usize, 2, 4, 8];
    let (mut s2, mut sk, mut fl) = ([0.0; 4], [0.0; 4], [0.0; 4]);
    let st = unsafe { tg_stat_curves(e, lags.as_ptr(), 4, s2.as_mut_ptr(), sk.as_mut_ptr(), fl.as_mut_ptr()) };
    assert_eq!(st, TgStatus::Ok, "{}", last_error());
    let ens = turbogan::FieldEnsemble::new(data, 2, 300).unwrap();
    let grid = turbogan::ScaleGrid::new(lags.to_vec(), 100.0, 1.0).unwrap();
    let c = turbogan::stats::stat_curves(&ens, &grid).unwrap();
    assert_eq!(s2.to_vec(), c.log_s2);
    assert_eq!(sk.to_vec(), c.skewness);
    assert_eq!(fl.to_vec(), c.log_flatness_over_3);
    unsafe { tg_ensemble_free(e) };

    let e = synth(TgOracleKind::Fbm, 8, 4096);
    let orders = [2.0, 3.0];
    let mut z = [0.0; 2];
    let st = unsafe { tg_zeta_fit(e, orders.as_ptr(), 2, 4.0, 512.0, z.as_mut_ptr()) };
    assert_eq!(st, TgStatus::Ok, "{}", last_error());
    assert!((z[0] - 2.0 / 3.0).abs() < 0.1, "{z:?}");
    unsafe { tg_ensemble_free(e) };
}

#[test]
fn generator_from_checkpoint() {
    use turbogan::training::{TrainConfig, Trainer};
    let ds = turbogan::oracles::mrw(4, 1024, 1.0 / 3.0, 0.05, 128, 1).unwrap();
    let c = TrainConfig {
        batch_size: 4,
        samples: 1024,
        preset: "desk".into(),
        width_multiplier: Some(0.125),
        ..TrainConfig::default()
    };
    let t = Trainer::new(&ds, c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    t.checkpoint().save(&path).unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { tg_generator_load(p.as_ptr(), &mut g) }, TgStatus::Ok, "{}", last_error());
    let mut count = 0;
    assert_eq!(unsafe { tg_generator_param_count(g, &mut count) }, TgStatus::Ok);
    assert_eq!(count, t.generator().0.param_count());
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { tg_generator_generate(g, 2, 256, 16, 3, &mut e) }, TgStatus::Ok);
    let (mut r, mut n) = (0, 0);
    unsafe { tg_ensemble_shape(e, &mut r, &mut n) };
    assert_eq!((r, n), (2, 256));
    let st = unsafe { tg_generator_generate(g, 2, 256, 3, 3, &mut e) };
    assert_eq!(st, TgStatus::InvalidArgument);
    unsafe {
        tg_ensemble_free(e);
        tg_generator_free(g);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(tg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

const C_SMOKE: &str = r#"
#include "turbogan.h"
int main(void) {
    TgEnsemble *e = NULL;
    TgStatus st = tg_ensemble_synth(TG_ORACLE_KIND_GAUSSIAN, 0.0, 0.0, 1, 2, 64, 1, &e);
    size_t r = 0, n = 0;
    if (st == TG_STATUS_OK) st = tg_ensemble_shape(e, &r, &n);
    tg_ensemble_free(e);
    return st == TG_STATUS_OK ? 0 : 1;
}
"#;

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("turbogan.h")).unwrap();
    for f in ["tg_ensemble_synth", "tg_last_error", "tg_generator_load", "tg_zeta_fit", "TG_STATUS_FORMAT"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let out = Command::new(compiler)
            .args(&extra)
            .args(["-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(&include)
            .arg(&src)
            .output()
            .unwrap_or_else(|e| panic!("{compiler} not runnable: {e}"));
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
