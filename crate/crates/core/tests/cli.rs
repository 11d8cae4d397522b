use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn turbogan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbogan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = turbogan(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_is_empty(p: &Path) -> bool {
    fs::read_dir(p).unwrap().next().is_none()
}

#[test]
fn synth_is_byte_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--kind", "gaussian", "--R", "4", "--N", "4096", "--seed", "7", "--out", s(out)]);
    }
    let fa = fs::read(d.path().join("a.f32")).unwrap();
    assert_eq!(fa.len(), 4 * 4096 * 4);
    assert_eq!(fa, fs::read(d.path().join("b.f32")).unwrap());
    assert_eq!(
        fs::read(d.path().join("a.meta")).unwrap(),
        fs::read(d.path().join("b.meta")).unwrap()
    );
}

#[test]
fn synth_validation_errors_write_nothing() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("x");
    let o = turbogan(&["synth", "--kind", "fbm", "--R", "2", "--N", "64", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--H"));
    let o = turbogan(&[
        "synth", "--kind", "mrw", "--H", "0.3", "--lambda2", "0.9", "--Lc", "8", "--R", "2", "--N", "64", "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = turbogan(&["synth", "--kind", "nope", "--R", "2", "--N", "64", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(dir_is_empty(d.path()));
}

#[test]
fn mrw_sidecar_records_integral_scale() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("m");
    ok(&[
        "synth", "--kind", "mrw", "--H", "0.33", "--lambda2", "0.05", "--Lc", "128", "--R", "2", "--N", "1024",
        "--out", s(&out),
    ]);
    let meta = fs::read_to_string(d.path().join("m.meta")).unwrap();
    assert!(meta.contains("integral_scale=128"));
}

#[test]
fn invalid_checkpoint_is_a_format_error() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    let out = d.path().join("g");
    let o = turbogan(&["generate", "--checkpoint", s(&bad), "--R", "2", "--N", "256", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("format"));

    let mut bytes = b"TGANCKPT".to_vec();
    bytes.extend(99u32.to_le_bytes());
    fs::write(&bad, bytes).unwrap();
    let o = turbogan(&["generate", "--checkpoint", s(&bad), "--R", "2", "--N", "256", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 99"));
    assert!(!d.path().join("g.f32").exists());
}

#[test]
fn train_generate_analyze_compare() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    ok(&[
        "synth", "--kind", "mrw", "--H", "0.33", "--lambda2", "0.05", "--Lc", "128", "--R", "8", "--N", "1024",
        "--seed", "3", "--out", s(&p("data")),
    ]);
    fs::write(
        p("cfg.txt"),
        "# tiny run\nepochs=1\nbatch_size=4\nsamples=1024\npreset=desk\nwidth_multiplier=0.125\n",
    )
    .unwrap();

    let bad_cfg = p("bad.txt");
    fs::write(&bad_cfg, "epochs=1\nlearning_rate=3\n").unwrap();
    let o = turbogan(&["train", "--data", s(&p("data")), "--config", s(&bad_cfg), "--out-dir", s(&p("bad_run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!p("bad_run").exists());

    for run in ["run1", "run2"] {
        ok(&[
            "train", "--data", s(&p("data")), "--config", s(&p("cfg.txt")), "--out-dir", s(&p(run)), "--seed", "4",
        ]);
    }
    let l1 = fs::read(p("run1/losses.csv")).unwrap();
    assert_eq!(l1, fs::read(p("run2/losses.csv")).unwrap());
    assert!(String::from_utf8_lossy(&l1).starts_with("step,l_si,l_s2,l_skew,l_flat,total,"));

    let ck = p("run1/final.ckpt");
    for (out, nb) in [("g1", "32"), ("g2", "32"), ("g0", "0")] {
        ok(&[
            "generate", "--checkpoint", s(&ck), "--R", "3", "--N", "512", "--nb", nb, "--seed", "9", "--out",
            s(&p(out)),
        ]);
    }
    assert_eq!(fs::read(p("g1.f32")).unwrap(), fs::read(p("g2.f32")).unwrap());
    assert_eq!(fs::read(p("g0.f32")).unwrap().len(), 3 * 512 * 4);
    let o = turbogan(&["generate", "--checkpoint", s(&ck), "--R", "3", "--N", "500", "--out", s(&p("g3"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!p("g3.f32").exists());

    let listed = ok(&["analyze", "--in", s(&p("data")), "--fit-min", "4", "--fit-max", "128", "--out-dir", s(&p("rep"))]);
    for f in ["stat_curves.csv", "zeta.csv", "pdfs.csv", "log_s2.svg", "skewness.svg", "flatness.svg", "zeta.svg", "pdfs.svg"] {
        assert!(p("rep").join(f).exists(), "{f} missing");
        assert!(listed.contains(f));
    }

    let same = ok(&["compare", "--a", s(&p("data")), "--b", s(&p("data")), "--fit-min", "4", "--fit-max", "128"]);
    assert!(same.contains("max_abs_d_logF3=0\n"));
    assert!(same.contains("max_abs_d_zeta=0\n"));
    ok(&[
        "compare", "--a", s(&p("data")), "--b", s(&p("g0")), "--fit-min", "4", "--fit-max", "128", "--out-dir",
        s(&p("cmp")),
    ]);
    assert!(p("cmp/compare_curves.csv").exists());
}
