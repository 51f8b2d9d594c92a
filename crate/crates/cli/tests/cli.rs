use std::path::Path;
use std::process::{Command, Output};

fn ddr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddr"))
        .args(args)
        .output()
        .expect("spawn ddr")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value(stdout: &[u8], key: &str) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from:\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_register_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("fixture");
    let out = dir.path().join("out");
    let o = ddr(&[
        "synth",
        "--seed",
        "7",
        "--size",
        "64",
        "--out-dir",
        p(&fixture),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let src = fixture.join("source.ddrf");
    let tgt = fixture.join("target.ddrf");
    let o = ddr(&[
        "register",
        "--source",
        p(&src),
        "--target",
        p(&tgt),
        "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "velocity.ddrf",
        "phi.ddrf",
        "warped.ddrf",
        "warped.pgm",
        "difference.pgm",
        "jacobian.pgm",
        "report.txt",
    ] {
        assert!(out.join(name).exists(), "{name} not written");
    }
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("config.seed = 0"));
    assert!(report.contains("config.kl_weight = "));

    let o = ddr(&[
        "metrics",
        "--source",
        p(&src),
        "--target",
        p(&tgt),
        "--phi",
        p(&out.join("phi.ddrf")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let before = value(&o.stdout, "rmse_before");
    let after = value(&o.stdout, "rmse_after");
    assert!(after <= 0.2 * before, "rmse {before} -> {after}");
    assert_eq!(value(&o.stdout, "folding_ratio_permille"), 0.0);

    // Warping with the stored deformation reproduces the stored warped image.
    let rewarped = dir.path().join("rewarped.ddrf");
    let o = ddr(&[
        "warp",
        "--image",
        p(&src),
        "--phi",
        p(&out.join("phi.ddrf")),
        "--out",
        p(&rewarped),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::metadata(&rewarped).unwrap().len() > 0);
}

#[test]
fn repeated_runs_write_identical_fields() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("f");
    assert!(ddr(&[
        "synth",
        "--seed",
        "3",
        "--size",
        "32",
        "--amplitude",
        "2",
        "--out-dir",
        p(&fixture)
    ])
    .status
    .success());
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "max_iters = 30\nseed = 5\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = ddr(&[
            "register",
            "--source",
            p(&fixture.join("source.pgm")),
            "--target",
            p(&fixture.join("target.pgm")),
            "--config",
            p(&config),
            "--out-dir",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ["velocity.ddrf", "phi.ddrf", "warped.ddrf"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn shape_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(ddr(&["synth", "--size", "32", "--out-dir", p(&a)])
        .status
        .success());
    assert!(ddr(&["synth", "--size", "16", "--out-dir", p(&b)])
        .status
        .success());
    let o = ddr(&[
        "register",
        "--source",
        p(&a.join("source.ddrf")),
        "--target",
        p(&b.join("target.ddrf")),
        "--out-dir",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape mismatch"));
}

#[test]
fn corrupt_field_reports_its_code() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    assert!(ddr(&["synth", "--size", "16", "--out-dir", p(&f)])
        .status
        .success());
    let path = f.join("phi_true.ddrf");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let o = ddr(&[
        "warp",
        "--image",
        p(&f.join("source.ddrf")),
        "--phi",
        p(&path),
        "--out",
        p(&dir.path().join("w.ddrf")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("truncated payload") && err.contains("code 14"),
        "{err}"
    );
}

#[test]
fn gradcheck_passes() {
    let o = ddr(&["gradcheck", "--size", "12"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(value(&o.stdout, "max_rel_error") < 1e-4);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ddr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ddr(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(ddr(&[]).status.code(), Some(2));
    assert_eq!(ddr(&["--help"]).status.code(), Some(0));
}

#[test]
fn dice_of_identical_label_maps() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    assert!(ddr(&[
        "synth",
        "--size",
        "16",
        "--amplitude",
        "0",
        "--out-dir",
        p(&f)
    ])
    .status
    .success());
    // Any integer-valued field serves as a label map; threshold the source.
    let src = ddr_core::io::ddrf::read_field(&f.join("source.ddrf"))
        .unwrap()
        .into_scalar()
        .unwrap();
    let labels = ddr_core::field::ScalarField::new(
        src.shape(),
        src.values()
            .iter()
            .map(|&v| if v > 0.5 { 2.0 } else { 1.0 })
            .collect(),
    )
    .unwrap();
    let lp = dir.path().join("labels.ddrf");
    ddr_core::io::ddrf::write_field(&labels.into(), &lp).unwrap();
    let o = ddr(&["dice", "--source", p(&lp), "--target", p(&lp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&o.stdout, "dice_mean"), 1.0);
}
