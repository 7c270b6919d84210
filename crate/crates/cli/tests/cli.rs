use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pipad"));
    c.env_remove("PIPAD_OUTPUT_ROOT");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `metric,value` rows as a lookup.
fn metrics(csv: &str) -> Vec<(String, String)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn metric(csv: &str, key: &str) -> f64 {
    metrics(csv)
        .into_iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("no {key}"))
        .1
        .parse()
        .unwrap()
}

fn convert_tiny(out: &Path) -> String {
    ok(&[
        "convert",
        s(&fixture("tiny.edges")),
        "--edge-life",
        "2",
        "--slice-cap",
        "2",
        "--dim",
        "2",
        "--out",
        s(out),
    ])
}

/// Little-endian sliced blob built by hand from the layout description.
fn encode_scsr(cap: u32, rows: &[u32], offsets: &[u32], cols: &[u32], vals: &[f32]) -> Vec<u8> {
    let mut b = b"SCSR".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend(cap.to_le_bytes());
    b.extend((rows.len() as u64).to_le_bytes());
    b.extend((cols.len() as u64).to_le_bytes());
    for v in rows.iter().chain(offsets).chain(cols) {
        b.extend(v.to_le_bytes());
    }
    for v in vals {
        b.extend(v.to_le_bytes());
    }
    b
}

#[test]
fn convert_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny");
    let table = convert_tiny(&out);
    assert!(table.contains("csr") && table.contains("sliced") && table.contains("coo"));
    let golden = fixture("golden_tiny");
    for name in ["manifest.json", "storage.csv", "snap_0.scsr", "snap_1.scsr", "snap_2.scsr"] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(golden.join(name)).unwrap(),
            "{name} drifted from its golden copy"
        );
    }
    // snapshot 0 holds 0->1 (1), 0->2 (2), 0->3 (1); a cap of 2 splits row 0
    let want = encode_scsr(2, &[0, 0], &[0, 2, 3], &[1, 2, 3], &[1.0, 2.0, 1.0]);
    assert_eq!(fs::read(out.join("snap_0.scsr")).unwrap(), want);
}

#[test]
fn convert_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny");
    convert_tiny(&out);
    let first: Vec<(PathBuf, Vec<u8>)> = sorted_files(&out);
    convert_tiny(&out);
    assert_eq!(first, sorted_files(&out));
    assert!(first.len() >= 8);
}

fn sorted_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn zero_slice_cap_is_a_usage_error() {
    let (c, err) = code(&["convert", s(&fixture("tiny.edges")), "--slice-cap", "0"]);
    assert_eq!(c, 2);
    assert!(err.contains("slice-cap"), "{err}");
}

#[test]
fn malformed_edges_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.edges");
    fs::write(&bad, "0 1 0\n0 x 1\n").unwrap();
    let (c, err) = code(&["convert", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn kernel_sweep_has_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&[
        "analyze",
        "kernel",
        "--input",
        s(&fixture("skew.edges")),
        "--dims",
        "2,4,8,16,32,64",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(csv, fs::read_to_string(dir.path().join("kernel.csv")).unwrap());
    let rows: Vec<(usize, u64, u64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for w in rows.windows(2) {
        assert!(w[1].2 >= w[0].2, "transactions fell: {w:?}");
    }
    let flat: Vec<u64> = rows.iter().filter(|r| r.0 <= 32).map(|r| r.1).collect();
    assert!(flat.iter().all(|&r| r == flat[0]), "requests moved before 32: {flat:?}");
    assert!(dir.path().join("kernel.json").exists());
}

#[test]
fn balance_gap_is_smaller_for_sliced_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&[
        "analyze",
        "balance",
        "--input",
        s(&fixture("skew.edges")),
        "--out",
        s(dir.path()),
    ]);
    let gap = |layout: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(layout)).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(gap("sliced") < gap("csr"), "{csv}");
}

#[test]
fn overlap_report_covers_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&[
        "analyze",
        "overlap",
        "--nodes",
        "100",
        "--edges",
        "400",
        "--steps",
        "6",
        "--churn",
        "0",
        "--frame",
        "4",
        "--candidates",
        "1,2,4",
        "--out",
        s(dir.path()),
    ]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // 3 frames, sizes 2 and 4
    assert_eq!(rows.len(), 6);
    for r in rows {
        let rate: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(rate, 1.0, "no churn means full overlap: {r}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&["analyze", "frobnicate"]).0, 2);
    assert_eq!(code(&["frobnicate"]).0, 2);
    assert_eq!(code(&["--help"]).0, 0);
    assert_eq!(code(&["simulate", "--help"]).0, 0);
}

#[test]
fn missing_profile_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let (c, err) = code(&[
        "simulate",
        "--nodes",
        "80",
        "--edges",
        "300",
        "--steps",
        "6",
        "--frame",
        "4",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(c, 2);
    assert!(err.contains("--build-profile") && err.contains("--profile"), "{err}");
}

fn small_sim(out: &Path, profile: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "simulate",
        "--nodes",
        "120",
        "--edges",
        "600",
        "--steps",
        "8",
        "--dim",
        "8",
        "--frame",
        "4",
        "--seed",
        "5",
        "--profile",
        s(profile),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn build_profile(path: &Path) {
    ok(&[
        "tune",
        "build-profile",
        "--corpus-nodes",
        "120",
        "--corpus-edges",
        "600",
        "--dims",
        "8",
        "--max-samples",
        "5",
        "--out",
        s(path),
    ]);
}

#[test]
fn simulate_is_reproducible_and_stores_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.json");
    build_profile(&profile);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_sim(&a, &profile, &[]);
    small_sim(&b, &profile, &[]);
    let sa = fs::read(a.join("summary.csv")).unwrap();
    assert_eq!(sa, fs::read(b.join("summary.csv")).unwrap());
    for f in ["timeline.json", "report.json", "decisions.json", "config.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    // rerunning from the stored config reproduces the summary
    let c = dir.path().join("c");
    ok(&["simulate", "--config", s(&a.join("config.json")), "--out", s(&c)]);
    assert_eq!(sa, fs::read(c.join("summary.csv")).unwrap());
}

#[test]
fn baseline_flag_runs_the_one_snapshot_mode() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.json");
    build_profile(&profile);
    for (t, mode) in [("sync", "baseline_sync"), ("async", "baseline_async")] {
        let out = dir.path().join(t);
        small_sim(&out, &profile, &["--baseline", "one-snapshot", "--transfer", t]);
        let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(csv.contains(&format!("mode,{mode}\n")), "{csv}");
        assert_eq!(metric(&csv, "bytes_overlap_adj"), 0.0);
        assert_eq!(metric(&csv, "cache_device_hits"), 0.0);
    }
}

#[test]
fn ab_run_reports_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.json");
    build_profile(&profile);
    let out = dir.path().join("ab");
    small_sim(&out, &profile, &["--ab"]);
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let p = metric(&fs::read_to_string(out.join("pipad/summary.csv")).unwrap(), "steady_epoch_time");
    let b = metric(&fs::read_to_string(out.join("baseline/summary.csv")).unwrap(), "steady_epoch_time");
    assert!((metric(&cmp, "speedup") - b / p).abs() < 1e-9);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .env("PIPAD_OUTPUT_ROOT", dir.path())
        .args([
            "simulate",
            "--nodes",
            "60",
            "--edges",
            "200",
            "--steps",
            "4",
            "--frame",
            "2",
            "--s-per",
            "1",
            "--name",
            "envrun",
        ])
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(dir.path().join("envrun/summary.csv").exists());
}

#[test]
fn capacity_failures_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"dataset": {"kind": "synthetic", "node_count": 100, "base_edges": 400, "steps": 4,
            "churn_rate": 0.1, "feature_dim": 8},
            "sim": {"frame_size": 2, "tuner": false, "resources": {"device_memory": 1000}}}"#,
    )
    .unwrap();
    let (c, err) = code(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(c, 4, "{err}");
}

#[test]
fn explain_prints_the_decision() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.json");
    build_profile(&profile);
    let text = ok(&[
        "tune",
        "explain",
        "--nodes",
        "120",
        "--edges",
        "600",
        "--steps",
        "8",
        "--dim",
        "8",
        "--frame-size",
        "4",
        "--frame",
        "1",
        "--profile",
        s(&profile),
    ]);
    assert!(text.contains("selected s_per="), "{text}");
    let (c, _) = code(&[
        "tune",
        "explain",
        "--nodes",
        "120",
        "--edges",
        "600",
        "--steps",
        "8",
        "--frame-size",
        "4",
        "--frame",
        "99",
        "--profile",
        s(&profile),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn generate_writes_a_loadable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    ok(&[
        "generate",
        "--nodes",
        "50",
        "--edges",
        "120",
        "--steps",
        "3",
        "--slice-cap",
        "4",
        "--out",
        s(&out),
    ]);
    assert!(out.join("manifest.json").exists() && out.join("snap_2.scsr").exists());
    // the directory feeds the other commands
    let csv = ok(&["analyze", "kernel", "--input", s(&out), "--dims", "4", "--out", s(&dir.path().join("k"))]);
    assert_eq!(csv.lines().count(), 2);
}
