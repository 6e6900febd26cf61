use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plap"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn run_small(experiment: &str, out: &Path, cache: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--experiment",
        experiment,
        "--grid",
        "12x12",
        "--p",
        "2,1.6",
        "--levels",
        "20",
        "--out",
        out.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    plap(&args)
}

#[test]
fn analyze_reproduces_run_levels_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cache = dir.path().join("cache");
    for (experiment, flow, mode) in [
        ("static_square", "identity", "static"),
        ("double_gyre", "double_gyre", "dynamic_dirichlet"),
    ] {
        let out = out.join(experiment);
        let r = run_small(experiment, &out, &cache, &[]);
        assert_eq!(r.status.code(), Some(0), "{}", text(&r.stderr));
        let stdout = text(&r.stdout);
        assert!(stdout.starts_with("p,lambda,iterations"), "{stdout}");
        assert_eq!(stdout.matches(",converged").count(), 2, "{stdout}");

        let csv = dir.path().join(format!("{experiment}.csv"));
        let a = plap(&[
            "analyze",
            out.join("eigenfunction_p1.60.txt").to_str().unwrap(),
            "--flow",
            flow,
            "--mode",
            mode,
            "--levels",
            "20",
            "--out",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(a.status.code(), Some(0), "{}", text(&a.stderr));
        let expected = fs::read(out.join("levels_p1.60.csv")).unwrap();
        assert_eq!(fs::read(&csv).unwrap(), expected, "{experiment}");
    }
}

#[test]
fn second_run_hits_the_transport_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let first = run_small("double_gyre", &dir.path().join("a"), &cache, &[]);
    assert_eq!(first.status.code(), Some(0));
    assert!(text(&first.stderr).contains("transport Miss"), "{}", text(&first.stderr));
    let second = run_small("double_gyre", &dir.path().join("b"), &cache, &[]);
    assert_eq!(second.status.code(), Some(0));
    assert!(text(&second.stderr).contains("transport Hit"), "{}", text(&second.stderr));
    assert_eq!(
        fs::read(dir.path().join("a/summary.csv")).unwrap(),
        fs::read(dir.path().join("b/summary.csv")).unwrap()
    );

    let inspect = plap(&["cache", "inspect", "--cache", cache.to_str().unwrap()]);
    assert_eq!(inspect.status.code(), Some(0));
    assert!(text(&inspect.stdout).starts_with("1 entries"), "{}", text(&inspect.stdout));
    let clear = plap(&["cache", "clear", "--cache", cache.to_str().unwrap()]);
    assert!(text(&clear.stdout).starts_with("removed 1 entries"));
}

#[test]
fn corrupt_dump_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = run_small("static_square", &out, &dir.path().join("cache"), &[]);
    assert_eq!(r.status.code(), Some(0));
    let dump = out.join("eigenfunction_p2.00.txt");
    let mut lines: Vec<String> = fs::read_to_string(&dump).unwrap().lines().map(String::from).collect();
    lines[6] = "0.5 oops 1.0".into();
    fs::write(&dump, lines.join("\n")).unwrap();
    let a = plap(&["analyze", dump.to_str().unwrap()]);
    assert_eq!(a.status.code(), Some(2));
    let err = text(&a.stderr);
    assert!(err.contains("line 7"), "{err}");
}

#[test]
fn exit_codes_separate_nonconvergence_from_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_small(
        "static_square",
        &dir.path().join("run"),
        &dir.path().join("cache"),
        &["--set", "max_iter=1", "--set", "p=1.3"],
    );
    assert_eq!(r.status.code(), Some(1), "{}", text(&r.stderr));
    assert!(text(&r.stdout).contains("iteration budget exhausted"));

    let bad = plap(&["run", "--experiment", "nowhere"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = plap(&["run", "--set", "p=3", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2), "{}", text(&bad.stderr));
    let missing = plap(&["run", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}
