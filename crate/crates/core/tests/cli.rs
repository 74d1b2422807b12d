use std::path::PathBuf;
use std::process::{Command, Output};

fn icdbm(args: &[&str], level_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icdbm"));
    cmd.args(args).env_remove("IC_DBM_LEVEL");
    if let Some(v) = level_env {
        cmd.env("IC_DBM_LEVEL", v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

#[test]
fn classify_shipped_corpus() {
    let o = icdbm(&["classify", corpus().to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("sites 40: O0 14  O1 9  O2 17"));
}

#[test]
fn classify_reports_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.site"), "site: x\nbase: 0x1000\nzz\n").unwrap();
    let o = icdbm(&["classify", dir.path().to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.site:3"));
}

#[test]
fn patch_demo_respects_level() {
    let fixture = corpus().join("listing.site");
    let f = fixture.to_str().unwrap();
    let o2 = stdout(&icdbm(&["patch-demo", f], None));
    assert!(o2.contains("48 8b 87 18 00 00 00"));
    let o1 = stdout(&icdbm(&["patch-demo", f], Some("1")));
    assert!(o1.contains("applied O1") && o1.contains("c7 c0 03 00 00 00"));
    // the flag wins over the environment
    let o0 = stdout(&icdbm(&["patch-demo", f, "--level", "0"], Some("2")));
    assert!(o0.contains("analysis only") && !o0.contains("after:"));
}

#[test]
fn malformed_level_is_an_error() {
    let f = corpus().join("listing.site");
    for bad in ["12", "", "O2", " 1"] {
        let o = icdbm(&["patch-demo", f.to_str().unwrap()], Some(bad));
        assert!(!o.status.success(), "{bad:?}");
    }
    assert!(!icdbm(&["bench", "mono", "--level", "3"], None).status.success());
}

#[test]
fn missing_inputs_fail() {
    assert!(!icdbm(&["classify", "/nonexistent/corpus"], None).status.success());
    assert!(!icdbm(&["patch-demo", "/nonexistent.site"], None).status.success());
    assert!(!icdbm(&["report", "/nonexistent/runs"], None).status.success());
    assert!(!icdbm(&["bench", "nosuch"], None).status.success());
}

#[cfg(all(target_arch = "x86_64", unix))]
#[test]
fn bench_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for level in ["0", "2"] {
        let o = icdbm(
            &["bench", "bishape", "--reps", "3", "--iterations", "2000", "--short", "--out", out],
            Some(level),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("checksums identical"));
    }
    // report refuses a scenario without its level 0 run
    let o = icdbm(&["bench", "mono", "--reps", "2", "--iterations", "100", "--level", "2", "--out", out], None);
    assert!(o.status.success());
    assert!(!icdbm(&["report", out], None).status.success());
    std::fs::remove_file(dir.path().join("mono-O2.json")).unwrap();

    let o = icdbm(&["report", out], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hist = std::fs::read_to_string(dir.path().join("rq1_histogram.csv")).unwrap();
    assert!(hist.starts_with("# icdbm-report v1"));
    assert!(hist.contains("bishape,O2,1,1,2,4"));
    let time = std::fs::read_to_string(dir.path().join("rq4_time.csv")).unwrap();
    assert!(time.lines().count() == 4, "{time}");
}
