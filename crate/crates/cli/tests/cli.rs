use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
dim = 64
n_train = 12
seed = 3

[train.erm]
steps = 30
log_every = 10

[train.cutout]
steps = 30
log_every = 10

[train.cutmix]
steps = 30
log_every = 10

[eval]
n_test = 300
probe_size = 40
";

fn patchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchlab"))
        .args(args)
        .env_remove("PATCHLAB_SEED")
        .output()
        .expect("spawn patchlab")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_tiny(dir: &Path, out: &Path) {
    let cfg = write_config(dir, TINY);
    let res = patchlab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/does/not/exist");
    run_tiny(tmp.path(), &out);
    for top in ["config.cfg", "theory.json", "summary.json", "figure1.svg"] {
        assert!(out.join(top).is_file(), "missing {top}");
    }
    for label in ["erm", "cutout", "cutmix"] {
        for file in ["trace.csv", "weights.plwt", "accuracy.json", "accuracy_tiers.csv", "coefficients.json", "run.json"] {
            assert!(out.join(label).join(file).is_file(), "missing {label}/{file}");
        }
    }
}

#[test]
fn csv_outputs_are_rectangular() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    run_tiny(tmp.path(), &out);

    let mut reader = csv::Reader::from_path(out.join("erm/trace.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "t");
    assert!(header.iter().any(|h| h == "loss") && header.iter().any(|h| h == "grad_norm"));
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let steps: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 10, 20, 30]);

    let mut tiers = csv::Reader::from_path(out.join("cutmix/accuracy_tiers.csv")).unwrap();
    assert_eq!(
        tiers.headers().unwrap().iter().collect::<Vec<_>>(),
        ["tier", "correct", "total", "rate", "ci_low", "ci_high"]
    );
    let rows: Vec<_> = tiers.records().map(Result::unwrap).collect();
    assert_eq!(&rows.last().unwrap()[0], "all");
    let total: usize = rows[..rows.len() - 1].iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 300);
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_tiny(tmp.path(), &a);
    run_tiny(tmp.path(), &b);
    for label in ["erm", "cutout", "cutmix"] {
        for file in ["trace.csv", "weights.plwt", "accuracy.json"] {
            let (x, y) = (fs::read(a.join(label).join(file)).unwrap(), fs::read(b.join(label).join(file)).unwrap());
            assert!(x == y, "{label}/{file} differs between runs");
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("one"), tmp.path().join("four"));
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let res = patchlab(&["run", &cfg, "--out", dir.to_str().unwrap(), "--threads", threads]);
        assert!(res.status.success());
    }
    for label in ["erm", "cutout", "cutmix"] {
        assert_eq!(fs::read(a.join(label).join("trace.csv")).unwrap(), fs::read(b.join(label).join("trace.csv")).unwrap());
    }
}

#[test]
fn dry_run_has_no_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{TINY}\n[output]\ndir = {}\n", tmp.path().join("should_not_exist").display()));
    let res = patchlab(&["run", &cfg, "--dry-run"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("CutMix subsets: 2^P = 8"), "{text}");
    assert!(text.contains("smoothness constant"));
    assert!(!tmp.path().join("should_not_exist").exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn seed_override_changes_data_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("seeded");
    let res = Command::new(env!("CARGO_BIN_EXE_patchlab"))
        .args(["run", &cfg, "--out", out.to_str().unwrap(), "--no-plots"])
        .env("PATCHLAB_SEED", "11")
        .output()
        .unwrap();
    assert!(res.status.success());
    let written = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(written.contains("seed = 11"));
    assert!(!out.join("figure1.svg").exists());
}

#[test]
fn check_reports_table_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    run_tiny(tmp.path(), &out);
    let res = patchlab(&["check", out.to_str().unwrap()]);
    let table = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("run"));
    assert!(lines[1..].iter().all(|l| l.ends_with("PASS") || l.ends_with("FAIL")));
    let any_fail = lines.iter().any(|l| l.ends_with("FAIL"));
    assert_eq!(res.status.code(), Some(if any_fail { 1 } else { 0 }));
}

#[test]
fn check_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let res = patchlab(&["check", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no runs found"));
}

#[test]
fn invalid_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[data]\ndim = 64\nbogus = 1\n");
    let res = patchlab(&["run", &cfg, "--dry-run"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bundled_config_parses() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/figure1.cfg");
    let res = patchlab(&["run", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}
