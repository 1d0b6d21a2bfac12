use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [3]
scenarios = 1
k = 1

[world]
grid_size = 16
object_count = [3, 4]
ego_range = 8.0
collaborator_range = 8.0
query_frames = 2
max_support = 1

[pretrain]
scenarios = 1
epochs = 2
"#;

fn phcp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phcp"))
        .args(args)
        .env("PHCP_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = phcp(dir.path(), &["show-config"]);
    assert_eq!(code(&o), 0);
    let cfg = write_config(dir.path(), &String::from_utf8(o.stdout).unwrap());
    assert_eq!(code(&phcp(dir.path(), &["--config", &cfg, "show-config"])), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    assert_eq!(code(&phcp(dir.path(), &["--config", &cfg, "gen-data"])), 2);
    let cfg = write_config(dir.path(), "schema_version = 99\n");
    assert_eq!(code(&phcp(dir.path(), &["--config", &cfg, "gen-data"])), 2);
    assert_eq!(code(&phcp(dir.path(), &["run", "--mode", "telepathy"])), 2);
}

#[test]
fn missing_prerequisites_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = phcp(dir.path(), &["--config", &cfg, "run", "--mode", "phcp"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
    assert_eq!(code(&phcp(dir.path(), &["replay", "no-such.trace"])), 1);
}

#[test]
fn diverging_pretraining_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}base_lr = 1e300\noptimizer = {{ kind = \"sgd\" }}\n"));
    let o = phcp(dir.path(), &["--config", &cfg, "pretrain"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), TINY);
    for args in [&["gen-data"][..], &["pretrain"], &["run", "--mode", "late"], &["run", "--mode", "phcp"]] {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = phcp(&out, &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["reports/phcp.json", "reports/phcp.csv", "reports/late.csv", "manifests/run-phcp.json", "models/lp.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("reports/phcp.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("scenario,mode,")), "{csv}");
    let trace = fs::read_dir(out.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "trace") && p.to_string_lossy().contains("phcp"))
        .unwrap();
    let o = phcp(&out, &["replay", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("stage1") && text.contains("stage2"), "{text}");
}
