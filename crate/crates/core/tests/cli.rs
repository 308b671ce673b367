use std::path::Path;
use std::process::{Command, Output};

fn clicooper(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clicooper"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn verify_args(run: &str) -> Vec<String> {
    let mut a: Vec<String> = ["verify", "--cache", &format!("{run}/cache.cldp"), "--manifest", &format!("{run}/manifest.json")]
        .map(String::from)
        .to_vec();
    a.push("--checkpoints".into());
    a.extend((1..=3).map(|i| format!("{run}/trainer_{i}.clwc")));
    a
}

#[test]
fn run_verify_tamper_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = {
        let mut c = clicooper::harness::RunConfig::default();
        c.plan.epochs = 3;
        c
    };
    cfg.save(&dir.path().join("cfg.json")).unwrap();

    let out = clicooper(&["run", "--config", "cfg.json", "--out-dir", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Success"));

    let mut args = verify_args("run");
    args.extend(["--client", "run/client.clwc", "--test", "run/test_pseudo.json", "--out-dir", "v"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = clicooper(&refs, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("v/verification.json").is_file());

    let swapped: Vec<String> = {
        let mut a = verify_args("run");
        let n = a.len();
        a.swap(n - 3, n - 2);
        a
    };
    let refs: Vec<&str> = swapped.iter().map(String::as_str).collect();
    assert_eq!(clicooper(&refs, dir.path()).status.code(), Some(2));

    let out = clicooper(&["report", "run", "--out-dir", "rep"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("rep/report.csv").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains(&clicooper::harness::run_id(&cfg).unwrap()));

    let cache = dir.path().join("run/cache.cldp");
    let mut bytes = std::fs::read(&cache).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&cache, bytes).unwrap();
    let args = verify_args("run");
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = clicooper(&refs, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("CacheDigest"));
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(clicooper(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(clicooper(&["sweep", "--axis", "lr", "--values", "1"], dir.path()).status.code(), Some(1));
    let out = clicooper(&["sweep", "--axis", "epsilon", "--values", "abc"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("abc"));
    let out = clicooper(&["report", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(clicooper(&["--help"], dir.path()).status.code(), Some(0));
}
