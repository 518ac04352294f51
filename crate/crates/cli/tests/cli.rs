use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
schemes = ["SS-MGSC"]
power_grid_dbm = [20.0, 40.0]
seeds = [0, 1]
eval_steps = 6

[ppo]
max_episodes = 2
buffer_capacity = 32
minibatch_size = 16
epochs_per_update = 1
hidden = [8]

[ber_sweep]
grid = [0.0, 0.01]
trials = 2
"#;

fn semsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsplit")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for bad in [
        "schema_version = 1\ntypo_key = 3\n",
        "schema_version = 7\n",
        "schema_version = 1\nseeds = []\n",
        "schema_version = 1\n[env]\nn_users = 3\ndistances_m = [30.0]\n",
        "not toml at all [",
    ] {
        let cfg = write_config(dir.path(), bad);
        let o = semsplit(&["train", "--config", &cfg, "--out", out]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = semsplit(&["train", "--config", "/nonexistent/exp.toml", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), TINY);
    let o = semsplit(&["evaluate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "missing output directory");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("empty");
    let o = semsplit(&["evaluate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = semsplit(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.csv", "config.resolved.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("logs").join("SS-MGSC_p20_lr0.001_s3.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "episode,mean_reward,mean_ses_per_user,power_violation_rate,ses_violation_rate"
    );
    assert_eq!(log.lines().count(), 3);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "two powers, one seed");
    assert!(out.join("checkpoints").join("SS-MGSC_p40_lr0.001_s3.ckpt").is_file());

    let o = semsplit(&["evaluate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let again = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    // Evaluation rows are identical; only the training columns are empty now.
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.rsplitn(3, ',').nth(2).unwrap().to_owned())
            .collect()
    };
    assert_eq!(strip(&summary), strip(&again));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = semsplit(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["metrics.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn other_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();

    let o = semsplit(&["sweep-ber", "--config", &cfg, "--out", out, "--seed", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ber = std::fs::read_to_string(Path::new(out).join("ber_sweep.csv")).unwrap();
    assert_eq!(ber.lines().count(), 1 + 2 * 3);

    let o = semsplit(&["sweep-power", "--config", &cfg, "--out", out, "--seed", "0"]);
    assert!(o.status.success());
    let pw = std::fs::read_to_string(Path::new(out).join("power_sweep.csv")).unwrap();
    assert_eq!(pw.lines().count(), 3);

    let o = semsplit(&["compare-schemes", "--config", &cfg, "--out", out, "--seed", "0"]);
    assert!(o.status.success());
    let cmp = std::fs::read_to_string(Path::new(out).join("scheme_comparison.csv")).unwrap();
    assert!(cmp.starts_with("p_max_dbm,lr_actor,seed,ses_SS-MGSC,ses_SegS-MGSC,ses_O-MGSC,ses_T-MGSC,ordering_holds"));
    assert_eq!(cmp.lines().count(), 3);
}
