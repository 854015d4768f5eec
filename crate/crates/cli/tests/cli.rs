use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
train_tasks = 3
test_tasks = 2

[data]
n_per_level = 2

[encoder]
steps = 3
hidden_width = 8

[encoder.loss]
batch_size = 8

[iql]
steps = 3
batch_size = 8
hidden = [8, 8]

[eval]
episodes = 2
"#;

fn hsomrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsomrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = setup(TINY);
    let d = dir.path();
    let base = ["--config", "run.toml", "--out", "run", "--seed", "4"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let call = |extra: &[&str]| {
        let args = with(extra);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        hsomrl(d, &refs)
    };

    ok(call(&["gen-data"]));
    let manifest = fs::read_to_string(d.join("run/data/train/manifest.json")).unwrap();
    assert!(manifest.contains("\"format_version\": 1"));
    assert_eq!(fs::read_dir(d.join("run/data/train")).unwrap().count(), 4);

    ok(call(&["train-encoder", "--loss", "hphg"]));
    let enc = "run/encoder_hphg_s4.ckpt";
    assert!(d.join(enc).is_file());
    let enc_csv = fs::read_to_string(d.join("run/encoder_hphg_s4_loss.csv")).unwrap();
    assert!(enc_csv.starts_with("step,variant,loss,wallclock_ms\n"));
    assert_eq!(enc_csv.lines().count(), 4);

    ok(call(&["train-policy", "--encoder", enc]));
    let pol_csv = fs::read_to_string(d.join("run/policy_hphg_s4_loss.csv")).unwrap();
    assert_eq!(pol_csv.lines().next().unwrap(), "step,v_loss,q_loss,pi_loss");

    let pol = "run/policy_hphg_s4.ckpt";
    let stdout = ok(call(&["eval", "--bucket", "low", "--encoder", enc, "--policy", pol]));
    assert!(stdout.contains('±'));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval_hphg_s4_b0.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "hphg");
    assert_eq!(report["seeds"], serde_json::json!([4]));
    assert_eq!(report["per_task"].as_array().unwrap().len(), 2);
    assert!(report["aggregate"]["mean"].is_f64() && report["aggregate"]["std"].is_f64());
    for entry in report["per_task"].as_array().unwrap() {
        assert_eq!(entry["bucket"], 0);
    }
    ok(call(&["eval", "--bucket", "9", "--encoder", enc, "--policy", pol]));
    assert!(d.join("run/eval_hphg_s4_b9.json").is_file());

    ok(call(&["export-embeddings", "--encoder", enc, "--views", "2", "--output", "z.csv"]));
    let csv = fs::read_to_string(d.join("z.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 20);
    let stdout = ok(call(&["metrics", "--embeddings", "z.csv", "--output", "m.json"]));
    let metrics: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(metrics["uniformity_temperature"], 2.0);
    assert!(metrics["alignment"].is_f64());

    for stage in ["gen-data", "train-encoder_hphg_s4", "train-policy_hphg_s4"] {
        let m = fs::read_to_string(d.join(format!("run/{stage}.manifest.json"))).unwrap();
        assert!(m.contains("\"status\": \"complete\""), "{stage}");
    }
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = setup(TINY);
    for out in ["a", "b"] {
        ok(hsomrl(dir.path(), &["--config", "run.toml", "--out", out, "gen-data"]));
    }
    for split in ["train", "test"] {
        for f in ["manifest.json", "task_0.jsonl", "task_1.jsonl"] {
            let a = fs::read(dir.path().join(format!("a/data/{split}/{f}"))).unwrap();
            let b = fs::read(dir.path().join(format!("b/data/{split}/{f}"))).unwrap();
            assert_eq!(a, b, "{split}/{f}");
        }
    }
}

#[test]
fn invalid_family_exits_2_naming_valid_families() {
    let dir = setup(TINY);
    let out = hsomrl(dir.path(), &["--family", "HalfCheetah", "gen-data"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["PointRobotGoal", "LineVel", "DirWorld"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = setup("trian_tasks = 3\n");
    assert_eq!(code(&hsomrl(dir.path(), &["--config", "run.toml", "gen-data"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = setup(TINY);
    let d = dir.path();
    assert_eq!(code(&hsomrl(d, &["--config", "run.toml", "--out", "empty", "train-encoder"])), 3);
    assert_eq!(code(&hsomrl(d, &["--config", "nope.toml", "gen-data"])), 3);
    ok(hsomrl(d, &["--config", "run.toml", "--out", "r", "gen-data"]));
    assert_eq!(
        code(&hsomrl(d, &["--config", "run.toml", "--out", "r", "train-policy", "--encoder", "missing.ckpt"])),
        3
    );
}

#[test]
fn single_task_dataset_is_a_precondition_error() {
    let dir = setup(&TINY.replace("train_tasks = 3", "train_tasks = 1"));
    let d = dir.path();
    ok(hsomrl(d, &["--config", "run.toml", "--out", "r", "gen-data"]));
    let out = hsomrl(d, &["--config", "run.toml", "--out", "r", "train-encoder", "--loss", "scl"]);
    assert_eq!(code(&out), 7);
    assert!(String::from_utf8_lossy(&out.stderr).contains("task"));
}

#[test]
fn encoder_from_another_family_is_rejected() {
    let dir = setup(TINY);
    let d = dir.path();
    ok(hsomrl(d, &["--config", "run.toml", "--out", "p", "gen-data"]));
    ok(hsomrl(d, &["--config", "run.toml", "--out", "p", "train-encoder"]));
    ok(hsomrl(d, &["--config", "run.toml", "--out", "l", "--family", "LineVel", "gen-data"]));
    let out = hsomrl(
        d,
        &["--config", "run.toml", "--out", "l", "--family", "LineVel", "train-policy", "--encoder", "p/encoder_hphg_s0.ckpt"],
    );
    assert_eq!(code(&out), 6);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("PointRobotGoal") && err.contains("LineVel"), "{err}");
}

#[test]
fn locked_output_directory_exits_8() {
    let dir = setup(TINY);
    fs::create_dir_all(dir.path().join("r")).unwrap();
    fs::write(dir.path().join("r/.hsomrl.lock"), "1").unwrap();
    assert_eq!(code(&hsomrl(dir.path(), &["--config", "run.toml", "--out", "r", "gen-data"])), 8);
}

#[test]
fn bad_bucket_and_bad_threads_exit_2() {
    let dir = setup(TINY);
    let out = hsomrl(dir.path(), &["eval", "--bucket", "best", "--encoder", "e", "--policy", "p"]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_hsomrl"))
        .current_dir(dir.path())
        .env("HSOMRL_THREADS", "zero")
        .args(["gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
