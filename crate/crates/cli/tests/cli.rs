use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seed = 2
axes = ["gender"]

[folds]
phase1 = 3
single_axis = 3
validation_fraction = 0.0

[dataset.synthetic]
n_subjects = 12
epochs_per_subject = 8
channels = 2
samples_per_epoch = 64
sample_rate_hz = 64.0

[model]
n_channels = 2
samples_per_epoch = 64
conv_filters = [4, 8, 8, 16]
feature_dim = 16
lstm_hidden = 8
seq_len = 4

[pretrain]
max_epochs = 1
batch_size = 8

[finetune]
max_epochs = 1
batch_size = 8
"#;

fn sleepstage(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sleepstage")).args(args).output().unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap(), text)
}

fn setup(dir: &Path) -> (String, String) {
    let config = dir.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    (config.to_str().unwrap().to_string(), dir.join("out").to_str().unwrap().to_string())
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = sleepstage(&["--config", "/nonexistent/x.toml", "plan"]);
    assert_eq!(code, 2, "{text}");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"one\"").unwrap();
    let (code, text) = sleepstage(&["--config", bad.to_str().unwrap(), "plan"]);
    assert_eq!(code, 2, "{text}");
    let (code, _) = sleepstage(&["plan"]);
    assert_eq!(code, 2);
}

#[test]
fn plan_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = setup(dir.path());
    let base = ["--config", config.as_str(), "--out", out.as_str()];
    let with = |extra: &[&str]| sleepstage(&[&base[..], extra].concat());

    let (code, text) = with(&["plan"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = with(&["verify-plan"]);
    assert_eq!((code, text.trim()), (0, "no leakage found"));

    let p1 = Path::new(&out).join("plans/phase1.json");
    let p2 = Path::new(&out).join("plans/phase2.json");
    let mut phase2: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p2).unwrap()).unwrap();
    let phase1: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p1).unwrap()).unwrap();
    let fold = &mut phase2["plans"][0]["folds"][0];
    let ckpt = fold["checkpoint_index"].as_u64().unwrap() as usize;
    let intruder = phase1["folds"][ckpt]["train"][0].clone();
    fold["test"].as_array_mut().unwrap().push(intruder.clone());
    fs::write(&p2, serde_json::to_string_pretty(&phase2).unwrap()).unwrap();
    let (code, text) = sleepstage(&["verify-plan", "--phase1", p1.to_str().unwrap(), "--phase2", p2.to_str().unwrap()]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains(intruder.as_str().unwrap()), "{text}");

    fs::write(&p2, "[1, 2").unwrap();
    let (code, text) = with(&["verify-plan"]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn run_report_check_and_evaluate_firewall() {
    let dir = tempfile::tempdir().unwrap();
    let (config, out) = setup(dir.path());
    let base = ["--config", config.as_str(), "--out", out.as_str()];
    let with = |extra: &[&str]| sleepstage(&[&base[..], extra].concat());

    let (code, text) = with(&["--format", "csv", "run"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("Baseline") && text.contains("run id"), "{text}");
    let reports = Path::new(&out).join("reports");
    assert!(reports.join("single_axis.csv").exists());
    assert!(!reports.join("single_axis.md").exists());

    let (code, text) = with(&["report", "--check"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.starts_with("report matches run files"), "{text}");

    let ckpt = Path::new(&out).join("checkpoints/phase1_fold0.ckpt");
    let (code, text) = with(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("kappa"), "{text}");

    let phase1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("plans/phase1.json")).unwrap()).unwrap();
    let train_subject = phase1["folds"][0]["train"][0].as_str().unwrap().to_string();
    let (code, text) = with(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--subjects", &train_subject]);
    assert_eq!(code, 1, "{text}");

    let bundle = reports.join("bundle.json");
    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bundle).unwrap()).unwrap();
    value["tables"][0]["rows"][0]["subjects"] = serde_json::json!(999);
    fs::write(&bundle, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    let (code, text) = with(&["report", "--check"]);
    assert_eq!(code, 3, "{text}");
}
