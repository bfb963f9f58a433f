use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"name = "tiny"
strategies = ["lwf_seg"]
seeds = [1]

[dataset]
volumes = 6
slices = 2

[split]
holdouts = [1]
counts = { current = 2, incremental = 1, validation = 1, test = 2 }

[network]
n_fil = 4
depth = 2
dropout_rate = 0.5
input_size = 32

[trainer]
n_stp = 4
eval_every = 2
"#;

fn incrseg(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_incrseg"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("INCRSEG_OUT");
    if let Some(p) = out_env {
        cmd.env("INCRSEG_OUT", p);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("c.toml");
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = incrseg(&["run", "--preset", "paper-table2-desk", "--out", out.to_str().unwrap(), "--dry-run"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("48 strategy cells"), "{text}");
    assert!(text.contains("holdout 2 IR01 seed 0"));
    assert!(!out.exists());
}

#[test]
fn overrides_narrow_the_grid() {
    let o = incrseg(
        &["run", "--dry-run", "--holdout", "3", "--ir", "IR17", "--strategy", "aei_seg,IncSeg", "--seed", "5,6"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("holdout 3 IR17 seed 6: cur=60 inc=10 val=5 test=25 strategies AeiSeg,IncSeg"), "{text}");
    assert!(text.contains("4 strategy cells"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("eval_every = 2", "eval_every = 0"));
    let o = incrseg(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainer.eval_every"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{TINY}bogus_key = 1\n"));
    let o = incrseg(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));

    let o = incrseg(&["run", "--preset", "nope", "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = incrseg(&["run", "--strategy", "unknown_seg", "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-dataset");
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = incrseg(
        &["run", "--config", cfg.to_str().unwrap(), "--dataset", missing.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = incrseg(&["report", dir.path().join("empty").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_writes_artifacts_under_out_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("env-out");
    let ignored = dir.path().join("flag-out");
    let o = incrseg(&["run", "--config", cfg.to_str().unwrap(), "--out", ignored.to_str().unwrap()], Some(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!ignored.exists());
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), TINY);
    let cell = out.join("h1/custom/seed1");
    for f in ["lwf_seg/model.ckpt", "lwf_seg/train_log.jsonl", "lwf_seg/metrics.json", "cur_seg/model.ckpt"] {
        assert!(cell.join(f).exists(), "{f}");
    }
    // The base model is trained for distillation but not reported.
    assert!(!cell.join("cur_seg/metrics.json").exists());
    let csv = fs::read_to_string(out.join("report/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("custom,LwfSeg,"));
    assert!(out.join("report/dice_custom.svg").exists() && out.join("report/msd_custom.svg").exists());

    let before: Vec<(PathBuf, Vec<u8>)> = files_under(&out).into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect();
    let o = incrseg(&["run", "--config", cfg.to_str().unwrap(), "--resume"], Some(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = cell.join("lwf_seg/model.ckpt");
    assert_eq!(before.iter().find(|(p, _)| *p == ckpt).unwrap().1, fs::read(&ckpt).unwrap());
    assert_eq!(
        before.iter().find(|(p, _)| p.ends_with("lwf_seg/metrics.json")).unwrap().1,
        fs::read(cell.join("lwf_seg/metrics.json")).unwrap()
    );

    // Reporting again leaves the table unchanged.
    let o = incrseg(&["report", out.to_str().unwrap()], None);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("report/summary.csv")).unwrap(), csv);
}

#[test]
fn synth_export_loads_as_a_directory_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = incrseg(&["synth", "--out", data.to_str().unwrap(), "--volumes", "6", "--slices", "2", "--seed", "3"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.txt").exists());
    assert!(data.join("vol_001/000_image.npy").exists());

    let cfg = write_config(dir.path(), TINY);
    let o = incrseg(&["run", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--dry-run"], None);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn split_prints_the_partition() {
    let o = incrseg(&["split", "--holdout", "1", "--ir", "IR01"], None);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"ir_label\": \"IR01\""));
    assert!(text.contains("\"incremental_ids\": [\n    80"), "{text}");
}
