use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bisup::analyzer::{datasets, trace_report, Report, ReportBody, RunConfig};
use bisup::io::ModelFile;
use bisup::model::{trace_propagation, Model, QuantizedModel, TraceTag};
use bisup::quant::QuantPlan;

const CONFIG: &str = r#"
seed = 11

[model_config]
n_layers = 2
d_model = 16
n_heads = 2
d_hidden = 32
vocab = 32

[data]
samples = 6
seq_len = 10

[calib]
epochs = 2
batch_size = 3
rank = 4

[sweep]
samples = [6]
iterations = [2]
ranks = [4]
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{CONFIG}\n{extra}")).unwrap();
    (dir, cfg)
}

fn bisup(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bisup"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .arg("--spec")
        .arg("W4A4-g8")
        .env("BISUP_THREADS", "2")
        .output()
        .unwrap()
}

fn report(path: &Path) -> Report {
    Report::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_command_is_byte_reproducible() {
    let (dir, cfg) = setup("");
    for cmd in ["synth", "calibrate", "trace", "ablate", "sweep", "gradcheck"] {
        let a = dir.path().join(format!("{cmd}-a.json"));
        let b = dir.path().join(format!("{cmd}-b.json"));
        for out in [&a, &b] {
            let o = bisup(&[cmd], &cfg, out);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{cmd} report differs");
        let r = report(&a);
        assert_eq!(r.command.name(), cmd);
        assert_eq!(r.to_json().unwrap(), fs::read_to_string(&a).unwrap());
        if matches!(cmd, "synth" | "calibrate") {
            let (ma, mb) = (a.with_extension("bsmd"), b.with_extension("bsmd"));
            assert_eq!(fs::read(ma).unwrap(), fs::read(mb).unwrap(), "{cmd} model file differs");
        }
    }
}

#[test]
fn synthesized_model_loads_and_runs_like_the_in_memory_one() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("synth.json");
    assert!(bisup(&["synth"], &cfg, &out).status.success());
    let loaded = ModelFile::load(&out.with_extension("bsmd")).unwrap();
    let run = RunConfig::load(&cfg).unwrap();
    let direct = Model::random(&run.model_config, run.seed).unwrap();
    assert_eq!(loaded.model, direct);
    assert_eq!(loaded.model.layers.len(), 2);
    let toks = [0, 1, 2, 30];
    assert_eq!(loaded.model.forward(&toks).unwrap(), direct.forward(&toks).unwrap());
}

#[test]
fn ablation_baseline_row_equals_an_independent_rtn_trace() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("ablate.json");
    assert!(bisup(&["ablate"], &cfg, &out).status.success());
    let ReportBody::Ablate(a) = report(&out).body else {
        panic!("wrong body")
    };
    let names: Vec<&str> = a.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["rtn", "+fwac", "+swas", "+slrec", "+prompt-mixed"]);

    let run = RunConfig::load(&cfg).unwrap();
    let model = Model::random(&run.model_config, run.seed).unwrap();
    let (calib, eval) = datasets(&run.data, &run.eval_spec(), 32, run.seed).unwrap();
    let rtn = QuantizedModel::rtn(model.clone(), QuantPlan::from(&"W4A4-g8".parse().unwrap())).unwrap();
    let eval_mse = trace_propagation(&model, &rtn, &eval, TraceTag::Eval)
        .unwrap()
        .final_mse();
    let calib_mse = trace_propagation(&model, &rtn, &calib, TraceTag::Calib)
        .unwrap()
        .final_mse();
    assert_eq!(a.rows[0].eval_final_mse, eval_mse);
    assert_eq!(a.rows[0].calib_final_mse, calib_mse);
}

#[test]
fn single_cell_sweep_equals_a_calibrate_run() {
    let (dir, cfg) = setup("");
    let (s, c) = (dir.path().join("sweep.json"), dir.path().join("cal.json"));
    assert!(bisup(&["sweep"], &cfg, &s).status.success());
    assert!(bisup(&["calibrate"], &cfg, &c).status.success());
    let ReportBody::Sweep(sw) = report(&s).body else {
        panic!()
    };
    let ReportBody::Calibrate(cal) = report(&c).body else {
        panic!()
    };
    assert_eq!(sw.cells.len(), 1);
    assert_eq!(sw.cells[0].eval_final_mse, cal.eval_final_mse);
    assert_eq!(sw.cells[0].calib_final_mse, cal.calib_final_mse);
    let partial = fs::read_to_string(dir.path().join("sweep.json.partial.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 1);
    assert!(dir.path().join("sweep.json.timing.json").exists());
}

#[test]
fn sweep_grid_has_one_row_per_cell_in_grid_order() {
    let (dir, cfg) = setup("");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "samples = [6]\niterations = [2]\nranks = [4]",
        "samples = [3, 6]\niterations = [1, 2]\nranks = [2, 4]",
    );
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("grid.csv");
    let o = bisup(&["sweep"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9);
    assert!(lines[0].starts_with("samples,iterations,rank,"));
    assert!(lines[1].starts_with("3,1,2,"));
    assert!(lines[8].starts_with("6,2,4,"));
}

#[test]
fn trace_of_a_calibrated_artifact_reports_suppression() {
    let (dir, cfg) = setup("");
    let cal = dir.path().join("cal.json");
    assert!(bisup(&["calibrate"], &cfg, &cal).status.success());
    let artifact = cal.with_extension("bsmd");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, format!("model = {:?}\n{text}", artifact.to_str().unwrap())).unwrap();
    let out = dir.path().join("trace.json");
    let o = bisup(&["trace"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ReportBody::Trace(t) = report(&out).body else {
        panic!()
    };
    assert_eq!(t.layers.len(), 2);
    for l in &t.layers {
        assert_eq!(l.suppression_eval, 1.0 - l.bisup_eval / l.baseline_eval);
    }

    // Baseline against itself suppresses nothing.
    let file = ModelFile::load(&artifact).unwrap();
    let run = RunConfig::load(&cfg).unwrap();
    let (calib, eval) = datasets(&run.data, &run.eval_spec(), 32, run.seed).unwrap();
    let rtn = QuantizedModel::rtn(file.model.clone(), QuantPlan::from(&"W4A4-g8".parse().unwrap())).unwrap();
    let same = trace_report(&file.model, &rtn, &rtn, &calib, &eval).unwrap();
    assert!(same
        .layers
        .iter()
        .all(|l| l.suppression_calib == 0.0 && l.suppression_eval == 0.0));
    let exact = QuantizedModel::new(file.model.clone(), QuantPlan::disabled(), rtn.theta.clone(), false).unwrap();
    let perfect = trace_report(&file.model, &rtn, &exact, &calib, &eval).unwrap();
    assert!(perfect.layers.iter().all(|l| l.suppression_eval == 1.0));

    // A different spec than the artifact's is a config error.
    let o = Command::new(env!("CARGO_BIN_EXE_bisup"))
        .args(["trace", "--spec", "W3A3-g8", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("r.json");
    let code = |args: &[&str], cfg: &Path| bisup(args, cfg, &out).status.code();
    assert_eq!(code(&["gradcheck"], &cfg), Some(0));
    assert_eq!(code(&["train"], &cfg), Some(2));
    assert_eq!(code(&["synth"], &dir.path().join("missing.toml")), Some(2));

    let (_d2, bad) = setup("");
    let text = fs::read_to_string(&bad)
        .unwrap()
        .replace("[calib]", "[calib]\nbatch_size = 0");
    fs::write(&bad, text).unwrap();
    assert_eq!(code(&["calibrate"], &bad), Some(2));

    let (_d3, huge) = setup("");
    let text = fs::read_to_string(&huge)
        .unwrap()
        .replace("[calib]", "[calib]\noptimizer = { lr = 1e6 }");
    fs::write(&huge, text).unwrap();
    assert_eq!(code(&["calibrate"], &huge), Some(3));

    let o = Command::new(env!("CARGO_BIN_EXE_bisup"))
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("BISUP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
