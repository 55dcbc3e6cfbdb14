use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use isql::cli::config::{EnvKind, ExperimentConfig, ExperimentKind};
use isql::cli::serve::{serve, Request, Service, PROTOCOL};
use isql::cli::table::{emit_plot_data, Table};
use isql::cli::{eval_dir, inspect, run_experiment, RunResults, FAILURE_MARKER};
use isql::envs::{action_from_name, Environment, GridWorld, PointMass2D, ACTION_NAMES};
use isql::isql::TrainArtifact;
use isql::soft::State;
use isql::transfer::transfer_action;
use serde_json::Value;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn grid_config(dir: &Path) -> String {
    format!(
        r#"
kind = "grid_scramble"
output_dir = "{}"
seeds = [0, 1]

[grid_scramble]
task_counts = [1, 3]
demos_per_task = 30

[[grid_scramble.conditions]]
scramble = "local"

[isql]
iterations = 60
"#,
        dir.display()
    )
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn shipped_configs_validate() {
    let mut seen = 0;
    for e in std::fs::read_dir(configs_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    let base = "kind = \"pointmass\"\n";
    assert!(ExperimentConfig::from_toml(base).is_ok());
    for extra in [
        "colour = 1\n",
        "[grid]\nwidth = 7\nwdith = 7\n",
        "[pointmass]\nlattice = 7\nradius = 1\n",
        "[isql]\nrho = 1.0\nlr = 1\n",
        "[pointmass_run]\ntask = 3\n",
        "[serve]\nport = 1\n",
    ] {
        let err = ExperimentConfig::from_toml(&format!("{base}{extra}")).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{extra}: {err}");
    }
    assert!(ExperimentConfig::from_toml("kind = \"bogus\"\n").is_err());
}

#[test]
fn invalid_values_are_rejected_before_running() {
    for text in [
        "kind = \"grid_scramble\"\nseeds = []\n",
        "kind = \"grid_scramble\"\nseeds = [1, 1]\n",
        "kind = \"grid_scramble\"\n[grid_scramble]\ntask_counts = [50]\n",
        "kind = \"pointmass\"\n[pointmass_run]\nfamily = \"tabular\"\n",
        "kind = \"pointmass\"\n[pointmass_run]\nfamily = \"categorical_mixture\"\ncandidates = 1\n",
        "kind = \"pointmass\"\n[isql]\nrho = -1.0\n",
        "kind = \"serve\"\n[serve]\ntask = 49\n",
        "kind = \"assist_eval\"\n[assist]\nenvs = []\n",
    ] {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
}

#[test]
fn pointmass_runs_default_to_continuous_trainer_settings() {
    let c = ExperimentConfig::from_toml("kind = \"pointmass\"\n[pointmass_run]\nfamily = \"categorical_mixture\"\n").unwrap();
    let isql = c.pointmass_isql();
    assert_eq!(isql.rho, 2.0);
    assert_eq!(isql.family, isql::isql::DynamicsFamily::CategoricalMixture);
    assert_eq!(c.grid_isql().rho, 2e-3);
}

#[test]
fn grid_runs_are_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let c = ExperimentConfig::from_toml(&grid_config(&a)).unwrap();
    let report = run_experiment(&c).unwrap();
    let first = files(&a);
    std::fs::remove_dir_all(&a).unwrap();
    run_experiment(&c).unwrap();
    assert_eq!(first, files(&a));
    for name in ["config.json", "runs.csv", "accuracy_curve.csv", "accuracy_vs_tasks.csv"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let RunResults::Grid(results) = report.results else {
        panic!("grid results expected")
    };
    assert_eq!(results.len(), 4);
    for r in &results {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.artifact.task_ids.len(), r.tasks);
    }
    assert!(report.warnings.is_empty());
}

#[test]
fn plot_data_matches_recomputation_from_raw_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::from_toml(&grid_config(tmp.path())).unwrap();
    c.seeds = vec![3, 4, 5];
    run_experiment(&c).unwrap();
    let runs = Table::from_csv(&std::fs::read_to_string(tmp.path().join("runs.csv")).unwrap()).unwrap();
    let plot = Table::from_csv(&std::fs::read_to_string(tmp.path().join("accuracy_vs_tasks.csv")).unwrap()).unwrap();
    let acc = runs.column("accuracy").unwrap();
    let tasks = runs.column("tasks").unwrap();
    for row in &plot.rows {
        let xs: Vec<f64> = runs
            .rows
            .iter()
            .filter(|r| r[tasks] == row[1])
            .map(|r| r[acc].parse().unwrap())
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_eq!(row[2], "3");
        assert!((row[3].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((row[4].parse::<f64>().unwrap() - (var / n).sqrt()).abs() < 1e-12);
    }
    assert_eq!(plot.rows.len(), 2);
    let single = emit_plot_data(&runs, &["seed", "tasks"], "accuracy").unwrap();
    assert_eq!(single.warnings.len(), 6);
}

#[test]
fn failed_runs_leave_a_marker_and_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "kind = \"assist_eval\"\noutput_dir = \"{}\"\n[assist]\nenvs = [\"grid\"]\ngrid_artifact = \"{}\"\n",
        tmp.path().display(),
        tmp.path().join("missing.json").display()
    );
    let c = ExperimentConfig::from_toml(&text).unwrap();
    assert!(run_experiment(&c).is_err());
    assert!(tmp.path().join(FAILURE_MARKER).exists());
    assert!(tmp.path().join("config.json").exists());
    assert!(eval_dir(tmp.path()).unwrap().failed.is_some());
}

#[test]
fn eval_and_inspect_reload_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = ExperimentConfig::from_toml(&grid_config(tmp.path())).unwrap();
    run_experiment(&c).unwrap();
    let report = eval_dir(tmp.path()).unwrap();
    assert!(report.failed.is_none());
    assert_eq!(report.artifacts.rows.len(), 4);
    let path = tmp.path().join("artifacts/local_n3_seed1.json");
    let summary = inspect(&path).unwrap();
    assert_eq!(summary["tasks"].as_array().unwrap().len(), 3);
    assert_eq!(summary["phi"]["family"], "tabular");
    let a = TrainArtifact::load(&path).unwrap();
    assert!(TrainArtifact::load_checked(&path, "0000000000000000", false).is_err());
    assert!(TrainArtifact::load_checked(&path, "0000000000000000", true).is_ok());
    assert!(TrainArtifact::load_checked(&path, &a.config_hash, false).is_ok());
}

#[test]
fn every_experiment_kind_runs_at_toy_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (
            "pointmass",
            "kind = \"pointmass\"\n[pointmass_run]\ntasks = 2\ndemos_per_task = 3\nrollouts = 4\n[isql]\nrho = 2.0\niterations = 20\ndemo_batch = 16\npenalty_batch = 16\nlog_every = 5\n",
            vec!["params.csv", "param_error_vs_iteration.csv"],
        ),
        (
            "mixture",
            "kind = \"pointmass\"\n[pointmass_run]\ntasks = 2\ndemos_per_task = 3\nrollouts = 4\nfamily = \"categorical_mixture\"\ncandidates = 3\n[isql]\nrho = 2.0\niterations = 20\ndemo_batch = 16\npenalty_batch = 16\nlog_every = 5\n",
            vec!["truth_weight_vs_iteration.csv"],
        ),
        (
            "irl",
            "kind = \"irl_misguided\"\n[irl]\ntasks = 1\ndemos_per_task = 20\ntraining_tasks = 2\ntraining_demos_per_task = 20\neval_episodes = 5\niterations = 3\n[isql]\niterations = 20\n",
            vec!["returns.csv", "return_by_condition.csv", "phi_accuracy.csv"],
        ),
        (
            "assist",
            "kind = \"assist_eval\"\n[assist]\nenvs = [\"grid\"]\nepisodes = 4\ntasks = 2\ndemos_per_task = 10\n[isql]\niterations = 20\n",
            vec!["assistance.csv", "success_by_condition.csv", "reference.csv"],
        ),
    ];
    for (name, text, expected) in cases {
        let mut c = ExperimentConfig::from_toml(text).unwrap();
        c.output_dir = tmp.path().join(name);
        let report = run_experiment(&c).unwrap_or_else(|e| panic!("{name}: {e}"));
        for f in expected {
            assert!(c.output_dir.join(f).exists(), "{name}: {f}");
        }
        assert!(!report.warnings.is_empty(), "{name}: a single seed should warn");
    }
}

#[test]
fn serve_configs_do_not_run_as_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::from_toml("kind = \"serve\"\n").unwrap();
    c.output_dir = tmp.path().to_path_buf();
    assert_eq!(c.kind, ExperimentKind::Serve);
    assert!(run_experiment(&c).is_err());
}

fn service(assist_phi_real: bool) -> Service {
    let pm = PointMass2D::default();
    let phi = assist_phi_real.then(|| (pm.real_dynamics(), "real".to_string()));
    Service::new(EnvKind::Pointmass, GridWorld::default(), pm, phi, 24).unwrap()
}

fn call(s: &Service, line: &str) -> Value {
    serde_json::from_str(&s.handle_line(line)).unwrap()
}

fn state_of(v: &Value) -> State {
    let xs: Vec<f64> = v["state"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    State::Continuous([xs[0], xs[1], xs[2], xs[3]].into())
}

#[test]
fn unassisted_step_applies_raw_dynamics() {
    let s = service(false);
    let pm = PointMass2D::default();
    let start = call(&s, r#"{"type":"start","session":"x","seed":5}"#);
    assert_eq!(start["protocol"], PROTOCOL);
    assert_eq!(start["assist"], false);
    let step = call(&s, r#"{"type":"step","session":"x","action":"right"}"#);
    let expected = pm.step(24, &state_of(&start), 3, 0);
    assert_eq!(state_of(&step), expected.next);
    assert_eq!(step["reward"].as_f64().unwrap(), expected.reward);
    assert_eq!(step["user_action"], "right");
    assert_eq!(step["executed_action"], "right");
    assert!(step.get("scores").is_none());
    assert_eq!(step["step"], 1);
}

#[test]
fn assisted_step_matches_transfer_action() {
    let s = service(false);
    let pm = PointMass2D::default();
    let phi = isql::models::DynamicsModel::Linear(
        isql::models::LinearDynamics::new(isql::cli::config::VELOCITY_BELIEF).unwrap(),
    );
    call(&s, r#"{"type":"start","session":"x","assist":true,"seed":9}"#);
    let mut changed = 0;
    for a in ["up", "up", "right", "right", "left", "down", "down", "right", "up", "left"] {
        let before = s.session("x").unwrap();
        if before.done {
            break;
        }
        let reply = call(&s, &format!(r#"{{"type":"step","session":"x","action":"{a}"}}"#));
        let d = transfer_action(&phi, &pm.real_dynamics(), &before.state, action_from_name(a).unwrap()).unwrap();
        assert_eq!(reply["executed_action"], ACTION_NAMES[d.executed_action]);
        let scores: Vec<f64> = reply["scores"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(scores, d.scores);
        assert_eq!(state_of(&reply), pm.step(24, &before.state, d.executed_action, before.episode_step).next);
        changed += usize::from(reply["executed_action"] != reply["user_action"]);
    }
    assert!(changed > 0, "velocity-belief assistance should override some actions");
}

#[test]
fn reset_draws_fresh_reproducible_states() {
    let s = service(false);
    let a0 = call(&s, r#"{"type":"start","session":"a","seed":1}"#);
    let b0 = call(&s, r#"{"type":"start","session":"b","seed":1}"#);
    assert_eq!(a0["state"], b0["state"]);
    call(&s, r#"{"type":"step","session":"a","action":"up"}"#);
    let a1 = call(&s, r#"{"type":"reset","session":"a"}"#);
    let b1 = call(&s, r#"{"type":"reset","session":"b"}"#);
    assert_eq!(a1["state"], b1["state"]);
    assert_ne!(a1["state"], a0["state"]);
    assert_eq!(a1["episode"], 1);
    assert_eq!(a1["step"], 1, "the step index does not go back on reset");
    let c0 = call(&s, r#"{"type":"start","session":"c","seed":2}"#);
    assert_ne!(c0["state"], a0["state"]);
    let v = a1["state"].as_array().unwrap();
    assert!(v[..2].iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
    assert_eq!(v[2], 0.0);
}

#[test]
fn terminated_sessions_reject_steps_until_reset() {
    let s = service(false);
    call(&s, r#"{"type":"start","session":"t","seed":0}"#);
    let mut last = Value::Null;
    let mut n = 0;
    while n < 1000 {
        last = call(&s, r#"{"type":"step","session":"t","action":"left"}"#);
        n += 1;
        if last["done"] == true {
            break;
        }
    }
    assert_eq!(last["done"], true);
    let outcome = last["outcome"].as_str().unwrap();
    assert!(outcome == "out_of_bounds" || outcome == "timeout", "{outcome}");
    let rejected = call(&s, r#"{"type":"step","session":"t","action":"right"}"#);
    assert_eq!(rejected["ok"], false);
    assert_eq!(rejected["error"]["code"], "terminated");
    assert_eq!(s.session("t").unwrap().step, n);
    let r = call(&s, r#"{"type":"reset","session":"t"}"#);
    assert_eq!(r["done"], false);
    assert_eq!(call(&s, r#"{"type":"step","session":"t","action":"right"}"#)["ok"], true);
}

#[test]
fn errors_are_structured_and_preserve_the_session() {
    let s = service(false);
    call(&s, r#"{"type":"start","session":"e","seed":4}"#);
    let before = s.session("e").unwrap();
    for (line, code) in [
        ("not json", "malformed"),
        (r#"{"type":"step","session":"e","action":"up","extra":1}"#, "malformed"),
        (r#"{"type":"jump","session":"e"}"#, "malformed"),
        (r#"{"type":"step","session":"e"}"#, "bad_action"),
        (r#"{"type":"step","session":"e","action":"north"}"#, "bad_action"),
        (r#"{"type":"step","session":"e","action":7}"#, "bad_action"),
        (r#"{"type":"step","session":"e","action":[1]}"#, "bad_action"),
        (r#"{"type":"start","session":"e"}"#, "duplicate_session"),
        (r#"{"type":"step","session":"nobody","action":"up"}"#, "unknown_session"),
    ] {
        let r = call(&s, line);
        assert_eq!(r["ok"], false, "{line}");
        assert_eq!(r["error"]["code"], code, "{line}");
        assert_eq!(r["protocol"], PROTOCOL);
    }
    let after = s.session("e").unwrap();
    assert_eq!(after.state, before.state);
    assert_eq!(after.step, before.step);
    assert_eq!(call(&s, r#"{"type":"step","session":"e","action":2}"#)["executed_action"], "left");
    assert_eq!(call(&s, r#"{"type":"stop","session":"e"}"#)["ok"], true);
    assert!(s.session("e").is_none());
}

#[test]
fn reply_fields_follow_the_documented_order() {
    let s = service(false);
    call(&s, r#"{"type":"start","session":"o","assist":true}"#);
    let line = s.handle_line(r#"{"type":"step","session":"o","action":"down"}"#);
    let order = [
        "protocol",
        "ok",
        "type",
        "session",
        "state",
        "step",
        "episode",
        "reward",
        "done",
        "outcome",
        "user_action",
        "executed_action",
        "scores",
        "assist",
        "target",
    ];
    let positions: Vec<usize> = order.iter().map(|k| line.find(&format!("\"{k}\":")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    let doc = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/protocol.md")).unwrap();
    let doc = &doc[doc.find("## Replies").unwrap()..];
    let doc_positions: Vec<usize> = order.iter().map(|k| doc.find(&format!("| `{k}`")).unwrap()).collect();
    assert!(doc_positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn requests_parse_with_optional_fields() {
    let r: Request = serde_json::from_str(r#"{"type":"stop","session":"z"}"#).unwrap();
    assert_eq!(r.kind, "stop");
    assert!(r.action.is_none() && r.assist.is_none());
}

#[test]
fn concurrent_sessions_with_equal_seeds_agree() {
    let s = Arc::new(service(false));
    let actions = ["up", "right", "right", "down", "left", "up", "up", "right"];
    let handles: Vec<_> = (0..6)
        .map(|i| {
            let s = Arc::clone(&s);
            std::thread::spawn(move || {
                let id = format!("c{i}");
                let mut states = vec![call(&s, &format!(r#"{{"type":"start","session":"{id}","seed":11,"assist":true}}"#))["state"].clone()];
                for _ in 0..5 {
                    for a in actions {
                        let r = call(&s, &format!(r#"{{"type":"step","session":"{id}","action":"{a}"}}"#));
                        states.push(r["state"].clone());
                        if r["done"] == true {
                            break;
                        }
                    }
                    states.push(call(&s, &format!(r#"{{"type":"reset","session":"{id}"}}"#))["state"].clone());
                }
                states
            })
        })
        .collect();
    let runs: Vec<Vec<Value>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn grid_sessions_report_cells() {
    let s = Service::new(EnvKind::Grid, GridWorld::default(), PointMass2D::default(), None, 10).unwrap();
    assert_eq!(s.phi_ref, "real");
    let r = call(&s, r#"{"type":"start","session":"g","assist":true}"#);
    assert_eq!(r["target"], serde_json::json!([10.0]));
    let step = call(&s, r#"{"type":"step","session":"g","action":"up"}"#);
    assert_eq!(step["executed_action"], "up", "real φ never overrides");
    assert!(Service::new(EnvKind::Grid, GridWorld::default(), PointMass2D::default(), None, 49).is_err());
}

#[test]
fn tcp_server_answers_line_by_line() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let s = Arc::new(service(false));
    std::thread::spawn(move || serve(s, listener));
    let stream = TcpStream::connect(addr).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut lines = BufReader::new(stream).lines();
    for (req, ok) in [
        (r#"{"type":"start","session":"n","seed":2}"#, true),
        ("{", false),
        (r#"{"type":"step","session":"n","action":"up"}"#, true),
        (r#"{"type":"stop","session":"n"}"#, true),
    ] {
        writeln!(w, "{req}").unwrap();
        let reply: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        assert_eq!(reply["ok"], ok, "{req}");
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isql"))
}

#[test]
fn binary_honours_output_override_and_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("c.toml");
    std::fs::write(&config, grid_config(Path::new("ignored"))).unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .args(["run", config.to_str().unwrap()])
        .env("ISQL_OUTPUT_DIR", &out)
        .env("ISQL_WORKERS", "1")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("runs.csv").exists());
    assert!(!Path::new("ignored").exists());

    let eval = bin().args(["eval", out.to_str().unwrap()]).output().unwrap();
    assert!(eval.status.success());
    assert_eq!(String::from_utf8_lossy(&eval.stdout).lines().count(), 5);

    let ck = out.join("artifacts/local_n1_seed0.json");
    let inspect = bin().args(["inspect", ck.to_str().unwrap()]).output().unwrap();
    let v: Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(v["format"], "isql-artifact 1");
    let refused = bin()
        .args(["inspect", ck.to_str().unwrap(), "--expect-hash", "deadbeef"])
        .output()
        .unwrap();
    assert!(!refused.status.success());

    std::fs::write(&config, "kind = \"grid_scramble\"\nunknown = 1\n").unwrap();
    let bad = bin().args(["run", config.to_str().unwrap()]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown field"));
}
