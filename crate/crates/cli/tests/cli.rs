use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const TINY: &str = r#"{
  "env": { "env": "pendulum", "t": 4, "height": 8, "width": 8,
           "n_train": 32, "n_val": 4, "n_test": 8, "seed": 3, "noise_prob": 0.1 },
  "model": {
    "net": { "d_z": 4, "d_u": 1,
             "arch": { "conv_channels": [], "kernel": 3, "branch_width": 8,
                       "trunk": [8], "decoder": [16], "lstm": 8 } },
    "train": { "epochs": 2, "batch_size": 16, "adam": { "lr": 0.001 }, "seed": 3 }
  },
  "policy": {
    "episodes": 3, "steps": 5,
    "agent": { "hidden": [8], "batch_size": 4, "n_u": 8, "seed": 3 },
    "eval_episodes": 3, "eval_steps": 5, "eval_seed": 3
  }
}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self::with_config(TINY)
    }

    fn with_config(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), text).unwrap();
        Work { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn drl(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_drl"))
            .arg("--workdir")
            .arg(self.dir.path())
            .args(["--config", "run.json"])
            .args(args)
            .env_remove("DRL_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.drl(args);
        assert!(
            out.status.success(),
            "drl {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, p: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path(p)).unwrap()).unwrap()
    }

    fn with_epochs(epochs: usize) -> Self {
        let mut cfg: Value = serde_json::from_str(TINY).unwrap();
        cfg["model"]["train"]["epochs"] = json!(epochs);
        Self::with_config(&cfg.to_string())
    }
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn gen_data_writes_three_splits_and_sidecar() {
    let w = Work::new();
    let stdout = w.ok(&["gen-data", "--out", "data"]);
    for f in ["train.drl", "val.drl", "test.drl", "config.resolved.json"] {
        assert!(w.path("data").join(f).exists(), "{f}");
    }
    assert!(stdout.contains("P(u=1)"), "{stdout}");
    assert!(stdout.contains("32 sequences"), "{stdout}");
    let resolved = w.json("data/config.resolved.json");
    assert_eq!(resolved["env"]["n_train"], 32);
    // Defaults are filled in.
    assert_eq!(resolved["policy"]["agent"]["gamma"], 0.99);
}

#[test]
fn missing_config_is_a_usage_error() {
    let w = Work::new();
    let out = Command::new(env!("CARGO_BIN_EXE_drl"))
        .arg("--workdir")
        .arg(w.dir.path())
        .args(["--config", "nope.json", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let w = Work::with_config(r#"{ "env": { "n_trian": 5 } }"#);
    let out = w.drl(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_trian"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let w = Work::new();
    assert_eq!(w.drl(&["train-model", "--variant", "sideways"]).status.code(), Some(2));
    assert_eq!(w.drl(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn seeded_generation_is_byte_identical() {
    let w = Work::new();
    w.ok(&["--seed", "7", "gen-data", "--out", "a"]);
    w.ok(&["--seed", "7", "gen-data", "--out", "b"]);
    w.ok(&["--seed", "8", "gen-data", "--out", "c"]);
    for f in ["train.drl", "val.drl", "test.drl", "config.resolved.json"] {
        assert_eq!(sha(&w.path("a").join(f)), sha(&w.path("b").join(f)), "{f}");
    }
    assert_ne!(sha(&w.path("a/train.drl")), sha(&w.path("c/train.drl")));
    assert_eq!(w.json("a/config.resolved.json")["env"]["seed"], 7);

    // DRL_SEED acts like --seed.
    let out = Command::new(env!("CARGO_BIN_EXE_drl"))
        .arg("--workdir")
        .arg(w.dir.path())
        .args(["--config", "run.json", "gen-data", "--out", "d"])
        .env("DRL_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(sha(&w.path("a/train.drl")), sha(&w.path("d/train.drl")));
}

#[test]
fn one_epoch_loss_csv_has_every_term() {
    let w = Work::with_epochs(1);
    w.ok(&["gen-data", "--out", "data"]);
    w.ok(&["train-model", "--data", "data", "--variant", "decon", "--out", "decon"]);
    let (header, rows) = csv_rows(&w.path("decon/loss.csv"));
    assert_eq!(header.len(), 9);
    assert_eq!(header.last().unwrap(), "total");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].len(), 9);
    assert!(rows[0].iter().all(|v| v.is_finite()));
    assert!(w.path("decon/model.ckpt").exists());
    assert_eq!(w.json("decon/config.resolved.json")["model"]["net"]["include_u"], true);

    w.ok(&["train-model", "--data", "data", "--variant", "alt", "--out", "alt"]);
    let (header, rows) = csv_rows(&w.path("alt/loss.csv"));
    let kl_u = header.iter().position(|h| h == "kl_u").unwrap();
    assert!(rows.iter().all(|r| r[kl_u] == 0.0));
    assert_eq!(w.json("alt/config.resolved.json")["model"]["net"]["include_u"], false);
}

#[test]
fn training_loss_mostly_decreases() {
    let w = Work::with_epochs(6);
    w.ok(&["gen-data", "--out", "data"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "m"]);
    let (header, rows) = csv_rows(&w.path("m/loss.csv"));
    let total = header.iter().position(|h| h == "total").unwrap();
    let loss: Vec<f64> = rows.iter().map(|r| -r[total]).collect();
    let down = loss.windows(2).filter(|p| p[1] <= p[0]).count();
    assert!(down >= 4, "{loss:?}");
}

#[test]
fn model_training_is_byte_identical() {
    let w = Work::new();
    w.ok(&["gen-data"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "m1"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "m2"]);
    for f in ["model.ckpt", "loss.csv", "config.resolved.json"] {
        assert_eq!(sha(&w.path("m1").join(f)), sha(&w.path("m2").join(f)), "{f}");
    }
}

#[test]
fn policy_training_guards_and_outputs() {
    let w = Work::new();
    w.ok(&["gen-data"]);
    w.ok(&["train-model", "--variant", "alt", "--out", "alt"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "decon"]);

    let refused = w.drl(&["train-policy", "--model", "alt", "--algo", "decon", "--out", "p"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--variant decon"));
    let refused = w.drl(&["train-policy", "--model", "decon/model.ckpt", "--algo", "vanilla"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--variant alt"));
    assert_eq!(w.drl(&["train-policy", "--oracle", "--algo", "direct"]).status.code(), Some(2));
    assert_eq!(w.drl(&["train-policy", "--algo", "vanilla"]).status.code(), Some(2));

    // The table environment needs no checkpoint.
    w.ok(&["train-policy", "--oracle", "--algo", "decon", "--out", "oracle"]);
    let (_, rows) = csv_rows(&w.path("oracle/training_log.csv"));
    assert_eq!(rows.len(), 3);
    assert!(w.path("oracle/policy.json").exists());
    assert!(w.path("oracle/config.resolved.json").exists());

    for (model, algo) in [("alt", "vanilla"), ("alt", "direct"), ("decon", "decon")] {
        let out = format!("{algo}_a");
        w.ok(&["train-policy", "--model", model, "--algo", algo, "--out", &out]);
        let (_, rows) = csv_rows(&w.path(&out).join("training_log.csv"));
        assert_eq!(rows.len(), 3, "{algo}");
    }
    w.ok(&["train-policy", "--model", "decon", "--algo", "decon", "--out", "decon_b"]);
    for f in ["policy.json", "training_log.csv"] {
        assert_eq!(sha(&w.path("decon_a").join(f)), sha(&w.path("decon_b").join(f)), "{f}");
    }
}

#[test]
fn eval_reports_per_episode_entries() {
    let w = Work::new();
    w.ok(&["gen-data"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "decon"]);
    w.ok(&["train-policy", "--model", "decon", "--algo", "decon", "--out", "p"]);
    for out in ["r1.json", "r2.json"] {
        w.ok(&["eval", "--policy", "p/policy.json", "--model", "decon", "--episodes", "3", "--out", out]);
    }
    let r = w.json("r1.json");
    assert_eq!(r["format_version"], 1);
    assert_eq!(r["report"]["episodes"].as_array().unwrap().len(), 3);
    for key in ["mean_total_reward", "std_total_reward", "mean_optimal_action_freq"] {
        assert!(r["report"][key].is_number(), "{key}");
    }
    assert_eq!(sha(&w.path("r1.json")), sha(&w.path("r2.json")));
    assert!(w.path("r1.json.config.json").exists());

    // An oracle policy has 2-dimensional states, the model has 4.
    w.ok(&["train-policy", "--oracle", "--algo", "vanilla", "--out", "po"]);
    let out = w.drl(&["eval", "--policy", "po", "--model", "decon"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn constant_t1_action_on_the_table_matches_enumeration() {
    let w = Work::new();
    let stdout = w.ok(&[
        "eval",
        "--constant-action",
        "1.5",
        "--oracle",
        "--episodes",
        "2000",
        "--steps",
        "50",
    ]);
    let r: Value = serde_json::from_str(&stdout).unwrap();
    let rep = &r["report"];
    let per_step = rep["mean_reward_per_step"].as_f64().unwrap();
    let se = rep["std_total_reward"].as_f64().unwrap() / 50.0 / 2000f64.sqrt();
    assert!((per_step + 22.890).abs() < 5.0 * se + 5e-4, "{per_step} (se {se})");
    assert_eq!(rep["mean_optimal_action_freq"], 1.0);
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("255"));
    let body = bytes[bytes.len() - w * h..].to_vec();
    (w, h, body)
}

#[test]
fn counterfactual_and_reconstruct_dumps() {
    let w = Work::new();
    w.ok(&["gen-data"]);
    w.ok(&["train-model", "--variant", "decon", "--out", "m"]);
    w.ok(&["counterfactual", "--model", "m", "--frame-index", "5", "--horizon", "1", "--out", "cf"]);
    let frames: Vec<_> = std::fs::read_dir(w.path("cf"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    assert_eq!(frames.len(), 2, "{frames:?}");
    let (fw, fh, px) = read_pgm(&w.path("cf/frame_001.pgm"));
    assert_eq!((fw, fh, px.len()), (8, 8, 64));
    let roll = w.json("cf/rollout.json");
    assert_eq!(roll["sequence"], 1);
    assert_eq!(roll["step"], 1);
    assert_eq!(roll["rewards"].as_array().unwrap().len(), 1);
    assert!(roll["actions"][0].as_f64().unwrap().abs() <= 2.0);

    let out = w.drl(&["counterfactual", "--model", "m", "--frame-index", "9999", "--out", "cf2"]);
    assert_eq!(out.status.code(), Some(2));

    w.ok(&["reconstruct", "--model", "m", "--count", "3", "--out", "rec"]);
    let rec = w.json("rec/reconstruct.json");
    assert_eq!(rec["sequences"], 3);
    assert_eq!(rec["files"].as_array().unwrap().len(), 3);
    let (gw, gh, _) = read_pgm(&w.path("rec/seq_0002.pgm"));
    // Two rows of four 8x8 frames with 1-pixel gutters.
    assert_eq!((gw, gh), (4 * 8 + 3, 2 * 8 + 1));
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/confounded_treatment.json")
}

#[test]
fn causal_query_on_the_bundled_table() {
    let w = Work::new();
    let cpt = fixture();
    let cpt = cpt.to_str().unwrap();
    let simpson: Value =
        serde_json::from_str(&w.ok(&["causal-query", "--cpt", cpt, "--mode", "simpson"])).unwrap();
    assert_eq!(simpson["paradox_flag"], true);
    let cond: Value = serde_json::from_str(&w.ok(&["causal-query", "--cpt", cpt, "--mode", "cond"])).unwrap();
    let dov: Value = serde_json::from_str(&w.ok(&["causal-query", "--cpt", cpt, "--mode", "do"])).unwrap();
    let c: Vec<f64> = serde_json::from_value(cond["values"].clone()).unwrap();
    let d: Vec<f64> = serde_json::from_value(dov["values"].clone()).unwrap();
    // Quoted values are rounded; the exact ones are -32.64445 and -29.38945.
    assert!((c[0] + 32.6445).abs() < 1e-3 && (c[1] + 29.3890).abs() < 1e-3, "{c:?}");
    assert!((d[0] + 22.890).abs() < 1e-3 && (d[1] + 34.034).abs() < 1e-3, "{d:?}");

    w.ok(&["causal-query", "--cpt", cpt, "--mode", "simpson", "--out", "q/simpson.json"]);
    assert_eq!(w.json("q/simpson.json")["paradox_flag"], true);
    assert!(w.path("q/simpson.json.config.json").exists());
}

#[test]
fn interventional_equals_conditional_without_confounding() {
    let w = Work::new();
    let table = json!({
        "confounder_probs": [0.3, 0.7],
        "action_probs": [[0.5, 0.5], [0.5, 0.5]],
        "outcome_probs": [[[0.2, 0.8], [0.6, 0.4]], [[0.9, 0.1], [0.1, 0.9]]],
        "outcome_values": [1.0, 0.0]
    });
    std::fs::write(w.path("flat.json"), table.to_string()).unwrap();
    for outcome in ["expectation", "prob:1"] {
        let c: Value = serde_json::from_str(&w.ok(&[
            "causal-query", "--cpt", "flat.json", "--mode", "cond", "--outcome", outcome,
        ]))
        .unwrap();
        let d: Value = serde_json::from_str(&w.ok(&[
            "causal-query", "--cpt", "flat.json", "--mode", "do", "--outcome", outcome,
        ]))
        .unwrap();
        let c: Vec<f64> = serde_json::from_value(c["values"].clone()).unwrap();
        let d: Vec<f64> = serde_json::from_value(d["values"].clone()).unwrap();
        for (x, y) in c.iter().zip(&d) {
            assert!((x - y).abs() < 1e-12, "{outcome}: {c:?} vs {d:?}");
        }
    }
}

#[test]
fn malformed_cpt_reports_row_sum() {
    let w = Work::new();
    let table = json!({
        "confounder_probs": [0.5, 0.6],
        "action_probs": [[0.5, 0.5], [0.5, 0.5]],
        "outcome_probs": [[[1.0], [1.0]], [[1.0], [1.0]]]
    });
    std::fs::write(w.path("bad.json"), table.to_string()).unwrap();
    let out = w.drl(&["causal-query", "--cpt", "bad.json", "--mode", "do"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sums to"), "{err}");
    let out = w.drl(&["causal-query", "--cpt", "bad.json", "--mode", "do", "--outcome", "maybe"]);
    assert_eq!(out.status.code(), Some(2));
}
