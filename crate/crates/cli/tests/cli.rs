use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sled_core::TensorArchive;

const TINY: &str = r#"
[model]
d_model = 16
blocks = 1
heads = 2
text_len = 10
vocab = 9
ffn_hidden = 16
grid = { height = 4, width = 4, channels = 2 }

[world]
atoms = 3
tokens_per_atom = 2
grid = { height = 4, width = 4, channels = 2 }

[pretrain]
iterations = 12
batch_size = 2
warmup = 2
loss_threshold = 100.0
threshold_window = 4

[adapter.stlora]
iterations = 4
batch_size = 2
rank = 2

[adapter.gstlora]
iterations = 4
batch_size = 2
rank = 2

[eval]
steps = 2
seeds = [0]
"#;

fn sled(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sled"))
        .args(args)
        .env_remove("SLED_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, out: &str) -> Output {
        sled(&["pretrain", "--config", p(&self.path("cfg.toml")), "--out", p(&self.path(out))])
    }

    fn adapter(&self, base: &str, mode: &str, out: &str) -> Output {
        sled(&[
            "train-adapter",
            "--config",
            p(&self.path("cfg.toml")),
            "--base",
            p(&self.path(base)),
            "--mode",
            mode,
            "--out",
            p(&self.path(out)),
        ])
    }

    fn sweep(&self, extra: &[&str], out: &str) -> Output {
        let cfg = self.path("cfg.toml");
        let base = self.path("base.sled");
        let adapter = self.path("st.sled");
        let out = self.path(out);
        let mut args = vec![
            "sweep",
            "--config",
            p(&cfg),
            "--base",
            p(&base),
            "--adapter",
            p(&adapter),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        sled(&args)
    }

    fn interp(&self, betas: &str, out: &str) -> Output {
        sled(&[
            "interp",
            "--config",
            p(&self.path("cfg.toml")),
            "--base",
            p(&self.path("base.sled")),
            "--target",
            "1",
            "--betas",
            betas,
            "--out",
            p(&self.path(out)),
        ])
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path(name)).unwrap()).unwrap()
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }
}

fn trained() -> Fixture {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("base.sled")), 0);
    assert_eq!(code(&f.adapter("base.sled", "stlora", "st.sled")), 0);
    f
}

#[test]
fn init_config_refuses_overwrite() {
    let f = Fixture::new("");
    let out = f.path("new.toml");
    assert_eq!(code(&sled(&["init-config", p(&out)])), 0);
    let again = sled(&["init-config", p(&out)]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&sled(&["init-config", p(&out), "--force"])), 0);
    assert_eq!(code(&sled(&["no-such-command"])), 1);
}

#[test]
fn pretrain_is_reproducible() {
    let f = Fixture::new(TINY);
    let first = f.pretrain("a.sled");
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&f.pretrain("b.sled")), 0);
    assert_eq!(f.bytes("a.sled"), f.bytes("b.sled"));
    assert_eq!(f.bytes("a.loss.csv"), f.bytes("b.loss.csv"));
    assert_eq!(f.bytes("a.manifest.json"), f.bytes("b.manifest.json"));
    let manifest = f.json("a.manifest.json");
    assert!(manifest["summary"]["final_loss"].as_f64().unwrap().is_finite());
    assert_eq!(manifest["summary"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(f.path("a.loss.csv")).unwrap().lines().count(), 13);
    assert_eq!(code(&f.pretrain("a.sled")), 1, "no silent overwrite");
}

#[test]
fn seed_override_changes_weights() {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("a.sled")), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_sled"))
        .args(["pretrain", "--config", p(&f.path("cfg.toml")), "--out", p(&f.path("b.sled"))])
        .env("SLED_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_ne!(f.bytes("a.sled"), f.bytes("b.sled"));
    assert_eq!(f.json("b.manifest.json")["summary"]["seed"], 5);
}

#[test]
fn malformed_config_writes_nothing() {
    let f = Fixture::new("[model]\nd_model = \"wide\"\n");
    assert_eq!(code(&f.pretrain("base.sled")), 1);
    assert!(!f.path("base.sled").exists());
    assert!(!f.path("base.manifest.json").exists());
    let missing = sled(&["pretrain", "--config", p(&f.path("nope.toml")), "--out", p(&f.path("x.sled"))]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn unreached_threshold_exits_two() {
    let f = Fixture::new(&TINY.replace("loss_threshold = 100.0", "loss_threshold = 1e-9"));
    assert_eq!(code(&f.pretrain("base.sled")), 2);
    assert!(f.path("base.sled").exists());
    assert_eq!(f.json("base.manifest.json")["summary"]["reached_threshold"], false);
}

#[test]
fn adapter_training_outputs() {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("base.sled")), 0);
    let out = f.adapter("base.sled", "gstlora", "g1.sled");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&f.adapter("base.sled", "gstlora", "g2.sled")), 0);
    assert_eq!(f.bytes("g1.sled"), f.bytes("g2.sled"));
    assert_eq!(f.bytes("g1.loss.csv"), f.bytes("g2.loss.csv"));
    let archive = TensorArchive::load(&f.path("g1.sled")).unwrap();
    assert_eq!(archive.len(), 6 * 2);
    let csv = std::fs::read_to_string(f.path("g1.loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss,target_index,t_mean\n"));
    assert_eq!(csv.lines().count(), 5);
    let summary = &f.json("g1.manifest.json")["summary"];
    assert_eq!(summary["objective"], "spps");
    assert_eq!(summary["iterations"], 4);
}

#[test]
fn adapter_rejects_mismatched_base() {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("base.sled")), 0);
    std::fs::write(f.path("cfg.toml"), TINY.replace("ffn_hidden = 16", "ffn_hidden = 8")).unwrap();
    assert_eq!(code(&f.adapter("base.sled", "stlora", "st.sled")), 1);
    assert!(!f.path("st.sled").exists());
}

#[test]
fn divergence_exits_three() {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("base.sled")), 0);
    std::fs::write(
        f.path("cfg.toml"),
        TINY.replace("[adapter.gstlora]\n", "[adapter.gstlora]\nlr = 1e200\n"),
    )
    .unwrap();
    let out = f.adapter("base.sled", "gstlora", "g.sled");
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("last finite step"));
    assert!(!f.path("g.sled").exists());
}

#[test]
fn sweeps_and_interventions() {
    let f = trained();

    let out = f.sweep(&[], "s1");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(f.path("s1/sweep.csv")).unwrap();
    assert!(csv.starts_with("method,gamma,seed,alphas,atom,probe_score\n"));
    for atom in 0..3 {
        let rows = csv.lines().filter(|l| l.starts_with("slider,") && l.split(',').nth(4) == Some(&atom.to_string())).count();
        assert_eq!(rows, 15, "atom {atom}");
    }
    let report = f.json("s1/sweep.json");
    assert!(report["score_source"].as_str().unwrap().contains("probe"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);

    assert_eq!(code(&f.sweep(&[], "s2")), 0);
    assert_eq!(f.bytes("s1/sweep.json"), f.bytes("s2/sweep.json"));
    assert_eq!(f.bytes("s1/sweep.csv"), f.bytes("s2/sweep.csv"));
    assert_eq!(code(&f.sweep(&[], "s1")), 1, "no silent overwrite");

    assert_eq!(code(&f.sweep(&["--gamma", "2"], "lattice")), 0);
    let report = f.json("lattice/sweep.json");
    for run in report["runs"].as_array().unwrap() {
        assert_eq!(run["scores"].as_array().unwrap().len(), 49);
        assert_eq!(run["cross_talk"].as_array().unwrap().len(), 2);
    }
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);

    assert_eq!(code(&f.sweep(&["--alphas", "0"], "single")), 0);
    let report = f.json("single/sweep.json");
    for run in report["runs"].as_array().unwrap() {
        assert_eq!(run["continuity"]["status"], "saturated-degenerate");
    }

    assert_eq!(code(&f.sweep(&["--alphas", "-0.5,0,1", "--with-cfg"], "cfg")), 0);
    let methods: Vec<String> = f.json("cfg/sweep.json")["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap().to_owned())
        .collect();
    assert!(methods.contains(&"explicit-cfg".to_owned()));
    assert_eq!(code(&f.sweep(&["--gamma", "4"], "bad")), 1);
    assert_eq!(code(&f.sweep(&["--alphas", "1,0"], "bad")), 1);

    assert_eq!(code(&f.interp("0,0.5,1", "i1")), 0);
    let report = f.json("i1/interp.json");
    assert_eq!(report["entries"].as_array().unwrap().len(), 3);
    assert_eq!(code(&f.interp("2", "i2")), 1);
    assert!(!f.path("i2/interp.json").exists());

    // β = 0 and α = 0 are both plain sampling of the same held-out example.
    assert_eq!(code(&f.interp("0", "i0")), 0);
    let interp = f.json("i0/interp.json");
    let sweep = f.json("single/sweep.json");
    let slider_atom1 = sweep["runs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["atoms"] == serde_json::json!([1]))
        .unwrap();
    assert_eq!(interp["entries"][0]["scores"], slider_atom1["scores"][0]);
}

#[test]
fn missing_adapter_exits_one() {
    let f = Fixture::new(TINY);
    assert_eq!(code(&f.pretrain("base.sled")), 0);
    let out = f.sweep(&[], "s");
    assert_eq!(code(&out), 1);
    assert!(!f.path("s/sweep.json").exists());
}
