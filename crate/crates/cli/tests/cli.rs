use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mode_cli::checkpoint::Checkpoint;
use mode_cli::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use mode_cli::report::{load_runs, RunSummary};
use mode_cli::stream::read_stream;
use mode_core::metrics::{avg_acc, bwt, delta};

const TINY: &str = r#"
version = 1
run_id = "tiny"
rounds = 3
seeds = [4]
baselines = ["frozen"]

[data]
source_samples = 200
sda_samples = 40
per_domain = 20

[source]
epochs = 4

[model]
input_dim = 8
dims = [12]
blocks = [2]
ranks = [3]

[adaptation]
epochs_init = 1
lr_tta = 1e-3
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mode-ctta"))
            .args(args)
            .env(OUTPUT_DIR_ENV, self.path("out"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn param_count_calculator() {
    let env = Env::new();
    let rows = [
        ("0,0,0,2", "3", "59922"),
        ("0,0,0,6", "4", "129096"),
        ("0,0,0,16", "6", "378144"),
        ("2,4,10,16", "6", "779916"),
    ];
    for (ranks, experts, want) in rows {
        let out = env.ok(&["param-count", "--dims", "64,128,320,512", "--blocks", "3,4,6,3", "--ranks", ranks, "--experts", experts]);
        assert_eq!(out.trim(), want);
    }
    let bad = env.run(&["param-count", "--dims", "64", "--blocks", "3,4", "--ranks", "1", "--experts", "2"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn init_prints_staged_param_count_in_random_mode() {
    let env = Env::new();
    let cfg = env.config(
        "staged.toml",
        r#"
version = 1
run_id = "staged"
[data]
source_samples = 8
sda_samples = 8
[source]
epochs = 1
batch = 8
[model]
dims = [64, 128, 320, 512]
blocks = [3, 4, 6, 3]
ranks = [0, 0, 0, 16]
experts = 6
[adaptation]
init_mode = "random"
"#,
    );
    let out = env.ok(&["init", "-c", s(&cfg)]);
    assert!(out.contains("param_count 378144"), "{out}");
}

#[test]
fn config_errors_exit_with_two() {
    let env = Env::new();
    let cases = [
        TINY.replace("version = 1", "version = 2"),
        TINY.replace("rounds = 3", "rounds = 3\nunknown_key = 1"),
        TINY.replace("[adaptation]", "[adaptation]\nkappa = 1.5"),
        TINY.replace("[adaptation]", "[adaptation]\nlr_init = 0.0"),
        TINY.replace("seeds = [4]", "seeds = []"),
        TINY.replace("ranks = [3]", "ranks = [3, 3]"),
        "not toml at all [".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = env.config(&format!("bad{i}.toml"), text);
        let out = env.run(&["init", "-c", s(&cfg)]);
        assert_eq!(code(&out), 2, "case {i}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(ExperimentConfig::parse(TINY).is_ok());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    assert_eq!(code(&env.run(&["adapt", "-c", s(&cfg)])), 3);
    assert_eq!(code(&env.run(&["report", s(&env.path("nope.json"))])), 3);
}

#[test]
fn init_adapt_report_cycle() {
    let env = Env::new();
    let cfg_path = env.config("tiny.toml", TINY);
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let out = env.ok(&["init", "-c", s(&cfg_path)]);
    assert!(out.contains("seed 4: param_count"));
    let init = env.path("out/tiny/s4/init.json");
    let first = std::fs::read(&init).unwrap();

    // same seed, same bytes
    env.ok(&["init", "-c", s(&cfg_path)]);
    assert_eq!(std::fs::read(&init).unwrap(), first);
    let ck = Checkpoint::load(&init).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), first);
    assert_eq!(ck.config_hash, cfg.hash());

    env.ok(&["adapt", "-c", s(&cfg_path)]);
    let csv = std::fs::read_to_string(env.path("out/tiny/metrics.csv")).unwrap();
    // two methods x 3 rounds x 4 domains
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 4);
    for layer in 0..2 {
        assert!(env.path(&format!("out/tiny/experts/mode-s4-layer{layer}.csv")).exists());
    }
    let fin = env.path("out/tiny/s4/mode.final.json");
    let bytes = std::fs::read(&fin).unwrap();
    assert_eq!(Checkpoint::load(&fin).unwrap().to_bytes().unwrap(), bytes);

    let summary: Vec<RunSummary> =
        serde_json::from_str(&std::fs::read_to_string(env.path("out/tiny/summary.json")).unwrap()).unwrap();
    for r in &summary {
        let k = r.a.len() - 1;
        let mean = r.a[k].iter().sum::<f64>() / r.a[k].len() as f64;
        assert_eq!(r.mean[k], mean);
        assert_eq!(r.delta, Some(delta(&r.a).unwrap()));
        assert_eq!(r.avg_acc[k], avg_acc(&r.a, k).unwrap());
        assert_eq!(r.bwt[k], bwt(&r.a, &r.a_tilde, k).unwrap());
    }
    let frozen = summary.iter().find(|r| r.run_id == "tiny-frozen-s4").unwrap();
    assert!(frozen.a.windows(2).all(|w| w[0] == w[1]));
    assert!(frozen.bwt.iter().all(|&b| b == 0.0));

    // the report recomputes from the raw matrix, from either file
    for file in ["out/tiny/summary.json", "out/tiny/metrics.csv"] {
        let runs = load_runs(&env.path(file)).unwrap();
        assert_eq!(runs.len(), 2);
        for (run, sum) in runs.iter().zip(&summary) {
            assert_eq!(run.a, sum.a);
            assert_eq!(run.delta(), sum.delta);
            assert_eq!(run.bwt, sum.bwt);
        }
        let table = env.ok(&["report", s(&env.path(file))]);
        assert!(table.contains("run tiny-mode-s4"));
        assert!(table.contains("AvgAcc"));
    }
    let cmp = env.ok(&["report", "--compare", s(&env.path("out/tiny/summary.json")), s(&env.path("out/tiny/metrics.csv"))]);
    assert!(cmp.contains("tiny-mode-s4 -> tiny-mode-s4"));
    assert!(cmp.lines().filter(|l| l.starts_with('1') || l.starts_with('3')).all(|l| l.contains("0.0000")));

    // a config change is refused
    let changed = env.config("changed.toml", &TINY.replace("lr_tta = 1e-3", "lr_tta = 2e-3"));
    assert_eq!(code(&env.run(&["adapt", "-c", s(&changed), "--checkpoint", s(&init)])), 2);
}

#[test]
fn zero_learning_rate_matches_frozen_rows() {
    let env = Env::new();
    let text = TINY.replace("lr_tta = 1e-3", "lr_tta = 0.0").replace("rounds = 3", "rounds = 10");
    let cfg = env.config("zero.toml", &text);
    env.ok(&["init", "-c", s(&cfg)]);
    env.ok(&["adapt", "-c", s(&cfg)]);
    let runs = load_runs(&env.path("out/tiny/summary.json")).unwrap();
    let (mode, frozen) = (&runs[0], &runs[1]);
    assert_eq!(mode.a.len(), 10);
    assert!(mode.a.iter().all(|row| row.len() == 4));
    assert_eq!(mode.a, frozen.a);
}

#[test]
fn empty_metrics_are_rejected() {
    let env = Env::new();
    let p = env.path("empty.csv");
    std::fs::write(&p, format!("{}\n", mode_cli::report::CSV_HEADER)).unwrap();
    assert_eq!(code(&env.run(&["report", s(&p)])), 3);
    let j = env.path("empty.json");
    std::fs::write(&j, "[]").unwrap();
    assert_eq!(code(&env.run(&["report", s(&j)])), 3);
}

#[test]
fn numeric_blowup_exits_with_four() {
    let env = Env::new();
    let text = TINY
        .replace("baselines = [\"frozen\"]", "")
        .replace("[adaptation]", "[adaptation]\nmethod = \"full_entropy\"\nlr_baseline = 1e300\nkappa = 1.0");
    let cfg = env.config("blowup.toml", &text);
    env.ok(&["init", "-c", s(&cfg)]);
    let out = env.run(&["adapt", "-c", s(&cfg)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn scenario_streams_round_trip_exactly() {
    let env = Env::new();
    for scenario in ["cds", "cgs"] {
        let text = TINY.replace("rounds = 3", &format!("rounds = 2\nscenario = \"{scenario}\""));
        let cfg_path = env.config(&format!("{scenario}.toml"), &text);
        let cfg = ExperimentConfig::parse(&text).unwrap();
        for eval in [false, true] {
            let out = env.path(&format!("{scenario}-{eval}.jsonl"));
            let mut args = vec!["scenario-gen", "-c", s(&cfg_path), "--seed", "9", "-o", s(&out)];
            if eval {
                args.push("--eval");
            }
            env.ok(&args);
            let (header, stream) = read_stream(std::io::BufReader::new(std::fs::File::open(&out).unwrap())).unwrap();
            let sc = mode_cli::pipeline::scenario(&cfg, 9).unwrap();
            let want = if eval { sc.eval_stream() } else { sc.stream() };
            assert_eq!(stream, want);
            assert_eq!(header.domains, ["fog", "night", "rain", "snow"]);
            let mut again = Vec::new();
            mode_cli::stream::write_stream(&mut again, &stream, &header.domains).unwrap();
            assert_eq!(again, std::fs::read(&out).unwrap());
        }
    }
}

#[test]
fn output_dir_comes_from_the_environment() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", &TINY.replace("rounds = 3", "rounds = 1\noutput_dir = \"/nonexistent/never\""));
    env.ok(&["init", "-c", s(&cfg)]);
    assert!(env.path("out/tiny/s4/init.json").exists());
}
