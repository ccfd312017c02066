use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use indexmap::IndexMap;
use retr::data::{leave_one_out_split, load_interactions, load_pivots, synth_generate, SyntheticSpec, WindowMode};
use retr::eval::route_recovery;
use retr::model::{RetrModel, RoutingMode};
use tempfile::TempDir;

fn retr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retr"))
        .args(args)
        .output()
        .expect("spawn retr")
}

fn ok(args: &[&str]) -> String {
    let out = retr(args);
    assert!(
        out.status.success(),
        "retr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: [&str; 8] = ["--users", "120", "--items", "200", "--categories", "5", "--max-len", "25"];
const MODEL: [&str; 14] = [
    "--dim", "16", "--heads", "2", "--max-len", "20", "--epochs", "2", "--negatives", "30", "--batch-size", "32",
    "--seed", "5",
];

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    pivots: PathBuf,
    run: PathBuf,
}

/// A drifted synthetic dataset and a briefly trained learned-routing run.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data_dir = dir.path().join("data");
        let mut args = vec!["synth", "--out", s(&data_dir), "--archetype", "drifted", "--seed", "7"];
        args.extend(SYNTH);
        ok(&args);
        let data = data_dir.join("interactions.tsv");
        let pivots = data_dir.join("pivots.tsv");
        let run = dir.path().join("run");
        let mut args = vec!["train", "--data", s(&data), "--pivots", s(&pivots), "--out", s(&run), "--tau", "0.8"];
        args.extend(MODEL);
        ok(&args);
        Fixture {
            _dir: dir,
            data,
            pivots,
            run,
        }
    })
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--archetype", "drifted", "--users", "100", "--seed", "7", "--out", s(out)]);
    }
    for f in ["interactions.tsv", "pivots.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("manifest.txt").exists());
}

#[test]
fn synth_rejects_bad_noise_rate() {
    let dir = TempDir::new().unwrap();
    let out = retr(&["synth", "--noise-rate", "1.5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise rate"));
}

#[test]
fn synth_line_count_matches_generated_lengths() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--users", "64", "--seed", "11", "--noise-rate", "0.3", "--out", s(dir.path())]);
    let lines = fs::read_to_string(dir.path().join("interactions.tsv")).unwrap().lines().count();
    let spec = SyntheticSpec {
        users: 64,
        seed: 11,
        noise_rate: 0.3,
        ..Default::default()
    };
    let expected: usize = synth_generate(&spec).unwrap().users.iter().map(|u| u.items.len()).sum();
    assert_eq!(lines, expected);
}

#[test]
fn train_writes_layout_and_records_tau() {
    let f = fixture();
    for name in ["manifest.txt", "checkpoint.bin", "epochs.csv", "eval.csv"] {
        assert!(f.run.join(name).exists(), "{name}");
    }
    let manifest = fs::read_to_string(f.run.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "tau = 0.8"), "{manifest}");
    assert!(manifest.starts_with("command = train\n"));
    let epochs = fs::read_to_string(f.run.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
}

#[test]
fn rerun_from_manifest_reproduces_epochs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&f.run.join("manifest.txt")), "--out", s(&again)]);
    assert_eq!(
        fs::read_to_string(f.run.join("epochs.csv")).unwrap(),
        fs::read_to_string(again.join("epochs.csv")).unwrap()
    );
    assert_eq!(
        fs::read(f.run.join("checkpoint.bin")).unwrap(),
        fs::read(again.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_reports_requested_cutoffs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let stdout = ok(&[
        "eval", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--data", s(&f.data), "--out", s(dir.path()),
        "--k", "10", "--negatives", "30",
    ]);
    assert!(stdout.contains("MRR"));
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let metrics: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    for m in ["hr@10", "ndcg@10", "mrr"] {
        assert!(metrics.contains(&m), "{csv}");
    }
}

#[test]
fn eval_with_missing_checkpoint_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere.bin");
    let out = retr(&["eval", "--checkpoint", s(&missing), "--data", "x.tsv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn eval_lists_config_mismatches() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = retr(&[
        "eval", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--data", s(&f.data), "--out", s(dir.path()),
        "--dim", "32", "--blocks", "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dim (config 32, checkpoint 16)"), "{err}");
    assert!(err.contains("blocks (config 3, checkpoint 2)"), "{err}");
}

#[test]
fn forced_all_ones_matches_an_all_ones_checkpoint() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let ck = f.run.join("checkpoint.bin");
    let forced = dir.path().join("forced");
    ok(&[
        "eval", "--checkpoint", s(&ck), "--data", s(&f.data), "--out", s(&forced), "--routing", "all-ones",
        "--negatives", "30",
    ]);

    let file = fs::File::open(&ck).unwrap();
    let (mut model, _) = RetrModel::<f32>::read_checkpoint(BufReader::new(file)).unwrap();
    model.set_routing(RoutingMode::AllOnes);
    let ablated_ck = dir.path().join("ablated.bin");
    model
        .write_checkpoint(fs::File::create(&ablated_ck).unwrap(), &IndexMap::new())
        .unwrap();
    let ablated = dir.path().join("ablated");
    ok(&["eval", "--checkpoint", s(&ablated_ck), "--data", s(&f.data), "--out", s(&ablated), "--negatives", "30"]);

    let a = fs::read_to_string(forced.join("eval.csv")).unwrap();
    let b = fs::read_to_string(ablated.join("eval.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("keep_rate_l2,1\n"), "{a}");
}

#[test]
fn all_ones_training_prints_only_kept_routes() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--data", s(&f.data), "--out", s(dir.path()), "--routing", "all-ones"];
    args.extend(MODEL);
    ok(&args);
    let report = ok(&[
        "inspect-routes", "--checkpoint", s(&dir.path().join("checkpoint.bin")), "--data", s(&f.data), "--users",
        "1,2,3",
    ]);
    let rows: Vec<&str> = report.lines().filter(|l| l.starts_with("layer")).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(row.split('\t').skip(1).all(|c| c == "1"), "{row}");
    }
}

fn bits(line: &str) -> Vec<bool> {
    line.split('\t').skip(1).map(|c| c == "1").collect()
}

#[test]
fn inspect_routes_is_hierarchical_and_agrees_with_recovery() {
    let f = fixture();
    let users = ["1", "17", "42", "99"];
    let report = ok(&[
        "inspect-routes", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--data", s(&f.data), "--pivots",
        s(&f.pivots), "--users", &users.join(","),
    ]);

    let file = fs::File::open(f.run.join("checkpoint.bin")).unwrap();
    let (model, _) = RetrModel::<f32>::read_checkpoint(BufReader::new(file)).unwrap();
    let log = load_interactions(&f.data, 5).unwrap();
    let labels = load_pivots(&f.pivots).unwrap();
    let split = leave_one_out_split(&log, model.config().max_len, WindowMode::MostRecent);

    let blocks: Vec<&str> = report.split("user\t").skip(1).collect();
    assert_eq!(blocks.len(), users.len());
    for (raw, block) in users.iter().zip(blocks) {
        let lines: Vec<&str> = block.lines().collect();
        assert_eq!(lines[0], *raw);
        let l1 = bits(lines.iter().find(|l| l.starts_with("layer1")).unwrap());
        let l2 = bits(lines.iter().find(|l| l.starts_with("layer2")).unwrap());
        assert!(l1.iter().zip(&l2).all(|(a, b)| *a || !*b), "user {raw}");

        let agreement: f64 = lines
            .iter()
            .find_map(|l| l.strip_prefix("agreement\t"))
            .unwrap()
            .parse()
            .unwrap();
        let seq = split.test.iter().find(|q| log.user_raw(q.user) == *raw).unwrap();
        let trace = model.infer_deterministic(seq).unwrap();
        let rec = route_recovery(&trace, &labels.mask_for(&log, seq).unwrap());
        assert!((agreement - rec.agreement()).abs() < 1e-6, "user {raw}");
    }
}

#[test]
fn inspect_rejects_unknown_user() {
    let f = fixture();
    let out = retr(&[
        "inspect-routes", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--data", s(&f.data), "--users",
        "no-such-user",
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-user"));
}

#[test]
fn train_split_scores_are_reported() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut mrr = Vec::new();
    for split in ["train", "test"] {
        let out = dir.path().join(split);
        ok(&[
            "eval", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--data", s(&f.data), "--out", s(&out),
            "--split", split, "--negatives", "30",
        ]);
        let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
        let v: f64 = csv
            .lines()
            .find_map(|l| l.strip_prefix("mrr,"))
            .unwrap()
            .parse()
            .unwrap();
        mrr.push(v);
    }
    eprintln!("mrr on train {:.4}, on test {:.4}", mrr[0], mrr[1]);
}

#[test]
fn empty_dataset_is_an_explicit_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("tiny.tsv");
    fs::write(&data, "u1\ti1\t1\nu1\ti2\t2\nu2\ti1\t3\n").unwrap();
    let out = retr(&["train", "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "dim = 16\nwarp = 9\n").unwrap();
    let out = retr(&["train", "--config", s(&cfg), "--data", "x.tsv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));
}
