//! End-to-end runs of the `centroid-attn` binary and round trips of every
//! file it writes.

use std::path::Path;
use std::process::{Command, Output};

use centroid_attention::clustering::lloyd_kmeans;
use centroid_attention::harness::{
    bench, bench_macs, cluster, gradcheck, mac_count, read_ablation_csv, read_bench_csv, write_bench_csv, ArchDesc,
    BenchConfig, ClusterConfig, ClusterResult, GradcheckReport, LayerDesc, MRule, TrainConfig, Variant, BENCH_HEADER,
};
use centroid_attention::model::{InitSpec, TrainReport};
use centroid_attention::{farthest_point_sample, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_centroid-attn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_by_default_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let o = run(&["gradcheck", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: GradcheckReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.records.len(), 50);
    assert!(report.passed());
    assert_eq!(report, gradcheck(50, 1e-6, 0).unwrap());
}

#[test]
fn gradcheck_below_float_noise_fails_and_lists_every_failure() {
    let o = run(&["gradcheck", "--tol", "1e-15", "--seeds", "12"]);
    assert!(!o.status.success());
    let report: GradcheckReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.failures > 1);
    let fail_lines = stderr(&o).lines().filter(|l| l.starts_with("FAIL")).count();
    assert_eq!(fail_lines, report.failures);
}

#[test]
fn gradcheck_single_seed_has_one_record() {
    let o = run(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success());
    let report: GradcheckReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report.records.len(), 1);
}

#[test]
fn mac_count_hand_case_and_no_reduction_case() {
    let arch = ArchDesc {
        layers: vec![LayerDesc::SelfAttention],
        d: 1,
        d_ff: None,
        count_init: true,
    };
    let r = mac_count(&arch, 2).unwrap();
    assert_eq!(r.total, 16);
    assert_eq!(r.total, r.layers.iter().map(|l| l.total).sum::<u64>());

    // M = N: only the initialiser adds cost
    let full = ArchDesc::encoder(4, 64, &[(1, 20)]);
    let c = mac_count(&full, 20).unwrap();
    let v = mac_count(&full.vanilla(), 20).unwrap();
    let init = c.layers[1].init;
    assert_eq!(c.total - init, v.total);

    assert!(mac_count(&ArchDesc::encoder(2, 8, &[(1, 9)]), 8).is_err());
}

#[test]
fn maccount_command_reports_both_totals() {
    let o = run(&["maccount"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ratio = v["ratio"].as_f64().unwrap();
    assert!((0.45..=0.55).contains(&ratio), "{ratio}");
    assert!(!run(&["maccount", "--ca", "9:3"]).status.success());
}

#[test]
fn bench_writes_one_row_per_n_and_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = run(&["bench", "--n", "64", "--variants", "self", "--reps", "5", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), BENCH_HEADER);
    let rows = read_bench_csv(&text).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].variant, Variant::SelfAttention);
    assert_eq!(rows[0].macs, bench_macs(Variant::SelfAttention, 64, 16, 32).unwrap());
    assert!(rows[0].median_ns > 0.0);

    assert!(!run(&["bench", "--reps", "4"]).status.success());
    let o = run(&["bench", "--n", "16", "--out", "/nonexistent-dir/x.csv"]);
    assert!(!o.status.success());
}

#[test]
fn bench_records_round_trip() {
    let cfg = BenchConfig {
        n_list: vec![16, 32],
        m_rule: MRule::Divisor(4),
        reps: 5,
        d: 4,
        ..BenchConfig::default()
    };
    let records = bench(&cfg).unwrap();
    assert_eq!(records.len(), 6);
    let mut buf = Vec::new();
    write_bench_csv(&records, &mut buf).unwrap();
    assert_eq!(read_bench_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), records);
}

fn two_blobs(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.4).unwrap();
    let mut data = Vec::new();
    for (cx, cy) in [(-3.0, 0.0), (3.0, 0.5)] {
        for _ in 0..40 {
            data.push(cx + noise.sample(&mut rng));
            data.push(cy + noise.sample(&mut rng));
        }
    }
    Tensor::matrix(80, 2, data).unwrap()
}

fn write_points(path: &Path, x: &Tensor) {
    let mut text = String::from("x,y\n");
    for r in x.to_rows() {
        text.push_str(&format!("{},{}\n", r[0], r[1]));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn cluster_agrees_with_lloyd_on_separated_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = (dir.path().join("p.csv"), dir.path().join("c.json"));
    for seed in 0..5 {
        let x = two_blobs(seed);
        write_points(&input, &x);
        let o = run(&["cluster", path_str(&input), "--m", "2", "--alpha", "5", "--t", "3", "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let result: ClusterResult = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        let (_, lloyd) = lloyd_kmeans(&x, 2, 50, &farthest_point_sample(&x, 2, 0).unwrap()).unwrap();
        let agree = result.assignments.iter().zip(&lloyd.labels).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.95 * 80.0, "seed {seed}: {agree}/80");
        // the file holds exactly what the library computes
        let cfg = ClusterConfig {
            m: 2,
            alpha: 5.0,
            t: 3,
            epsilon: None,
            init: InitSpec::Fps { start: 0 },
        };
        assert_eq!(result, cluster(&x, &cfg).unwrap());
    }
}

#[test]
fn cluster_with_zero_step_returns_the_inputs() {
    let x = two_blobs(9).select_rows(&(0..10).collect::<Vec<_>>()).unwrap();
    let cfg = ClusterConfig {
        m: 10,
        alpha: 1.0,
        t: 4,
        epsilon: Some(0.0),
        init: InitSpec::Fps { start: 0 },
    };
    let r = cluster(&x, &cfg).unwrap();
    for (i, row) in x.to_rows().iter().enumerate() {
        assert_eq!(&r.centroids[r.assignments[i]], row);
    }
    let mut sorted = r.centroids.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = x.to_rows();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(sorted, rows);
}

#[test]
fn cluster_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.csv");

    std::fs::write(&input, "").unwrap();
    let o = run(&["cluster", path_str(&input), "--m", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));

    std::fs::write(&input, "x,y\n1,2\n3,oops\n").unwrap();
    let o = run(&["cluster", path_str(&input), "--m", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(&input, "x,y\n1,2\n3,4\n").unwrap();
    let o = run(&["cluster", path_str(&input), "--m", "3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("m=3"), "{}", stderr(&o));
}

fn quick_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let mut cfg = TrainConfig::default_config();
    cfg.epochs = epochs;
    cfg.data.points = 16;
    cfg.data.samples_per_class = 10;
    if let centroid_attention::BlockSpec::CentroidAttention { m, .. } = &mut cfg.blocks[1] {
        *m = 4;
    }
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_reports_are_reproducible_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 3);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = run(&["--seed", "3", "train", path_str(&cfg), "--out", path_str(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("final test accuracy"));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let records = TrainReport::parse_jsonl(std::str::from_utf8(&ta).unwrap()).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.seed == 3 && r.loss.is_finite()));

    let o = run(&["--seed", "4", "train", path_str(&cfg), "--out", path_str(&b)]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(&b).unwrap(), ta);
}

#[test]
fn bundled_train_config_completes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let o = run(&["train", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = TrainReport::parse_jsonl(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(records.len(), 50);
}

#[test]
fn invalid_train_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&TrainConfig::default_config()).unwrap()).unwrap();

    let cases: Vec<(Box<dyn Fn(&mut serde_json::Value)>, &str)> = vec![
        (Box::new(|v| drop(v.as_object_mut().unwrap().remove("lr"))), "lr"),
        (Box::new(|v| v["lr"] = serde_json::json!(-1.0)), "lr"),
        (Box::new(|v| v["batch"] = serde_json::json!(0)), "batch"),
        (Box::new(|v| v["classifier"]["classes"] = serde_json::json!(5)), "classifier.classes"),
        (Box::new(|v| v["blocks"][1]["m"] = serde_json::json!(100)), "block 1"),
        (Box::new(|v| v["learning_rate"] = serde_json::json!(0.1)), "learning_rate"),
    ];
    for (mutate, field) in cases {
        let mut bad = v.clone();
        mutate(&mut bad);
        std::fs::write(&path, bad.to_string()).unwrap();
        let o = run(&["train", path_str(&path)]);
        assert!(!o.status.success());
        assert!(stderr(&o).contains(field), "expected `{field}` in: {}", stderr(&o));
    }
    v["epochs"] = serde_json::json!(0);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(run(&["train", path_str(&path)]).status.success());
}

#[test]
fn ablate_command_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1);
    let out = dir.path().join("a.csv");
    let o = run(&["--threads", "2", "ablate", "--axis", "init", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_ablation_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(names, ["random", "fps", "mean-pool", "k-means"]);
    assert!(rows.iter().all(|r| r.throughput > 0.0 && (0.0..=1.0).contains(&r.test_acc)));
}
