use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sea_core::pgm::decode;

fn sea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sea")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn quick_verify_passes_and_lists_suites() {
    let o = sea(&["verify", "--quick", "--sizes", "16,32", "--cases", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for name in ["oracle_equivalence", "full_mask_limit", "causality", "mask_budgets", "interpolation_equivalence"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{out}");
    }
    assert!(out.contains("0 failed"));
}

#[test]
fn bench_writes_csv_and_guards_memory() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let o = sea(&[
        "bench", "--seq-lens", "64,128", "--k", "8", "--K", "16", "--reps", "1", "--byte-cap", "300000", "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("T,stage,MACs,nnz,wall_ms,bytes\n"));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 2 * 6);
    let heads = 2;
    for r in &rows {
        if !r[3].is_empty() {
            let (t, nnz): (usize, usize) = (r[0].parse().unwrap(), r[3].parse().unwrap());
            assert!(nnz <= heads * t * 8);
        }
    }
    let dense: Vec<_> = rows.iter().filter(|r| r[1] == "dense_reference").collect();
    assert_ne!(dense[0][2], "OOM");
    assert_eq!(dense[1][2], "OOM");
}

#[test]
fn config_file_is_merged_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.cfg");
    fs::write(&cfg, "seq-lens = 32,64\nk = 4\nK = 8\nreps = 1\n").unwrap();
    let o = sea(&["bench", "--config", cfg.to_str().unwrap(), "--seq-lens", "16,32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    let ts: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert!(ts.contains(&"16") && !ts.contains(&"64"));

    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(sea(&["bench", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(sea(&["bench", "--seq-lens", "128,64", "--reps", "1"]).status.code(), Some(2));
    assert_eq!(sea(&["bench", "--seq-lens", "32", "--k", "64", "--K", "8"]).status.code(), Some(2));
    assert_eq!(sea(&["dynamic-k"]).status.code(), Some(2));
    assert_eq!(sea(&["no-such-command"]).status.code(), Some(2));
}

fn pixels(path: &Path) -> (usize, usize, Vec<u8>) {
    decode(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_sweep_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (log, weights) = (dir.path().join("log.csv"), dir.path().join("w.bin"));
    let o = sea(&[
        "train-toy", "--steps", "4", "--pretrain-steps", "20", "--seed", "1", "--out", log.to_str().unwrap(), "--save",
        weights.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&log).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let rows = csv_rows(&body);
    assert_eq!(rows.len(), 5);
    assert!(body.starts_with("step,L_approx,L_prob,L_context,L_kd,L_kd_task,L_task,total"));

    let w = weights.to_str().unwrap();
    let o = sea(&["dynamic-k", "--weights", w, "--k-list", "1,4,32", "--samples", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "4", "32"]);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    assert_eq!(sea(&["dynamic-k", "--weights", w, "--k-list", "33"]).status.code(), Some(2));

    let out = dir.path().join("dump");
    let o = sea(&["dump-attn", "--weights", w, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (t, kk) = (32, 8);
    let (r, c, _) = pixels(&out.join("layer0_head0_a_hat.pgm"));
    assert_eq!((r, c), (t, kk));
    let (r, c, mask) = pixels(&out.join("layer1_head1_mask.pgm"));
    assert_eq!((r, c), (t, t));
    assert!(mask.iter().all(|&p| p == 0 || p == 255));
    for name in ["mask", "a_star", "a_hat_full", "teacher"] {
        let (_, _, px) = pixels(&out.join(format!("layer0_head1_{name}.pgm")));
        for row in 0..t {
            assert!(px[row * t + row + 1..(row + 1) * t].iter().all(|&p| p == 0), "{name} row {row}");
        }
    }
    assert!(out.join("layer1_head0_m_hat.pgm").exists());
}
