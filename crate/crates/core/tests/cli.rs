//! End-to-end checks of the `metaseg` binary: exit codes, file outputs,
//! and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaseg::cli::FAMILY_SPEC_HEADER;
use metaseg::data::io::load_benchmark;
use metaseg::segnet::{checkpoint, ArchDescriptor};

fn metaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().expect("exit code");
    assert_eq!(
        got,
        want,
        "exit code {got}, wanted {want}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Two families (one with two modalities) of tiny 8x8 volumes.
fn write_family_spec(dir: &Path) -> PathBuf {
    let path = dir.join("families.csv");
    let text = format!(
        "{FAMILY_SPEC_HEADER}\n\
         tiny_a,1,4,3,8,8,2,0.8,0.9,1.0,1.2,0.28,0.38,0.7,0.85,0.8,1.0,0.05,0.2,0.3\n\
         tiny_b,2,4,3,8,8,2,0.8,0.9,1.0,1.2,0.40,0.52,0.7,0.85,0.5,0.7,0.06,0.2,0.3\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn generate_bench(dir: &Path, name: &str) -> PathBuf {
    let spec = write_family_spec(dir);
    let bench = dir.join(name);
    let out = metaseg(&[
        "generate",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        bench.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_code(&out, 0);
    bench
}

/// Settings that keep training tiny: 8x8 data, narrow shallow net.
const TINY: &[&str] = &[
    "--set",
    "resolution=8",
    "--set",
    "base_width=2",
    "--set",
    "depth=2",
    "--set",
    "meta_epochs=2",
    "--set",
    "tasks_per_epoch=2",
    "--set",
    "shots=2",
    "--set",
    "inner_epochs=1",
    "--set",
    "ft_epochs=1",
    "--set",
    "ft_shots=2",
    "--set",
    "selections=2",
];

fn dir_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn generate_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let bench1 = generate_bench(dir.path(), "bench1");
    let bench2 = generate_bench(dir.path(), "bench2");

    // Same spec and seed twice: byte-identical data files. (The echoed
    // config embeds the differing --out, so compare everything else.)
    let data_only = |root: &Path| -> Vec<(String, Vec<u8>)> {
        dir_contents(root).into_iter().filter(|(n, _)| !n.ends_with("config.txt")).collect()
    };
    assert_eq!(data_only(&bench1), data_only(&bench2));

    // Regenerating in place reproduces the whole tree, echo included.
    let before = dir_contents(&bench1);
    generate_bench(dir.path(), "bench1");
    assert_eq!(dir_contents(&bench1), before);

    // Manifest covers families x modalities and the files load back.
    let manifest = std::fs::read_to_string(bench1.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 3, "one dataset per modality");
    let datasets = load_benchmark(&bench1).unwrap();
    assert_eq!(datasets.len(), 3);
    for ds in &datasets {
        assert_eq!(ds.volumes.len(), 4);
        for v in &ds.volumes {
            assert_eq!(v.dims(), (3, 8, 8));
        }
    }

    // A different seed changes the data.
    let spec = dir.path().join("families.csv");
    let bench3 = dir.path().join("bench3");
    let out = metaseg(&[
        "generate",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        bench3.to_str().unwrap(),
        "--seed",
        "8",
    ]);
    assert_code(&out, 0);
    let c1: Vec<(String, Vec<u8>)> =
        dir_contents(&bench1).into_iter().filter(|(n, _)| n.ends_with(".mmvl")).collect();
    let c3: Vec<(String, Vec<u8>)> =
        dir_contents(&bench3).into_iter().filter(|(n, _)| n.ends_with(".mmvl")).collect();
    assert_ne!(c1, c3);
}

#[test]
fn meta_train_writes_reproducible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_bench(dir.path(), "bench");
    let run = |out: &str| {
        let ck = dir.path().join(out);
        let mut args = vec![
            "meta-train",
            "--data",
            bench.to_str().unwrap(),
            "--target",
            "tiny_a",
            "--rule",
            "idw",
            "--tasks",
            "volume",
            "--out",
        ];
        let ck_s = ck.to_str().unwrap().to_string();
        args.push(Box::leak(ck_s.into_boxed_str()));
        args.extend_from_slice(TINY);
        let out = metaseg(&args);
        assert_code(&out, 0);
        ck
    };
    let ck1 = run("a.mmsg");
    let ck2 = run("b.mmsg");

    let bytes1 = std::fs::read(&ck1).unwrap();
    let bytes2 = std::fs::read(&ck2).unwrap();
    assert_eq!(bytes1, bytes2, "same seed, same checkpoint bytes");

    let log1 = std::fs::read(ck1.with_extension("log.csv")).unwrap();
    let log2 = std::fs::read(ck2.with_extension("log.csv")).unwrap();
    assert_eq!(log1, log2);
    let text = String::from_utf8(log1).unwrap();
    assert!(text.starts_with("epoch,mean_loss,mean_sq_dist,weight_entropy,update_rule,task_rule"));
    assert_eq!(text.lines().count(), 1 + 2);
    assert!(text.lines().nth(1).unwrap().ends_with("idw,volume"));

    // The checkpoint declares the architecture it was trained with.
    let arch = ArchDescriptor { in_channels: 1, base_width: 2, depth: 2, out_channels: 1 };
    let params = checkpoint::load_expecting(&ck1, &arch).unwrap();
    assert_eq!(params.arch(), arch);

    // Re-running purely from the echoed config reproduces the checkpoint.
    let echo = ck1.with_extension("config.txt");
    assert!(echo.exists());
    let out = metaseg(&["meta-train", "--config", echo.to_str().unwrap()]);
    assert_code(&out, 0);
    assert_eq!(std::fs::read(&ck1).unwrap(), bytes1);
}

#[test]
fn finetune_eval_writes_results_and_checks_arch() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_bench(dir.path(), "bench");
    let ck = dir.path().join("meta.mmsg");
    let mut args = vec![
        "meta-train",
        "--data",
        bench.to_str().unwrap(),
        "--target",
        "tiny_a",
        "--out",
        ck.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    assert_code(&metaseg(&args), 0);

    // Random baseline.
    let csv = dir.path().join("random.csv");
    let mut args = vec![
        "finetune-eval",
        "--ckpt",
        "random",
        "--data",
        bench.to_str().unwrap(),
        "--target",
        "tiny_a",
        "--shots",
        "2",
        "--seeds",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    assert_code(&metaseg(&args), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,task_rule,update_rule,seed,iou");
    assert_eq!(lines.len(), 1 + 2, "one row per selection");
    assert!(lines[1].starts_with("random-init,-,-,0,"));

    // Trained checkpoint: method column carries the checkpoint name.
    let csv2 = dir.path().join("meta.csv");
    let mut args = vec![
        "finetune-eval",
        "--ckpt",
        ck.to_str().unwrap(),
        "--data",
        bench.to_str().unwrap(),
        "--target",
        "tiny_a",
        "--out",
        csv2.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    assert_code(&metaseg(&args), 0);
    let text2 = std::fs::read_to_string(&csv2).unwrap();
    assert!(text2.lines().nth(1).unwrap().starts_with("meta,-,-,0,"));

    // Architecture mismatch names both descriptors and exits with 2.
    let mut args = vec![
        "finetune-eval",
        "--ckpt",
        ck.to_str().unwrap(),
        "--data",
        bench.to_str().unwrap(),
        "--target",
        "tiny_a",
        "--out",
        csv2.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "base_width=4"]);
    let out = metaseg(&args);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("base=4") && stderr.contains("base=2"), "stderr: {stderr}");
}

#[test]
fn heatmap_outputs_are_symmetric_and_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_bench(dir.path(), "bench");
    let prefix = dir.path().join("dist");
    let run = || {
        let out = metaseg(&[
            "heatmap",
            "--data",
            bench.to_str().unwrap(),
            "--pairs",
            "10",
            "--out",
            prefix.to_str().unwrap(),
            "--set",
            "resolution=8",
        ]);
        assert_code(&out, 0);
        std::fs::read(PathBuf::from(format!("{}.csv", prefix.display()))).unwrap()
    };
    let csv1 = run();
    let csv2 = run();
    assert_eq!(csv1, csv2, "same seed, same heatmap");

    let text = String::from_utf8(csv1).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 1 + 3);
    let n = rows.len() - 1;
    let mut m = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = rows[i + 1][j + 1].parse().unwrap();
        }
    }
    for i in 0..n {
        assert_eq!(m[i][i], 0.0);
        for j in 0..n {
            assert!((m[i][j] - m[j][i]).abs() < 1e-9);
        }
    }

    let pgm = std::fs::read(PathBuf::from(format!("{}.pgm", prefix.display()))).unwrap();
    assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
    assert_eq!(pgm.len(), b"P5\n3 3\n255\n".len() + 9);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key: config error (2).
    let out = metaseg(&["heatmap", "--set", "bogus=1"]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // Missing benchmark directory: data/IO error (3).
    let missing = dir.path().join("nope");
    let out = metaseg(&[
        "heatmap",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 3);

    // Absurd inner learning rate: divergence (4).
    let bench = generate_bench(dir.path(), "bench");
    let ck = dir.path().join("diverge.mmsg");
    let mut args = vec![
        "meta-train",
        "--data",
        bench.to_str().unwrap(),
        "--target",
        "tiny_a",
        "--out",
        ck.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "inner_lr=1e38", "--set", "inner_epochs=3"]);
    let out = metaseg(&args);
    assert_code(&out, 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
