use std::path::Path;
use std::process::{Command, Output};

use nanocnn::bench::BenchReport;

const BIN: &str = env!("CARGO_BIN_EXE_nanocnn");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn idx(magic: u32, dims: &[u32], payload: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut b: Vec<u8> = std::iter::once(magic).chain(dims.iter().copied()).flat_map(u32::to_be_bytes).collect();
    b.extend(payload);
    b
}

/// A small learnable MNIST-format dataset: class `l` lights up rows `3l..3l+3`.
fn write_mnist(dir: &Path, train: usize, test: usize) {
    let files = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test),
    ];
    for (images, labels, n) in files {
        let label = |i: usize| ((i * 7 + 3) % 10) as u8;
        let pixels = (0..n).flat_map(|i| (0..784).map(move |p| if p / 28 / 3 == label(i) as usize { 230 } else { 10 }));
        std::fs::write(dir.join(images), idx(2051, &[n as u32, 28, 28], pixels)).unwrap();
        std::fs::write(dir.join(labels), idx(2049, &[n as u32], (0..n).map(label))).unwrap();
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: String,
    run_dir: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    write_mnist(&data, 96, 40);
    Fixture {
        data: data.to_str().unwrap().to_string(),
        run_dir: tmp.path().join("run").to_str().unwrap().to_string(),
        _tmp: tmp,
    }
}

fn train_args<'a>(f: &'a Fixture, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--model", "mnist-1.5k-dw", "--data-dir", &f.data, "--epochs", "1", "--seed", "7", "--batch-size",
        "16", "--out", out,
    ]
}

#[test]
fn params_prints_declared_totals() {
    let table = [
        ("mnist-25k", 25144),
        ("mnist-7k", 7767),
        ("mnist-7k-dw", 7611),
        ("mnist-5k", 5712),
        ("mnist-5k-dw", 5616),
        ("mnist-1.5k-dw", 1560),
        ("cifar-143k", 143208),
        ("cifar-143k-dw", 143396),
    ];
    for (name, want) in table {
        let out = run(&["params", name]);
        assert_eq!(out.status.code(), Some(0), "{name}");
        assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), want.to_string());
    }
}

#[test]
fn exit_code_contract() {
    let f = fixture();
    let ckpt_dir = format!("{}-ok", f.run_dir);
    assert_eq!(code(&train_args(&f, &ckpt_dir)), 0);
    let ckpt = format!("{ckpt_dir}/final.ckpt");
    let bad_ckpt = format!("{ckpt_dir}/bad.ckpt");
    std::fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let missing = format!("{}/nowhere", f.data);
    let json = format!("{ckpt_dir}/bench.json");

    let table: Vec<(Vec<&str>, i32)> = vec![
        (vec!["params", "mnist-1.5k-dw"], 0),
        (vec!["params", "no-such-model"], 2),
        (vec!["params", "mnist-1.5k-dw+se4/8"], 1),
        (vec![], 2),
        (vec!["--help"], 0),
        (vec!["frobnicate"], 2),
        (vec!["train", "--model", "mnist-1.5k-dw", "--data-dir", &f.data], 2),
        (vec!["train", "--model", "nope", "--data-dir", &f.data, "--out", &f.run_dir], 2),
        (vec!["train", "--model", "mnist-1.5k-dw", "--data-dir", &missing, "--out", &f.run_dir], 1),
        (vec!["eval", "--ckpt", &missing, "--data-dir", &f.data], 1),
        (vec!["eval", "--ckpt", &bad_ckpt, "--data-dir", &f.data], 1),
        (vec!["eval", "--ckpt", &ckpt, "--data-dir", &f.data], 0),
        (vec!["bench", "--ckpt", &ckpt, "--data-dir", &f.data, "--repeats", "2"], 2),
        (vec!["bench", "--ckpt", &ckpt, "--data-dir", &f.data, "--batch", "8", "--json", &json], 0),
    ];
    for (args, want) in &table {
        let out = run(args);
        assert_eq!(out.status.code(), Some(*want), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let stderr = String::from_utf8_lossy(&out.stderr);
        if *want != 0 {
            let errors: Vec<&str> = stderr.lines().filter(|l| !l.starts_with("warning")).collect();
            assert_eq!(errors.len(), 1, "{args:?} should print one diagnostic line: {stderr}");
        }
    }
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let f = fixture();
    let (a, b) = (format!("{}-a", f.run_dir), format!("{}-b", f.run_dir));
    assert_eq!(code(&train_args(&f, &a)), 0);
    assert_eq!(code(&train_args(&f, &b)), 0);
    for name in ["config.json", "metrics.jsonl", "timing.jsonl", "final.ckpt"] {
        assert!(Path::new(&a).join(name).is_file(), "{name}");
    }
    let ma = std::fs::read(Path::new(&a).join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(Path::new(&b).join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 2);
    let ca = std::fs::read(Path::new(&a).join("final.ckpt")).unwrap();
    assert_eq!(ca, std::fs::read(Path::new(&b).join("final.ckpt")).unwrap());
}

#[test]
fn bench_report_round_trips_and_matches_checkpoint() {
    let f = fixture();
    let dir = format!("{}-bench", f.run_dir);
    let mut args = train_args(&f, &dir);
    args.push("--blurpool");
    assert_eq!(code(&args), 0);
    let ckpt = format!("{dir}/final.ckpt");
    let json = format!("{dir}/bench.json");
    assert_eq!(code(&["bench", "--ckpt", &ckpt, "--data-dir", &f.data, "--batch", "10", "--json", &json]), 0);
    let text = std::fs::read_to_string(&json).unwrap();
    let report: BenchReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::from_str::<BenchReport>(&serde_json::to_string(&report).unwrap()).unwrap(), report);
    assert_eq!(report.model_name, "mnist-1.5k-dw+bp");
    assert_eq!(report.params, 1560);
    assert_eq!(report.repeats, 3);
    assert_eq!(report.examples, 40);
    assert_eq!(report.size_kb, std::fs::metadata(&ckpt).unwrap().len() as f64 / 1024.0);
    let eval = run(&["eval", "--ckpt", &ckpt, "--data-dir", &f.data]);
    let acc: f64 = String::from_utf8_lossy(&eval.stdout).trim().parse().unwrap();
    assert_eq!(acc, report.accuracy);
}
