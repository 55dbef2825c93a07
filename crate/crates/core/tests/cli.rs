use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use litetrack::synth::{plant_uniform_attention, SyntheticSpec};
use litetrack::{ModelConfig, Variant, WeightStore};

fn litetrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_litetrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_sequence(dir: &Path, frames: usize) {
    SyntheticSpec::moving(96, 80, frames, 16.0, 3).generate().write_to(dir).unwrap();
}

#[test]
fn count_b9_reports_its_layer_split() {
    let o = litetrack(&["count", "--variant", "B9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("FE=6 AI=3"), "{text}");
    assert!(text.contains("14.17"), "published figure missing:\n{text}");
}

#[test]
fn count_with_template_pass_is_larger() {
    let total = |extra: &[&str]| -> u64 {
        let mut args = vec!["count", "--variant", "B4", "--toy"];
        args.extend(extra);
        let o = litetrack(&args);
        let text = stdout(&o);
        let line = text.lines().find(|l| l.starts_with("total")).unwrap().to_string();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert!(total(&["--include-template-macs"]) > total(&[]));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let o = litetrack(&["count", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn custom_variant_needs_a_config_file() {
    let o = litetrack(&["count", "--variant", "custom"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cfg");
    fs::write(&path, ModelConfig::toy(3, 1).to_kv_string()).unwrap();
    let o = litetrack(&["count", "--variant", "custom", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("FE=3 AI=1"));

    fs::write(&path, "embed_dim=64\n").unwrap();
    let o = litetrack(&["count", "--variant", "custom", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_weights_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for p in [&a, &b] {
        let o = litetrack(&["gen-weights", "--variant", "B4", "--toy", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let w = WeightStore::load(&a).unwrap();
    assert_eq!(w.config(), &Variant::B4.toy_config());
}

#[test]
fn weights_must_match_the_requested_variant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    WeightStore::generate(&Variant::B6.toy_config(), 1).unwrap().save(&path).unwrap();
    let o = litetrack(&["count", "--variant", "B4", "--toy", "--weights", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = litetrack(&["count", "--variant", "B6", "--toy", "--weights", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_toy_passes() {
    let o = litetrack(&["verify", "--toy"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn track_writes_one_line_per_frame_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    write_sequence(&seq, 6);
    let run = |name: &str, extra: &[&str]| -> String {
        let out = dir.path().join(name);
        let mut args = vec![
            "track",
            "--variant",
            "B4",
            "--toy",
            "--seed",
            "11",
            "--seq",
            seq.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend(extra);
        let o = litetrack(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.txt", &[]);
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, run("b.txt", &[]));
    assert_eq!(run("c.txt", &["--frames", "4"]).lines().count(), 4);
}

#[test]
fn track_reports_missing_inputs_as_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.txt");
    let o = litetrack(&[
        "track",
        "--variant",
        "B4",
        "--toy",
        "--seq",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

fn attn_dump(dir: &Path, weights: &Path, layer: &str) -> Output {
    let seq = dir.join("seq");
    if !seq.exists() {
        write_sequence(&seq, 3);
    }
    litetrack(&[
        "attn-dump",
        "--weights",
        weights.to_str().unwrap(),
        "--seq",
        seq.to_str().unwrap(),
        "--frame",
        "2",
        "--layer",
        layer,
        "--out",
        dir.join("map.pgm").to_str().unwrap(),
    ])
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(4, |&b| b == b'\n').collect();
    assert_eq!(header[0], b"P5");
    let dims: Vec<usize> = std::str::from_utf8(header[1])
        .unwrap()
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(header[2], b"255");
    (dims[0], dims[1], header[3].to_vec())
}

#[test]
fn attn_dump_writes_graymap_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    WeightStore::generate(&ModelConfig::toy(1, 2), 4).unwrap().save(&w).unwrap();
    let o = attn_dump(dir.path(), &w, "2");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("map.csv")).unwrap();
    let cells: Vec<f32> = csv
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f32>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(cells.len(), 16);
    assert!(cells.iter().all(|v| (0.0..=1.0).contains(v)));
    let (w_px, h_px, pixels) = read_pgm(&dir.path().join("map.pgm"));
    assert_eq!((w_px, h_px, pixels.len()), (4, 4, 16));
    assert_eq!(pixels.iter().max(), Some(&255));
    assert_eq!(pixels.iter().min(), Some(&0));
}

#[test]
fn attn_dump_rejects_feature_extraction_layers() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    WeightStore::generate(&ModelConfig::toy(2, 2), 4).unwrap().save(&w).unwrap();
    let o = attn_dump(dir.path(), &w, "1");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[2, 3]"), "{}", stderr(&o));
}

#[test]
fn uniform_attention_gives_a_constant_map() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    let store = plant_uniform_attention(&WeightStore::generate(&ModelConfig::toy(1, 1), 2).unwrap()).unwrap();
    store.save(&w).unwrap();
    let o = attn_dump(dir.path(), &w, "1");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("map.csv")).unwrap();
    for v in csv.lines().flat_map(|l| l.split(',')) {
        let v: f32 = v.parse().unwrap();
        assert!((v - 1.0 / 20.0).abs() < 1e-6, "{v}");
    }
    let (_, _, pixels) = read_pgm(&dir.path().join("map.pgm"));
    assert!(pixels.iter().all(|&p| p == pixels[0]));
}

#[test]
fn sweep_emits_every_ablation_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = litetrack(&["sweep", "--toy", "--runs", "0", "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,total_layers,fe,ai,params,macs,median_ms,p90_ms"));
    let splits: Vec<String> = lines.map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(splits, ["6+2", "5+3", "0+8", "4+2", "3+3", "3+1", "2+2"]);
    assert!(!stdout(&o).contains("differ"));
}

#[test]
fn bench_rejects_fewer_than_thirty_runs() {
    let o = litetrack(&["bench", "--variant", "B4", "--toy", "--runs", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_toy_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = litetrack(&["bench", "--toy", "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(stdout(&o).contains("threads=1"));
}
