use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stainvar::rng::{derive_seed, seeded};
use stainvar::synth::render;
use stainvar::{RgbImage, SynthSpec, TrainConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stainvar"));
    c.arg("--quiet");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().unwrap()
}

fn write_png(path: &Path, img: &RgbImage) {
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8()).unwrap().save(path).unwrap();
}

fn images(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let spec = SynthSpec { side: 16, ..SynthSpec::default() };
    (0..n)
        .map(|i| {
            let p = dir.join(format!("im{i}.png"));
            write_png(&p, &render(&spec, i % 4, &mut seeded(derive_seed(seed, i as u64))).unwrap().image);
            p
        })
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn empty_input_gives_empty_output_and_zero_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    std::fs::create_dir(&input).unwrap();
    let target = images(&tmp.path().join("t"), 1, 0).remove(0);
    let out = tmp.path().join("out");
    let o = run(bin().args(["normalize", "--method", "reinhard", "--input"]).arg(&input).arg("--target").arg(&target).arg("--output").arg(&out));
    assert_eq!(o.status.code(), Some(0));
    let sidecar = json(&out.join("normalization.json"));
    assert_eq!(sidecar["summary"]["total"], 0);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn target_normalized_to_itself_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let target = images(&input, 1, 3).remove(0);
    for method in ["reinhard", "macenko", "vahadane"] {
        let out = tmp.path().join(method);
        let o = run(bin().args(["normalize", "--method", method, "--input"]).arg(&input).arg("--target").arg(&target).arg("--output").arg(&out));
        assert!(o.status.success());
        let read = |p: &Path| image::open(p).unwrap().to_rgb8().into_raw();
        let (a, b) = (read(&target), read(&out.join("im0.png")));
        let mae = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64;
        assert!(mae < 2.0, "{method}: {mae}");
        assert_eq!(json(&out.join("normalization.json"))["method"], method);
    }
}

#[test]
fn corrupt_file_is_recorded_and_sets_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let target = images(&input, 2, 4).remove(0);
    std::fs::write(input.join("broken.png"), b"not an image").unwrap();
    let out = tmp.path().join("out");
    let o = run(bin().args(["normalize", "--method", "reinhard", "--input"]).arg(&input).arg("--target").arg(&target).arg("--output").arg(&out));
    assert_eq!(o.status.code(), Some(1));
    let sidecar = json(&out.join("normalization.json"));
    assert_eq!(sidecar["summary"]["failed"], 1);
    assert_eq!(sidecar["summary"]["written"], 2);
    assert!(out.join("im1.png").exists());
}

#[test]
fn variant_directories_follow_round_robin() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    images(&input, 2, 5);
    let targets = images(&tmp.path().join("targets"), 3, 6);
    let out = tmp.path().join("v3");
    assert!(run(bin().args(["gen-variants", "--input"]).arg(&input).arg("--targets").args(&targets).arg("--output").arg(&out)).status.success());
    for d in ["vahadane_im0", "macenko_im1", "reinhard_im2", "raw"] {
        assert!(out.join(d).join("im1.png").exists(), "{d}");
    }
    let one = tmp.path().join("v1");
    assert!(run(bin().args(["gen-variants", "--input"]).arg(&input).arg("--targets").arg(&targets[0]).arg("--output").arg(&one)).status.success());
    assert_eq!(std::fs::read_dir(&one).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 2);
}

fn tile(mask: &[bool], threshold: Option<&str>) -> String {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.png");
    write_png(&p, &RgbImage::from_fn(10, 10, |y, x| if mask[y * 10 + x] { [1.0; 3] } else { [0.0; 3] }).unwrap());
    let mut c = bin();
    c.arg("tile-label").arg("--mask").arg(&p);
    if let Some(t) = threshold {
        c.args(["--threshold", t]);
    }
    let o = run(&mut c);
    assert!(o.status.success());
    String::from_utf8(o.stdout).unwrap().trim().to_string()
}

#[test]
fn tile_labels_use_a_strict_threshold() {
    let with = |n: usize| (0..100).map(|i| i < n).collect::<Vec<_>>();
    assert_eq!(tile(&with(0), None), "0");
    assert_eq!(tile(&with(1), None), "0");
    assert_eq!(tile(&with(2), None), "1");
    assert_eq!(tile(&with(30), Some("0.3")), "0");
}

#[test]
fn bad_config_is_a_usage_error_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    images(&data, 2, 7);
    std::fs::write(data.join("labels.csv"), "file,label\nim0.png,0\nim1.png,1\n").unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"tau": -1.0}"#).unwrap();
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--data").arg(&data).arg("--output").arg(tmp.path().join("r")));
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--data").arg(&data).arg("--output").arg(tmp.path().join("r")));
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_stainvar")).arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_and_eval_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    assert!(run(bin().args(["--seed", "3", "synth", "--per-class", "2", "--side", "16", "--output"]).arg(&data)).status.success());
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["train"].as_array().unwrap().len(), 8);
    assert!(manifest["test"][0]["basis"]["od_basis"].is_array());

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        image_side: 16,
        mode: stainvar::TrainMode::CeOnly,
        encoder: stainvar::encoder::EncoderConfig { filters: vec![4, 8], embed_dim: 8, n_classes: 4 },
        ..TrainConfig::default()
    };
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let run_dir = tmp.path().join("run");
    let o = run(bin().arg("train").arg("--config").arg(&cfg_path).arg("--data").arg(data.join("train")).arg("--output").arg(&run_dir));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&run_dir.join("report.json"));
    assert_eq!(report["normalization_calls"], 0);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);
    assert!(report.get("wall_time_s").is_none());
    assert_eq!(std::fs::read_to_string(run_dir.join("loss.csv")).unwrap().lines().count(), 4);
    let weights = std::fs::read(run_dir.join("weights.bin")).unwrap();
    assert_eq!(weights.len(), 4 * json(&run_dir.join("manifest.json"))["parameter_count"].as_u64().unwrap() as usize);

    let targets: Vec<PathBuf> = (0..2).map(|i| data.join("train").join(format!("{i:05}.png"))).collect();
    let variants = tmp.path().join("variants");
    assert!(run(bin().args(["gen-variants", "--input"]).arg(data.join("test")).arg("--targets").args(&targets).arg("--output").arg(&variants)).status.success());
    let eval_dir = tmp.path().join("eval");
    let o = run(bin()
        .arg("eval")
        .arg("--run")
        .arg(&run_dir)
        .arg("--variants")
        .arg(&variants)
        .arg("--labels")
        .arg(data.join("test").join("labels.csv"))
        .arg("--output")
        .arg(&eval_dir));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = std::fs::read_to_string(eval_dir.join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1 + 3 + 1);
    assert!(acc.lines().last().unwrap().starts_with("mean,"));
    let metrics = json(&eval_dir.join("metrics.json"));
    let keys: Vec<&String> = metrics.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["accuracy", "centroid_raw", "colinearity", "consistency", "intra_cluster"]);
    let emb = std::fs::read_to_string(eval_dir.join("embeddings.csv")).unwrap();
    assert!(emb.starts_with("sample_id,variant_id,m0,"));
    assert_eq!(emb.lines().count(), 1 + 8 * 3);
}
