use std::fs;
use std::path::Path;
use std::process::Command;

use ifaseg::checkpoint::Checkpoint;
use ifaseg::dataset::{write_dataset, DirectoryDataset};
use ifaseg::steplog::{read_series, read_steps};
use ifaseg_core::episodes::{Category, Dataset, InMemoryDataset, Sample};
use ifaseg_core::image::{BinaryMask, Image};

fn sample(seed: usize) -> Sample {
    let mut mask = BinaryMask::zeros(8, 10);
    let mut img = Image::filled(8, 10, [0.2, 0.4, 0.6]);
    for y in 2..6 {
        for x in (seed % 3)..(seed % 3 + 5) {
            mask.set(y, x, true);
            img.set_pixel(y, x, [1.0, 0.0, 0.2]);
        }
    }
    Sample::new(img, mask).unwrap()
}

fn three_pair_dataset() -> InMemoryDataset {
    let cat = |id: u32, name: &str, n: usize| Category {
        id,
        name: name.to_string(),
        samples: (0..n).map(sample).collect(),
    };
    InMemoryDataset::new("toy", vec![cat(7, "zebra", 1), cat(3, "apple", 2)])
}

fn cli(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ifaseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn written_dataset_reads_back_sorted_and_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let src = three_pair_dataset();
    write_dataset(&src, tmp.path()).unwrap();
    let ds = DirectoryDataset::open(tmp.path()).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.category_count(), 2);
    assert_eq!((ds.category_name(0).as_str(), ds.category_id(0)), ("apple", 0));
    assert_eq!((ds.category_name(1).as_str(), ds.category_len(1)), ("zebra", 1));
    let back = ds.load(0, 1).unwrap();
    let orig = src.load(1, 1).unwrap();
    assert_eq!(back.mask, orig.mask);
    // Colours go through 8-bit quantization.
    for (a, b) in back.image.pixels().iter().zip(orig.image.pixels()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn empty_root_is_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = DirectoryDataset::open(tmp.path()).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.category_count(), 0);
}

#[test]
fn mask_values_other_than_0_and_255_fail_at_open_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&three_pair_dataset(), tmp.path()).unwrap();
    let bad = tmp.path().join("apple/masks/0001.png");
    let mut grey = image::open(&bad).unwrap().to_luma8();
    grey.put_pixel(3, 4, image::Luma([128]));
    grey.save(&bad).unwrap();
    let err = DirectoryDataset::open(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("0001.png") && err.contains("128"), "{err}");
}

#[test]
fn unmatched_ids_fail_at_open() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&three_pair_dataset(), tmp.path()).unwrap();
    fs::remove_file(tmp.path().join("zebra/masks/0000.png")).unwrap();
    let err = DirectoryDataset::open(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("zebra") && err.contains("no mask"), "{err}");

    fs::copy(tmp.path().join("apple/masks/0000.png"), tmp.path().join("apple/masks/0009.png")).unwrap();
    fs::remove_dir_all(tmp.path().join("zebra")).unwrap();
    let err = DirectoryDataset::open(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("0009.png") && err.contains("no image"), "{err}");
}

#[test]
fn missing_masks_directory_fails_at_open() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&three_pair_dataset(), tmp.path()).unwrap();
    fs::remove_dir_all(tmp.path().join("apple/masks")).unwrap();
    assert!(DirectoryDataset::open(tmp.path()).is_err());
}

#[test]
fn cli_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.toml"), "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = cli(&["train", "--config", "bad.toml"], dir);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = cli(&["eval", "--config", "missing.toml", "--checkpoint", "x.safetensors"], dir);
    assert!(!out.status.success());

    let out = cli(&["analyze-gestalt", "--data", "nowhere"], dir);
    assert!(!out.status.success());

    let out = cli(&["frobnicate"], dir);
    assert!(!out.status.success());
}

#[test]
fn cli_reports_bad_masks_with_a_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&three_pair_dataset(), &data).unwrap();
    let bad = data.join("zebra/masks/0000.png");
    let mut grey = image::open(&bad).unwrap().to_luma8();
    grey.put_pixel(0, 0, image::Luma([1]));
    grey.save(&bad).unwrap();
    let out = cli(&["analyze-gestalt", "--data", "data"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("zebra/masks/0000.png"), "{}", stderr(&out));
}

#[test]
fn empty_dataset_root_warns() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = cli(&["analyze-gestalt", "--data", "empty"], tmp.path());
    assert!(stderr(&out).contains("no categories"), "{}", stderr(&out));
}

#[test]
fn small_pipeline_writes_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_dataset(&three_pair_dataset(), &dir.join("data")).unwrap();
    fs::write(
        dir.join("run.toml"),
        "output_dir = \"out\"\nsource_data = \"data\"\ntarget_data = \"data\"\ninput_size = 16\n\
         encoder_widths = [4, 4]\nencoder_strides = [2, 1]\nsource_epochs = 2\nsource_episodes_per_epoch = 3\n\
         finetune_epochs = 1\nfinetune_repeats = 2\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let out = cli(args, dir);
        assert!(out.status.success(), "{}", stderr(&out));
    };
    ok(&["train", "--config", "run.toml"]);
    ok(&["finetune", "--config", "run.toml", "--checkpoint", "out/source.safetensors"]);
    ok(&["eval", "--config", "run.toml", "--checkpoint", "out/finetuned.safetensors"]);

    let steps = read_steps(&dir.join("out/train_steps.jsonl")).unwrap();
    assert_eq!(steps.len(), 6);
    assert!(steps.iter().all(|s| s.stage == "source" && s.augmentation.is_none() && s.terms.len() == 3));
    let tuned = read_steps(&dir.join("out/finetune_steps.jsonl")).unwrap();
    // Two categories, one support each, two repeats, one epoch.
    assert_eq!(tuned.len(), 4);
    assert!(tuned.iter().all(|s| s.augmentation.is_some() && s.iterations.len() == 3 && s.terms.len() == 7));
    for s in &tuned {
        let rebuilt: f64 = s.terms.iter().map(|t| t.weight * t.value as f64).sum();
        assert!((rebuilt - s.total as f64).abs() < 1e-5);
    }
    let curve = read_series(&dir.join("out/train_loss.txt")).unwrap();
    assert_eq!(curve.len(), 6);
    assert_eq!(read_series(&dir.join("out/train_epoch_loss.txt")).unwrap().len(), 2);

    let ck = Checkpoint::load(&dir.join("out/finetuned.safetensors")).unwrap();
    assert_eq!(ck.stage, "finetune");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["stage"], "finetune");
    // "apple" has one held-out query, "zebra" none.
    assert_eq!(report["episodes"], 1);
    assert_eq!(report["excluded"], serde_json::json!([1]));
    assert_eq!(report["config_digest"].as_str().unwrap(), ck.config_digest);

    // A checkpoint with another encoder layout is refused.
    fs::write(dir.join("other.toml"), "encoder_widths = [4]\nencoder_strides = [2]\nsource_data = \"data\"\n").unwrap();
    let out = cli(&["eval", "--config", "other.toml", "--checkpoint", "out/source.safetensors"], dir);
    assert!(!out.status.success());
}
