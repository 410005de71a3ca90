//! End-to-end runner behavior driven through configs: determinism, isolation,
//! the uniform-distribution equivalence, and the penalty-weight neutrality at
//! zero.

use std::path::Path;

use cwfed::config::{from_toml_str, ExperimentConfig};
use cwfed::experiment::{lambda_sweep, run_experiment};

fn tiny_config(out_dir: &Path, algorithm: &str) -> ExperimentConfig {
    let text = format!(
        "
clients = 4
rounds = 3
lr = 0.01
hidden_layers = [8]
seed = 3
output_dir = {:?}

[dataset]
kind = \"synthetic\"
classes = 4
dim = 6
per_class = 32
separation = 3.0

[partition]
kind = \"pathological\"
classes_per_client = 2

[algorithm]
{algorithm}
",
        out_dir.to_string_lossy()
    );
    from_toml_str(&text).unwrap()
}

#[test]
fn rerunning_a_config_reproduces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(
        &out,
        "kind = \"cwfedavg\"\nmode = \"estimated_wdr\"\nlambda = 2.0",
    );

    let first = run_experiment(&cfg).unwrap();
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let snapshot: Vec<(String, Vec<u8>)> = names
        .iter()
        .map(|n| (n.clone(), std::fs::read(out.join(n)).unwrap()))
        .collect();

    std::fs::remove_dir_all(&out).unwrap();
    let second = run_experiment(&cfg).unwrap();
    assert_eq!(first.config_hash, second.config_hash);
    for (name, bytes) in &snapshot {
        let again = std::fs::read(out.join(name)).unwrap();
        assert_eq!(&again, bytes, "{name} changed between runs");
    }
}

#[test]
fn local_only_runs_report_zero_communication() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(&out, "kind = \"local_only\"");
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary
        .trace
        .iter()
        .all(|r| r.uploaded_params == 0 && r.downloaded_params == 0));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    for round in json["communication"].as_array().unwrap() {
        assert_eq!(round["uploaded_params"], 0);
        assert_eq!(round["downloaded_params"], 0);
    }
    // no class-specific globals exist, so no global heatmap is written
    assert!(!out.join("norm_heatmap_global.csv").exists());
}

#[test]
fn uniform_partition_makes_cwfedavg_match_fedavg_accuracies() {
    // every client holds all four classes in equal amounts; with shared
    // initialization the class-wise run is indistinguishable from FedAVG
    let dir = tempfile::tempdir().unwrap();
    let make = |name: &str, algorithm: &str| {
        let mut cfg = tiny_config(&dir.path().join(name), algorithm);
        cfg.partition = cwfed::config::PartitionConfig::Pathological {
            classes_per_client: 4,
        };
        cfg.clients = 8;
        cfg.rounds = 10;
        cfg.shared_global_init = true;
        cfg
    };
    let cw = run_experiment(&make("cw", "kind = \"cwfedavg\"\nmode = \"true_dist\"")).unwrap();
    let fa = run_experiment(&make("fa", "kind = \"fedavg\"")).unwrap();
    assert_eq!(cw.trace.len(), fa.trace.len());
    for (a, b) in cw.trace.iter().zip(&fa.trace) {
        for (x, y) in a.accuracy.iter().zip(&b.accuracy) {
            assert!((x - y).abs() < 1e-6, "round {}: {x} vs {y}", a.round);
        }
    }
    assert!((cw.best_mean_accuracy - fa.best_mean_accuracy).abs() < 1e-6);
}

#[test]
fn zero_lambda_sweep_row_equals_the_no_wdr_run() {
    let dir = tempfile::tempdir().unwrap();
    let no_wdr = {
        let cfg = tiny_config(
            &dir.path().join("plain"),
            "kind = \"cwfedavg\"\nmode = \"estimated_no_wdr\"",
        );
        run_experiment(&cfg).unwrap()
    };
    let base = tiny_config(
        &dir.path().join("sweep"),
        "kind = \"cwfedavg\"\nmode = \"estimated_wdr\"",
    );
    let rows = lambda_sweep(&base, &[0.0]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].lambda, 0.0);
    assert_eq!(rows[0].mean_final_omega, no_wdr.final_mean_omega);
    assert_eq!(rows[0].best_mean_accuracy, no_wdr.best_mean_accuracy);
    assert!(dir.path().join("sweep").join("lambda_sweep.csv").exists());
}

#[test]
fn partial_participation_trains_a_subset_each_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = tiny_config(&out, "kind = \"cwfedavg\"\nmode = \"estimated_no_wdr\"");
    cfg.participation_rate = 0.5;
    let summary = run_experiment(&cfg).unwrap();
    let full = {
        let mut cfg = cfg.clone();
        cfg.participation_rate = 1.0;
        cfg.output_dir = Some(dir.path().join("full"));
        run_experiment(&cfg).unwrap()
    };
    for (partial, all) in summary.trace.iter().zip(&full.trace) {
        assert_eq!(partial.uploaded_params * 2, all.uploaded_params);
        assert_eq!(partial.downloaded_params * 2, all.downloaded_params);
    }
}

#[test]
fn sweep_rejects_bad_lambda_lists() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(&dir.path().join("sweep"), "kind = \"cwfedavg\"");
    assert!(lambda_sweep(&base, &[]).is_err());
    assert!(lambda_sweep(&base, &[-1.0]).is_err());
}

mod mnist_flavor {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    /// Writes an IDX image/label pair of 10x10 "digit" templates plus noise.
    fn write_idx_digits(dir: &Path, per_class: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10 * per_class;
        let mut pixels = Vec::with_capacity(n * 100);
        let mut labels = Vec::with_capacity(n);
        for c in 0..10u8 {
            for _ in 0..per_class {
                for p in 0..100usize {
                    let on = (p * (c as usize + 3)) % 7 < 2;
                    let base: i32 = if on { 200 } else { 30 };
                    let noisy = (base + rng.random_range(-120..=120)).clamp(0, 255);
                    pixels.push(noisy as u8);
                }
                labels.push(c);
            }
        }
        let images_path = dir.join("digits-images.idx");
        let labels_path = dir.join("digits-labels.idx");
        let mut f = std::fs::File::create(&images_path).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&10u32.to_be_bytes()).unwrap();
        f.write_all(&10u32.to_be_bytes()).unwrap();
        f.write_all(&pixels).unwrap();
        let mut f = std::fs::File::create(&labels_path).unwrap();
        f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&labels).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn idx_pathological_run_prefers_class_wise_aggregation() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_digits(dir.path(), 40);
        let make = |name: &str, algorithm: &str| {
            let text = format!(
                "
clients = 5
rounds = 5
lr = 0.02
hidden_layers = [16]
seed = 1
output_dir = {:?}

[dataset]
kind = \"mnist\"
images = {:?}
labels = {:?}

[partition]
kind = \"pathological\"
classes_per_client = 2

[algorithm]
{algorithm}
",
                dir.path().join(name).to_string_lossy(),
                images.to_string_lossy(),
                labels.to_string_lossy()
            );
            from_toml_str(&text).unwrap()
        };
        let cw = run_experiment(&make("cw", "kind = \"cwfedavg\"\nmode = \"true_dist\"")).unwrap();
        let fa = run_experiment(&make("fa", "kind = \"fedavg\"")).unwrap();
        assert!(
            cw.best_mean_accuracy > fa.best_mean_accuracy,
            "class-wise {} vs fedavg {}",
            cw.best_mean_accuracy,
            fa.best_mean_accuracy
        );
    }
}
