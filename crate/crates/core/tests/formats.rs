mod common;

use std::path::Path;

use axtrain::checkpoint::save_model;
use axtrain::config::RunConfig;
use axtrain::data::{parse_cifar, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use axtrain::model::{Hardware, KernelMode, Phase};
use axtrain::report::{metrics_csv, read_summary, write_report, METRICS_HEADER};
use axtrain::trainer::train;
use axtrain::Error;
use common::desk::*;

/// Reads an AXTN file without the library: (name, dims, values) records.
fn read_axtn(bytes: &[u8]) -> Vec<(String, Vec<u32>, Vec<f32>)> {
    assert_eq!(&bytes[..4], b"AXTN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let mut pos = 8;
    let word = |pos: &mut usize| {
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        v
    };
    let mut out = vec![];
    while pos < bytes.len() {
        let len = word(&mut pos) as usize;
        let name = String::from_utf8(bytes[pos..pos + len].to_vec()).unwrap();
        pos += len;
        let rank = word(&mut pos);
        let dims: Vec<u32> = (0..rank).map(|_| word(&mut pos)).collect();
        let n: u32 = dims.iter().product();
        let vals = (0..n).map(|_| f32::from_bits(word(&mut pos))).collect();
        out.push((name, dims, vals));
    }
    out
}

#[test]
fn checkpoint_file_layout_is_readable_independently() {
    let (tr, _) = desk_data(0.5, 640, 10);
    let hw = Hardware::default();
    let mut m = model(KernelMode::Sc, 1);
    train(&plan(KernelMode::Sc, Phase::Injection, 1.0, 0.3, 1), &mut m, &tr, None, &hw).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.axtn");
    save_model(&path, &m).unwrap();
    let recs = read_axtn(&std::fs::read(&path).unwrap());
    let params = m.parameters();
    for (name, t) in &params {
        let (_, dims, vals) = recs.iter().find(|r| &r.0 == name).unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(dims.iter().map(|&d| d as usize).collect::<Vec<_>>(), t.shape());
        assert_eq!(vals.as_slice(), t.data());
    }
    let errmodels: Vec<_> = recs.iter().filter(|r| r.0.starts_with("errmodel.")).collect();
    assert_eq!(errmodels.iter().filter(|r| r.0.ends_with(".type1.mean")).count(), 4);
    for (name, dims, _) in errmodels {
        if !name.ends_with(".domain") {
            assert_eq!(dims.len(), 2, "{name}");
            assert_eq!(dims[1], 2, "{name} holds hi/lo pairs");
        }
    }

    let mut bad = std::fs::read(&path).unwrap();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    let mut back = model(KernelMode::Sc, 1);
    assert!(matches!(axtrain::checkpoint::load_model(&path, &mut back), Err(Error::Checkpoint(_))));
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(axtrain::checkpoint::load_model(&path, &mut back), Err(Error::BadMagic { .. })));
}

fn write_config(dir: &Path, data: &str, model: &str) -> std::path::PathBuf {
    let text = format!("[run]\noutput_dir = \"out\"\n\n[data]\n{data}\n[model]\n{model}\n[train]\nmethod = \"exact\"\nmain_phase = \"exact\"\n");
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn idx_files_load_through_a_config_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i % 256) as u8).collect();
    write_idx(dir.path().join("img.idx"), IDX_IMAGES_MAGIC, &[3, 28, 28], &pixels).unwrap();
    write_idx(dir.path().join("lab.idx"), IDX_LABELS_MAGIC, &[3], &[4, 0, 9]).unwrap();
    let cfg = write_config(
        dir.path(),
        "source = \"idx\"\ntrain_images = \"img.idx\"\ntrain_labels = \"lab.idx\"\nlimit = 2\n",
        "input_channels = 1\ninput_size = 28\nwidths = [2, 2, 2]\nclasses = 10\n",
    );
    let c = RunConfig::load(&cfg).unwrap();
    let s = c.load_data().unwrap();
    assert!(s.eval.is_none());
    assert_eq!(s.train.images.shape(), &[2, 1, 28, 28]);
    assert_eq!(s.train.labels, vec![4, 0]);
    assert_eq!(s.train.images.data()[255], 1.0);
    assert_eq!(s.train.images.data()[28 * 28], (28 * 28 % 256) as f32 / 255.0);

    std::fs::write(dir.path().join("img.idx"), &std::fs::read(dir.path().join("img.idx")).unwrap()[..100]).unwrap();
    assert!(matches!(c.load_data(), Err(Error::Truncated { .. })));

    let wrong = write_config(
        dir.path(),
        "source = \"idx\"\ntrain_images = \"lab.idx\"\ntrain_labels = \"lab.idx\"\n",
        "input_channels = 1\ninput_size = 28\nwidths = [2, 2, 2]\nclasses = 10\n",
    );
    assert!(matches!(RunConfig::load(&wrong).unwrap().load_data(), Err(Error::BadMagic { .. })));
}

#[test]
fn cifar_batches_concatenate_and_check_the_model_shape() {
    let dir = tempfile::tempdir().unwrap();
    let record = |label: u8, fill: u8| {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    };
    std::fs::write(dir.path().join("a.bin"), [record(1, 0), record(2, 255)].concat()).unwrap();
    std::fs::write(dir.path().join("b.bin"), record(3, 51)).unwrap();
    let data = "source = \"cifar\"\ntrain_files = [\"a.bin\", \"b.bin\"]\neval_file = \"b.bin\"\n";
    let cfg = write_config(dir.path(), data, "input_channels = 3\ninput_size = 32\nwidths = [2, 2, 2]\nclasses = 10\n");
    let s = RunConfig::load(&cfg).unwrap().load_data().unwrap();
    assert_eq!(s.train.labels, vec![1, 2, 3]);
    assert_eq!(s.train.images.data()[3072], 1.0);
    assert_eq!(s.train.images.data()[2 * 3072 + 100], 0.2);
    assert_eq!(s.eval.unwrap().len(), 1);
    assert_eq!(parse_cifar(&record(0, 0), "x").unwrap().images.shape(), &[1, 3, 32, 32]);

    let cfg = write_config(dir.path(), data, "input_channels = 1\ninput_size = 32\nwidths = [2, 2, 2]\nclasses = 10\n");
    assert!(matches!(RunConfig::load(&cfg).unwrap().load_data(), Err(Error::Config(_))));
}

#[test]
fn metrics_and_summary_files() {
    let (tr, te) = desk_data(0.5, 320, 50);
    let hw = Hardware::default();
    let p = axtrain::trainer::TrainPlan {
        finetune_epochs: 0.5,
        eval_every: 1,
        ..plan(KernelMode::ApproxMult, Phase::Injection, 2.0, 0.05, 2)
    };
    let r = train(&p, &mut model(KernelMode::ApproxMult, 2), &tr, Some(&te), &hw).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(dir.path(), &r).unwrap();
    assert_eq!(files, vec!["metrics.csv", "summary.json"]);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&r));
    let mut lines = csv.lines();
    assert_eq!(format!("{}\n{}", lines.next().unwrap(), lines.next().unwrap()), METRICS_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["injection", "injection", "accurate"]);
    assert_eq!(rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum::<usize>(), r.total_steps);
    assert!(rows.iter().all(|r| r.len() == 7 && r[4].parse::<f64>().is_ok()));
    assert_eq!(rows.iter().map(|r| r[6].parse::<u64>().unwrap()).sum::<u64>(), r.type1_calibrations);
    assert_eq!(read_summary(&dir.path().join("summary.json")).unwrap(), r);
}
