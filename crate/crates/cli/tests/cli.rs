//! End-to-end tests for config resolution, the command pipeline, and the
//! attention dump artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mvaformer_cli::ppm::read_gray_p6;
use mvaformer_cli::{
    cmd_compare, cmd_dump_attention, cmd_eval, cmd_gen_data, cmd_train, dump_attention,
    RunConfig,
};
use mvaformer_core::data::Dataset;
use mvaformer_core::nn::MaskKind;
use mvaformer_core::params::ParamStore;
use mvaformer_core::{Elem, Error};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("seed", "7"),
        ("split", "0.8"),
        ("data.scenes", "20"),
        ("data.views", "2"),
        ("data.classes", "3"),
        ("data.frames", "4"),
        ("data.height", "32"),
        ("data.width", "32"),
        ("data.persons_min", "2"),
        ("data.persons_max", "2"),
        ("data.pulse_prob", "1.0"),
        ("model.views", "2"),
        ("model.classes", "3"),
        ("model.channels", "16"),
        ("model.layers", "1"),
        ("model.heads", "2"),
        ("model.patch", "8"),
        ("train.epochs", "1"),
        ("train.batch_size", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

// ---- config resolution ----

#[test]
fn config_kv_round_trips() {
    let cfg = tiny_config();
    let back = RunConfig::from_str(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_rejects_unknown_keys_with_line_numbers() {
    let err = RunConfig::from_str("train.epochs=3\ndata.bogus=1\n").unwrap_err();
    match err {
        Error::Parse { line, msg } => {
            assert_eq!(line, 2);
            assert!(msg.contains("data.bogus"), "{msg}");
        }
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn config_seed_key_sets_both_seeds() {
    let cfg = RunConfig::from_str("seed=42\n").unwrap();
    assert_eq!(cfg.scene.seed, 42);
    assert_eq!(cfg.train.seed, 42);
    let cfg = RunConfig::from_str("seed=42\ndata.seed=5\n").unwrap();
    assert_eq!(cfg.scene.seed, 5);
    assert_eq!(cfg.train.seed, 42);
}

#[test]
fn config_rejects_mismatched_model_and_data() {
    let mut cfg = tiny_config();
    cfg.set("model.views", "4").unwrap();
    assert!(cfg.validate_for_data().is_err());
}

// ---- pipeline ----

fn dir_digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            );
        }
    }
    out
}

#[test]
fn gen_data_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.set("data.scenes", "2").unwrap();
    let dir = tmp.path().join("data");
    cmd_gen_data(&cfg, &dir).unwrap();
    let first = dir_digest(&dir);
    assert!(first.contains_key("annotations.csv"));
    assert!(first.contains_key("manifest.txt"));
    assert!(first.contains_key("scene0000.mvaf"));
    cmd_gen_data(&cfg, &dir).unwrap();
    assert_eq!(dir_digest(&dir), first);
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    cfg: RunConfig,
    data: PathBuf,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

fn run_pipeline(cfg: &RunConfig) -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let checkpoint = tmp.path().join("model.mvck");
    let metrics = tmp.path().join("metrics.csv");
    cmd_gen_data(cfg, &data).unwrap();
    cmd_train(cfg, &data, &checkpoint).unwrap();
    cmd_eval(cfg, &checkpoint, &data, &metrics).unwrap();
    Pipeline {
        _tmp: tmp,
        cfg: cfg.clone(),
        data,
        checkpoint,
        metrics,
    }
}

#[test]
fn pipeline_is_reproducible() {
    let cfg = tiny_config();
    let a = run_pipeline(&cfg);
    let b = run_pipeline(&cfg);
    assert_eq!(
        fs::read(&a.checkpoint).unwrap(),
        fs::read(&b.checkpoint).unwrap()
    );
    assert_eq!(
        fs::read(&a.metrics).unwrap(),
        fs::read(&b.metrics).unwrap()
    );
    let log = fs::read_to_string(a.checkpoint.with_extension("log.csv")).unwrap();
    assert!(log.starts_with("epoch,batch,lr,loss\n"));
    let metrics = fs::read_to_string(&a.metrics).unwrap();
    assert!(metrics.starts_with("class,tp,fp,fn,precision,recall,f\n"));
    assert!(metrics.lines().any(|l| l.starts_with("macro,")));
}

#[test]
fn compare_writes_all_methods() {
    let cfg = tiny_config();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("comparison.csv");
    cmd_gen_data(&cfg, &data).unwrap();
    cmd_compare(&cfg, &data, &out).unwrap();
    let csv = fs::read_to_string(&out).unwrap();
    let methods: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        methods,
        ["single_view", "ensemble", "pooled", "vanilla", "sva_dva"]
    );
}

// ---- attention dumps ----

#[test]
fn dump_attention_artifacts_and_mask_invariants() {
    let p = run_pipeline(&tiny_config());
    let dataset = Dataset::open(&p.data).unwrap();
    let ann = dataset
        .annotations
        .iter()
        .find(|a| a.bbox.is_some())
        .unwrap()
        .clone();
    let out = p.data.parent().unwrap().join("dump");
    cmd_dump_attention(
        &p.cfg,
        &p.checkpoint,
        &p.data,
        &ann.clip,
        ann.keyframe,
        ann.person,
        0,
        &out,
    )
    .unwrap();

    let csv = fs::read_to_string(out.join("attention.csv")).unwrap();
    assert!(csv.starts_with("layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight\n"));
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (kind, qv, kv) = (f[2], f[3], f[6]);
        match kind {
            "sva" => assert_eq!(qv, kv, "sva row crosses views: {line}"),
            "dva" => assert_ne!(qv, kv, "dva row stays in view: {line}"),
            other => panic!("unexpected kind {other}"),
        }
    }

    // heatmaps: masked regions are black, unmasked intensities renormalize
    // to the recorded weights within the 8-bit quantization step
    let ckpt = fs::read(&p.checkpoint).unwrap();
    let params = ParamStore::<f32>::read_from(&mut ckpt.as_slice()).unwrap();
    let dump = dump_attention(&p.cfg, &params, &dataset, &ann.clip, ann.keyframe, ann.person)
        .unwrap();
    assert!(!dump.records.is_empty());
    for rec in &dump.records {
        let name = format!("layer{}_head{}_{}.ppm", rec.layer, rec.head, rec.kind.as_str());
        let (w, h, pixels) = read_gray_p6(&fs::read(out.join(name)).unwrap()).unwrap();
        let t = rec.tokens_per_view;
        let n = rec.views * t;
        assert_eq!((w, h), (n, t));
        let data = rec.weights.data();
        // the heatmap scales by the max over the dumped query block only
        let max = data[..t * n]
            .iter()
            .map(|&v| Elem::to_f64(v))
            .fold(0.0, f64::max);
        assert!(max > 0.0);
        for q in 0..t {
            for k in 0..n {
                let weight = Elem::to_f64(data[q * n + k]);
                let pixel = pixels[q * n + k];
                let same_view = k / t == 0;
                match rec.kind {
                    MaskKind::Sva if !same_view => assert_eq!(pixel, 0.0),
                    MaskKind::Dva if same_view => assert_eq!(pixel, 0.0),
                    _ => {}
                }
                assert!(
                    (pixel * max - weight).abs() <= max * (0.5 / 255.0) + 1e-9,
                    "kind {:?} q{q} k{k}: pixel {pixel} vs weight {weight}",
                    rec.kind
                );
            }
        }
    }
}

#[test]
fn dump_attention_missing_person_is_lookup_error() {
    let p = run_pipeline(&tiny_config());
    let err = cmd_dump_attention(
        &p.cfg,
        &p.checkpoint,
        &p.data,
        "scene0000",
        0,
        999,
        0,
        &p.data.parent().unwrap().join("dump2"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Lookup(_)), "{err}");
}

// ---- binary behavior ----

fn mvaf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvaf"))
}

#[test]
fn binary_fails_with_single_line_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    fs::write(&cfg_path, "no_such_key=1\n").unwrap();
    let out = mvaf()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
}

#[test]
fn binary_gen_data_succeeds_and_respects_thread_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let status = mvaf()
        .args(["gen-data", "--set", "data.scenes=2", "--set", "data.frames=4"])
        .args(["--set", "data.height=32", "--set", "data.width=32"])
        .arg("--out")
        .arg(&dir)
        .env("MVAF_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("manifest.txt").exists());

    let out = mvaf()
        .args(["gen-data", "--out"])
        .arg(tmp.path().join("d2"))
        .env("MVAF_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("MVAF_THREADS"));
}

#[test]
fn binary_seed_flag_changes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |seed: &str, name: &str| {
        let dir = tmp.path().join(name);
        let status = mvaf()
            .args(["gen-data", "--seed", seed])
            .args(["--set", "data.scenes=1", "--set", "data.frames=4"])
            .args(["--set", "data.height=32", "--set", "data.width=32"])
            .arg("--out")
            .arg(&dir)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(dir.join("annotations.csv")).unwrap()
    };
    assert_ne!(gen("1", "a"), gen("2", "b"));
    assert_eq!(gen("1", "c"), gen("1", "d"));
}
