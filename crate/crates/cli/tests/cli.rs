use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omrd_core::checkpoint;
use omrd_core::data::{synth_dataset, write_dataset, SynthConfig};
use omrd_core::eval::EvalReport;
use omrd_core::model::ModelConfig;
use omrd_core::trainer::{init_model, TrainConfig};

fn omrd(args: &[&str]) -> Output {
    omrd_env(args, &[])
}

fn omrd_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omrd"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn omrd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small but complete run configuration: 8 identities, 2 held out.
fn tiny_config(dir: &Path, out: &str, extra_train: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "dataset": {{"source": "synth", "synth": {{"num_ids": 8, "images_per_id": 4, "heldout_ids": 2, "seed": 3}}}},
  "train": {{"epochs": 2, "seed": 5, "p": 4{extra_train}}},
  "output_dir": "{}"
}}"#,
        dir.join(out).display()
    );
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, cfg).unwrap();
    path
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("train", &["--output-dir"]),
        ("eval", &["--checkpoint", "--dataset", "--feature", "--max-rank", "--output-dir"]),
        ("ablate", &["--output-dir"]),
        ("gradcheck", &["--seed", "--instances", "--tolerance", "--step", "--sabotage"]),
        ("synth", &["--out-dir", "--params", "--num-ids", "--images-per-id", "--heldout-ids", "--seed"]),
    ];
    for (cmd, flags) in cases {
        let o = omrd(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
        assert!(text.contains("OMRD_THREADS"));
    }
    assert_eq!(code(&omrd(&["--help"])), 0);
    assert_eq!(code(&omrd(&["frobnicate"])), 2);
}

#[test]
fn synth_writes_pngs_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = omrd(&["synth", "--out-dir", p(out), "--num-ids", "8", "--images-per-id", "8", "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files = read_dir_bytes(&a);
    let pngs = files.iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 64);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 64);
    for split in ["train", "query", "gallery"] {
        assert!(entries.iter().any(|e| e["split"] == split), "no {split} entries");
    }
    assert_eq!(files, read_dir_bytes(&b));
}

#[test]
fn synth_into_unwritable_place_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = omrd(&["synth", "--out-dir", p(&blocker.join("sub")), "--num-ids", "8", "--images-per-id", "4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for out in ["run1", "run2"] {
        let cfg = tiny_config(dir.path(), out, "");
        let o = omrd(&["train", p(&cfg)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let run = dir.path().join(out);
        for f in ["checkpoint.omrd", "train_log.csv", "resolved_config.json"] {
            assert!(run.join(f).exists(), "{out}/{f} missing");
        }
        ckpts.push(fs::read(run.join("checkpoint.omrd")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);

    let log = fs::read_to_string(dir.path().join("run1/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,loss_total,loss_oim1,loss_oim2,loss_oim3,loss_oim4,loss_trp\n"));
    assert_eq!(log.lines().count(), 3);

    // omitted keys appear with their effective values
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run1/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["margin"], 0.5);
    assert!(resolved["train"]["lr"]["breakpoint"].is_number());
    assert!(resolved["model"]["backbone"]["stage_channels"].is_array());
    assert_eq!(resolved["dataset"]["synth"]["heldout_ids"], 2);
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "learning_rate": 0.1}}"#).unwrap();
    let o = omrd(&["train", p(&cfg)]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("learning_rate") && msg.contains("train"), "{msg}");

    fs::write(&cfg, r#"{"model": {"backbone": {"stage_kernels": "wide"}}}"#).unwrap();
    let msg = stderr(&omrd(&["train", p(&cfg)]));
    assert!(msg.contains("model.backbone.stage_kernels"), "{msg}");

    fs::write(&cfg, r#"{"train": {"p": 1}}"#).unwrap();
    assert_eq!(code(&omrd(&["train", p(&cfg)])), 2);
    assert_eq!(code(&omrd(&["train", p(&dir.path().join("missing.json"))])), 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "boom", r#", "base_lr": 1e30, "lr": {"base": 1e30, "breakpoint": 10, "decay_span": 5}"#);
    let o = omrd(&["train", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

fn read_report(path: &Path) -> EvalReport {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn eval_reports_both_features_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "run", "");
    assert_eq!(code(&omrd(&["train", p(&cfg)])), 0);
    let data = dir.path().join("data");
    let o = omrd(&["synth", "--out-dir", p(&data), "--num-ids", "8", "--images-per-id", "4", "--heldout-ids", "2", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let ckpt = dir.path().join("run/checkpoint.omrd");

    for feature in ["oim", "trip"] {
        let o = omrd(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--feature", feature]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("mAP"));
    }
    let run = dir.path().join("run");
    for feature in ["oim", "trip"] {
        let r = read_report(&run.join(format!("eval_report_{feature}.json")));
        assert!((0.0..=1.0).contains(&r.map));
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(run.join(format!("cmc_{feature}.csv")).exists());
    }

    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = omrd_env(
            &["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--output-dir", p(&out)],
            &[("OMRD_THREADS", threads)],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(read_dir_bytes(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn eval_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.omrd");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = omrd(&["eval", "--checkpoint", p(&junk), "--dataset", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = omrd(&["eval", "--checkpoint", p(&junk), "--dataset", p(dir.path()), "--feature", "colour"]);
    assert_eq!(code(&o), 2);

    // a manifest whose first kernel shape disagrees with its payload
    let model = init_model(&ModelConfig::default(), &TrainConfig::default(), vec![0, 1]).unwrap();
    let ckpt = dir.path().join("bad_shape.omrd");
    let mut bytes = checkpoint::to_bytes(&model).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let pos = text.find(r#""shape":[5,5,3,"#).expect("first kernel entry");
    bytes[pos + 9] = b'7';
    fs::write(&ckpt, &bytes).unwrap();
    let data = dir.path().join("data");
    write_dataset(&synth_dataset(&SynthConfig { num_ids: 8, images_per_id: 4, ..Default::default() }).unwrap(), &data).unwrap();
    let o = omrd(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

/// Mean AP of random retrieval for each query's gallery composition,
/// estimated by shuffling the gallery.
fn chance_map(report_ids: &[(i64, i64)], gallery: &[(i64, i64)], trials: usize) -> f64 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut n = 0;
    for &(qid, qcam) in report_ids {
        let cand: Vec<bool> = gallery
            .iter()
            .filter(|&&(id, cam)| !(id == qid && cam == qcam))
            .map(|&(id, _)| id == qid)
            .collect();
        let rel = cand.iter().filter(|&&r| r).count();
        if rel == 0 {
            continue;
        }
        for _ in 0..trials {
            let mut order = cand.clone();
            order.shuffle(&mut rng);
            let (mut hits, mut ap) = (0, 0.0);
            for (i, &r) in order.iter().enumerate() {
                if r {
                    hits += 1;
                    ap += hits as f64 / (i + 1) as f64;
                }
            }
            total += ap / rel as f64;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn untrained_checkpoint_sits_between_chance_and_learned() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        num_ids: 12,
        images_per_id: 6,
        heldout_ids: Some(8),
        ..Default::default()
    };
    let ds = synth_dataset(&synth).unwrap();
    let data = dir.path().join("data");
    write_dataset(&ds, &data).unwrap();
    let key = |s: &&omrd_core::data::Sample| (s.identity as i64, s.camera as i64);
    let queries: Vec<(i64, i64)> = ds.split(omrd_core::data::Split::Query).iter().map(key).collect();
    let gallery: Vec<(i64, i64)> = ds.split(omrd_core::data::Split::Gallery).iter().map(key).collect();
    let chance = chance_map(&queries, &gallery, 200);
    assert!((0.05..=0.45).contains(&chance), "chance {chance}");

    // the chance band holds for random embeddings; a random network is not
    // one, since its convolutional features keep the color coding of the
    // synthetic identities and already rank better than chance
    let mut maps = Vec::new();
    for seed in 0..5 {
        let train_cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let model = init_model(&ModelConfig::default(), &train_cfg, (0..4).collect()).unwrap();
        let ckpt = dir.path().join(format!("init{seed}.omrd"));
        checkpoint::save(&model, &ckpt).unwrap();
        let out = dir.path().join(format!("eval{seed}"));
        let o = omrd(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--output-dir", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        maps.push(read_report(&out.join("eval_report_oim.json")).map);
    }
    assert!(maps.iter().all(|&m| m > chance && m < 0.9), "untrained mAPs {maps:?} (chance {chance})");
}

#[test]
fn gradcheck_passes_and_detects_sabotage() {
    let o = omrd(&["gradcheck", "--instances", "3"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let table = stdout(&o);
    let rows = table.lines().filter(|l| l.trim_end().ends_with(" ok")).count();
    assert!(rows >= 15, "{table}");

    let o = omrd(&["gradcheck", "--instances", "3", "--sabotage", "sigmoid"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sigmoid"), "{}", stderr(&o));

    assert_eq!(code(&omrd(&["gradcheck", "--sabotage", "nonsense"])), 2);
}

#[test]
fn ablate_emits_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "abl", "");
    let o = omrd(&["ablate", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,feature,mAP,rank1,rank5");
    assert_eq!(lines.len(), 9);
    for name in ["Our-G", "Our-G-B1", "Our", "Our/channels"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(&format!("{name},"))).count(), 2, "{name}");
    }
}
