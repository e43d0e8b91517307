use std::path::Path;
use std::process::{Command, Output};

use mtprompt::config::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtprompt"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_config(dir: &Path) -> String {
    let mut c = RunConfig::default();
    c.model.backbone.image_size = [16, 32];
    c.model.backbone.stage_depths = vec![1, 1];
    c.model.backbone.stage_heads = vec![1, 2];
    c.model.backbone.base_channels = 8;
    c.model.backbone.window_size = 2;
    c.model.decoder_channels = 8;
    c.iterations = 3;
    c.eval_interval = 2;
    let path = dir.join("tiny.json");
    std::fs::write(&path, c.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-data", "--out", d.to_str().unwrap(), "--scenes", "8", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 8 * 4 + 1);
    assert!(ta == tb);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let report = tmp.path().join("r.json");
    let report = report.to_str().unwrap();
    assert_eq!(code(&run(&["eval", "--data", dir, "--report", report])), 2);
    assert_eq!(
        code(&run(&[
            "eval",
            "--ckpt",
            "/nonexistent.tpck",
            "--data",
            dir,
            "--report",
            report
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "gen-data", "--out", dir, "--scenes", "1", "--seed", "0", "--bogus"
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "gen-data", "--out", dir, "--scenes", "1", "--seed", "0", "--size", "64"
        ])),
        2
    );
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["gen-data", "train", "eval", "predict", "gradcheck"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
}

#[test]
fn paper_preset_needs_acknowledgement() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.tpck");
    let o = run(&[
        "train",
        "--preset",
        "paper",
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let printed = RunConfig::from_json(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(printed, RunConfig::paper());
    assert!(!out.exists());
}

#[test]
fn gradcheck_exits_0() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("FAIL"));
    assert!(text.lines().count() >= 2 * mtprompt::gradcheck::suite::CASES.len());
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let cfg = tiny_config(tmp.path());
    let o = run(&[
        "gen-data",
        "--out",
        &p("data"),
        "--scenes",
        "3",
        "--seed",
        "1",
        "--size",
        "16x32",
    ]);
    assert_eq!(code(&o), 0);

    let o = run(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("ck.tpck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(p("ck.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("iter,semseg_ce,depth_l1,det_cls,det_reg,det_dir,det_ctr,total\n"));

    let o = run(&[
        "train",
        "--resume",
        &p("ck.tpck"),
        "--iterations",
        "5",
        "--data",
        &p("data"),
        "--out",
        &p("ck.tpck"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(p("ck.csv")).unwrap();
    let iters: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "3", "4", "5"]);

    let o = run(&[
        "eval",
        "--ckpt",
        &p("ck.tpck"),
        "--data",
        &p("data"),
        "--report",
        &p("r.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("r.json")).unwrap()).unwrap();
    let keys: Vec<&String> = rep.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["counts", "depth_rmse", "mds", "miou", "per_class_ds"]);

    let o = run(&[
        "predict",
        "--ckpt",
        &p("ck.tpck"),
        "--image",
        &p("data/scene_00000/image.ppm"),
        "--meta",
        &p("data/scene_00000/meta.json"),
        "--out",
        &p("pred"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let semseg = std::fs::read(p("pred/semseg.pgm")).unwrap();
    assert!(semseg.starts_with(b"P5\n32 16\n255\n"));
    assert_eq!(std::fs::read(p("pred/depth.bin")).unwrap().len(), 16 * 32 * 4);
    let boxes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("pred/boxes.json")).unwrap()).unwrap();
    assert!(boxes.is_array());

    // desk-sized data against the tiny model: a runtime compatibility error
    let o = run(&["gen-data", "--out", &p("big"), "--scenes", "1", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let o = run(&[
        "eval",
        "--ckpt",
        &p("ck.tpck"),
        "--data",
        &p("big"),
        "--report",
        &p("r2.json"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
