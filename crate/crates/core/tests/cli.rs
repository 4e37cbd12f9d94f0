use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelprop::imagery::load_labels;

const SMALL: &str = "[synth]\nwidth = 32\nheight = 32\nmin_object_size = 6\nmax_object_size = 10\nnum_sequences = 4\nval_sequences = 2\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelprop"))
        .args(args)
        .output()
        .expect("spawn labelprop")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().into(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Writes `extra` after the small synth section and generates a corpus.
fn corpus(root: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    let dir = root.join("corpus");
    let o = run(&["--config", s(&cfg), "--out", s(&dir), "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (cfg, dir)
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, a) = corpus(t.path(), "");
    let b = t.path().join("b");
    assert!(run(&["--config", s(&cfg), "--out", s(&b), "synth"]).status.success());
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("seq000/flow_00.flo")));
    assert!(ta.contains_key(Path::new("val001/labels_05.png")));
    assert_eq!(ta, tb);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    std::fs::write(&cfg, "[crf]\nlambda3 = 1.0\n").unwrap();
    let out = t.path().join("out");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["synth"]).status.code(), Some(1));
}

#[test]
fn trust_factor_out_of_range_touches_nothing() {
    let t = tempfile::tempdir().unwrap();
    let (_, c) = corpus(t.path(), "");
    let out = t.path().join("train");
    let m = c.join("manifest.csv");
    let v = c.join("val.csv");
    let o = run(&["--out", s(&out), "train", "--set", s(&m), "--val", s(&v), "--tf", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trust factor"));
    assert!(!out.exists());
}

#[test]
fn non_empty_output_needs_overwrite() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(t.path(), "");
    let before = tree(&c);
    let o = run(&["--config", s(&cfg), "--out", s(&c), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(tree(&c), before);
    assert!(run(&["--config", s(&cfg), "--out", s(&c), "--overwrite", "synth"]).status.success());
    assert_eq!(tree(&c), before);
}

#[test]
fn train_then_eval_and_reject_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(t.path(), "[train]\nepochs = 2\n");
    let out = t.path().join("train");
    let (m, v) = (c.join("manifest.csv"), c.join("val.csv"));
    let o = run(&["--config", s(&cfg), "--out", s(&out), "train", "--set", s(&m), "--val", s(&v)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.bin", "train_log.csv", "eval.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let model = out.join("model.bin");

    let ev = t.path().join("eval");
    let o = run(&["--out", s(&ev), "eval", "--model", s(&model), "--manifest", s(&v)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(ev.join("eval.csv")).unwrap(), std::fs::read(out.join("eval.csv")).unwrap());

    let empty = c.join("empty.csv");
    std::fs::write(&empty, "image,labels,tier,seq,offset,rating,trust\n").unwrap();
    let o = run(&["--out", s(&t.path().join("e2")), "eval", "--model", s(&model), "--manifest", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty evaluation"), "{}", stderr(&o));
}

#[test]
fn missing_flow_fails_unless_estimated() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(t.path(), "");
    std::fs::remove_file(c.join("seq002/flow_01.flo")).unwrap();
    let out = t.path().join("pgt");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "propagate", "--corpus", s(&c)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seq002"), "{}", stderr(&o));

    let out = t.path().join("pgt2");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "propagate", "--corpus", s(&c), "--estimate-flow"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seq002/pgt_05.png").exists());
}

#[test]
fn depth_one_on_static_scene_copies_ground_truth() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(t.path(), "max_speed = 0\nbrightness_drift = 0.0\n[crf]\ndepth = 1\n");
    let out = t.path().join("pgt");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "propagate", "--corpus", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seq in ["seq000", "seq001", "seq002", "seq003"] {
        let gt = load_labels(&c.join(seq).join("labels_00.png"), 4).unwrap();
        let pgt = load_labels(&out.join(seq).join("pgt_01.png"), 4).unwrap();
        assert_eq!(pgt.diff_count(&gt), 0, "{seq}");
        assert!(!out.join(seq).join("pgt_02.png").exists());
    }
    let index = std::fs::read_to_string(out.join("pgt.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 4);
}

#[test]
fn make_sets_is_deterministic_and_rated_needs_ratings() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(t.path(), "[sets]\nseed = 5\n");
    let pgt = t.path().join("pgt");
    assert!(run(&["--config", s(&cfg), "--out", s(&pgt), "propagate", "--corpus", s(&c)]).status.success());
    let (index, gt) = (pgt.join("pgt.csv"), c.join("manifest.csv"));
    let make = |dir: &Path, scheme: &str| {
        run(&["--config", s(&cfg), "--out", s(dir), "make-sets", "--scheme", scheme, "--index", s(&index), "--gt", s(&gt)])
    };
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(make(&a, "random").status.success());
    assert!(make(&b, "random").status.success());
    assert_eq!(tree(&a), tree(&b));
    let names: Vec<String> = tree(&a).keys().map(|k| k.display().to_string()).collect();
    for n in ["GT.csv", "PGT_RND1.csv", "GT+PGT_RND5.csv", "GT+PGT(1-5).csv"] {
        assert!(names.contains(&n.to_string()), "{n} in {names:?}");
    }

    let r = t.path().join("r");
    let o = make(&r, "rated");
    assert_eq!(o.status.code(), Some(1));
    assert!(!r.exists());
}

#[test]
fn seed_flag_changes_the_corpus() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, a) = corpus(t.path(), "");
    let b = t.path().join("b");
    assert!(run(&["--config", s(&cfg), "--seed", "9", "--out", s(&b), "synth"]).status.success());
    let (ta, tb) = (tree(&a), tree(&b));
    assert_ne!(ta.get(Path::new("seq000/frame_00.png")), tb.get(Path::new("seq000/frame_00.png")));
    let written = std::fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(written.contains("seed = 9"));
}
