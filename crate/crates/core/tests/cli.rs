use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vlp::config::RunConfig;
use vlp::train::Checkpoint;

fn vlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlp")).args(args).output().expect("spawn vlp")
}

fn ok(args: &[&str]) -> String {
    let o = vlp(args);
    assert!(
        o.status.success(),
        "vlp {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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
fn gen_data_twice_gives_identical_files() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--n-scenes", "100", "--out", p(d)]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
    let other = t.path().join("c");
    ok(&["gen-data", "--seed", "8", "--n-scenes", "100", "--out", p(&other)]);
    assert_ne!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(other.join("corpus.jsonl")).unwrap());
}

#[test]
fn tiny_gradcheck_reports_below_tolerance() {
    let out = ok(&["gradcheck", "--tiny", "--tol", "1e-3"]);
    let line = out.lines().find(|l| l.starts_with("max_rel_error")).expect("summary line");
    let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-3, "{out}");
}

#[test]
fn zero_step_pretrain_writes_checkpoint_and_config() {
    let t = tempfile::tempdir().unwrap();
    let (d, o) = (t.path().join("d"), t.path().join("o"));
    ok(&["gen-data", "--seed", "1", "--n-scenes", "20", "--out", p(&d)]);
    ok(&["pretrain", "--corpus", p(&d), "--steps", "0", "--out", p(&o)]);
    let ck = Checkpoint::load(&o.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.meta.step, 0);
    assert_eq!(ck.meta.vocab.len(), ck.meta.model.vocab_size);
    let echoed = fs::read_to_string(o.join("config.json")).unwrap();
    let c = RunConfig::default().merge_json(&echoed).unwrap();
    assert_eq!(c.steps, 0);
    assert_eq!(fs::read_to_string(o.join("metrics.csv")).unwrap().lines().count(), 1);
}

fn pipeline(root: &Path) {
    let (d, v) = (root.join("data"), root.join("val"));
    ok(&["gen-data", "--seed", "3", "--n-scenes", "24", "--out", p(&d)]);
    ok(&["gen-data", "--seed", "4", "--n-scenes", "8", "--out", p(&v)]);
    let pre = root.join("pre");
    ok(&["pretrain", "--seed", "5", "--corpus", p(&d), "--steps", "6", "--set", "batch_size=4", "--out", p(&pre)]);
    let ck = pre.join("checkpoint.bin");
    for task in ["vqa", "retrieval", "caption"] {
        let ft = root.join(format!("ft-{task}"));
        let sets = ["--set", "ft_batch_size=4", "--set", "max_len=8"];
        let mut args = vec!["finetune", "--seed", "5", "--task", task, "--corpus", p(&d), "--val", p(&v)];
        args.extend(["--ckpt", p(&ck), "--steps", "3", "--out", p(&ft)]);
        args.extend(sets);
        ok(&args);
        let ev = root.join(format!("eval-{task}"));
        let fck = ft.join("checkpoint.bin");
        let mut args = vec!["eval", "--task", task, "--corpus", p(&v), "--ckpt", p(&fck), "--out", p(&ev)];
        args.extend(["--threads", "2"]);
        args.extend(sets);
        ok(&args);
    }
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    let (fa, fb) = (files(&a), files(&b));
    let names: Vec<String> = fa.iter().map(|(n, _)| n.display().to_string()).collect();
    for want in ["pre/checkpoint.bin", "pre/metrics.csv", "ft-vqa/vqa.csv", "ft-caption/captions.tsv"] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, xa), (nb, xb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(xa == xb, "{} differs between reruns", na.display());
    }
    let csv = fs::read_to_string(a.join("eval-retrieval/retrieval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,R1,R5,R10"));
    let caps = fs::read_to_string(a.join("ft-caption/captions.tsv")).unwrap();
    assert_eq!(caps.lines().count(), 8);
    assert!(caps.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn resume_reproduces_uninterrupted_trajectory() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--seed", "2", "--n-scenes", "40", "--out", p(&d)]);
    let common = ["--seed", "9", "--set", "batch_size=4", "--set", "checkpoint_every=10"];
    let full = t.path().join("full");
    let mut args = vec!["pretrain", "--corpus", p(&d), "--steps", "22", "--out", p(&full)];
    args.extend(common);
    ok(&args);
    let part = t.path().join("part");
    let mid = full.join("step-000010.bin");
    let mut args = vec!["pretrain", "--corpus", p(&d), "--steps", "22", "--resume", p(&mid), "--out", p(&part)];
    args.extend(common);
    ok(&args);
    let full_rows: Vec<String> = fs::read_to_string(full.join("metrics.csv")).unwrap().lines().map(String::from).collect();
    let part_rows: Vec<String> = fs::read_to_string(part.join("metrics.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(part_rows.len(), 13);
    assert_eq!(part_rows[0], full_rows[0]);
    assert_eq!(&part_rows[1..], &full_rows[11..]);
    assert_eq!(fs::read(full.join("checkpoint.bin")).unwrap(), fs::read(part.join("checkpoint.bin")).unwrap());
}

#[test]
fn inspect_prints_crc_of_raw_bytes() {
    let t = tempfile::tempdir().unwrap();
    let (d, o) = (t.path().join("d"), t.path().join("o"));
    ok(&["gen-data", "--n-scenes", "10", "--out", p(&d)]);
    ok(&["pretrain", "--corpus", p(&d), "--steps", "1", "--set", "batch_size=2", "--out", p(&o)]);
    let path = o.join("checkpoint.bin");
    let out = ok(&["inspect-ckpt", "--ckpt", p(&path)]);
    let ck = Checkpoint::load(&path).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3 * ck.params.len());
    for ((name, t), line) in ck.params.iter().zip(&lines) {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 4, "{line}");
        assert_eq!(f[0], name);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        assert_eq!(f[1], format!("[{}]", dims.join(",")));
        assert_eq!(f[2], "f32");
        let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        assert_eq!(f[3], format!("{:08x}", crc32fast::hash(&bytes)));
    }
    assert!(lines[ck.params.len()].starts_with("adam.m/"));
}

#[test]
fn exit_codes_follow_error_class() {
    let t = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| vlp(args).status.code().unwrap();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen-data", "--out", p(t.path()), "--bogus"]), 1);
    assert_eq!(code(&["gen-data", "--out", p(t.path()), "--set", "no_such_key=1"]), 1);
    assert_eq!(code(&["gen-data", "--out", p(t.path()), "--set", "n_scenes=lots"]), 1);
    assert_eq!(code(&["finetune", "--task", "translate", "--corpus", "x"]), 1);
    assert_eq!(code(&["pretrain", "--corpus", p(&t.path().join("missing"))]), 2);
    assert_eq!(code(&["inspect-ckpt", "--ckpt", p(&t.path().join("none.bin"))]), 2);
    assert_eq!(code(&["--help"]), 0);

    let o = vlp(&["finetune", "--task", "caption", "--corpus", "x", "--set", "self_critical=true"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not implemented"));

    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"lr": 0.1, "typo_key": 3}"#).unwrap();
    let o = vlp(&["gen-data", "--out", p(t.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo_key"));
}

#[test]
fn config_file_then_set_then_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"n_scenes": 5, "seed": 11, "noise_sigma": 0.1}"#).unwrap();
    let o = t.path().join("o");
    ok(&["gen-data", "--config", p(&cfg), "--set", "n_scenes=6", "--set", "seed=12", "--seed", "13", "--out", p(&o)]);
    let c = RunConfig::default()
        .merge_json(&fs::read_to_string(o.join("config.json")).unwrap())
        .unwrap();
    assert_eq!((c.n_scenes, c.seed, c.noise_sigma), (6, 13, 0.1));
    let corpus = fs::read_to_string(o.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 7);
}

#[test]
fn help_lists_every_flag_and_config_key() {
    let cmd = vlp::cli::command();
    let keys = RunConfig::keys();
    for sub in cmd.get_subcommands() {
        let name = sub.get_name().to_string();
        let help = ok(&[&name, "--help"]);
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{name} --help lacks --{long}");
            }
        }
        let configurable = sub.get_arguments().any(|a| a.get_long() == Some("set"));
        for k in &keys {
            let listed = help.lines().any(|l| l.trim_start().starts_with(&format!("{k} = ")));
            assert_eq!(listed, configurable, "{name} --help and key `{k}`");
        }
    }
    let top = ok(&["--help"]);
    for sub in ["gen-data", "pretrain", "gradcheck", "finetune", "eval", "caption", "inspect-ckpt"] {
        assert!(top.contains(sub), "top-level help lacks {sub}");
    }
}
