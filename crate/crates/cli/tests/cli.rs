use std::path::Path;
use std::process::{Command, Output};

fn xdabsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdabsa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn synth(dir: &Path) {
    let o = xdabsa(&["synth", "--out", dir.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: &[&str] = &[
    "--set", "embed_dim=8", "--set", "boundary_hidden=6", "--set", "unified_hidden=6", "--set", "k=3",
];

fn train(data: &Path, out: &Path, mode: &str) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--mode",
        mode,
        "--epochs",
        "1",
        "--seeds",
        "4",
    ];
    args.extend_from_slice(TINY);
    xdabsa(&args)
}

#[test]
fn missing_input_fails_with_message() {
    let out = tempfile::tempdir().unwrap();
    let o = train(Path::new("/nonexistent/data"), out.path(), "AD_SAL");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/data"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_fails() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = xdabsa(&[
        "train",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--set",
        "warmup=3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_predict_inspect() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    let o = train(data.path(), out.path(), "AD_SAL");
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# resolved config\n"), "{text}");
    assert!(text.contains("# mode = AD_SAL\n"));
    assert!(text.contains("# embed_dim = 8\n"));
    assert!(text.contains("# epochs = 1\n"));
    for f in ["config.txt", "summary.json", "seed-4/epochs.jsonl", "seed-4/best.ckpt"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.path().join("seed-4/epochs.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["seed"], 4);
    for key in ["loss_main", "loss_opinion", "loss_domain", "val_ads_f1"] {
        assert!(lines[1][key].is_number(), "{key}");
    }

    let ckpt = out.path().join("seed-4/best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let test = data.path().join("target_test.conll");
    let test = test.to_str().unwrap();
    let o = xdabsa(&["evaluate", "--checkpoint", ckpt, "--corpus", test]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for task in ["ad", "ads"] {
        let f1 = v[task]["micro_f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }

    let pred = out.path().join("pred.conll");
    let o = xdabsa(&["predict", "--checkpoint", ckpt, "--input", test, "--output", pred.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gold = xdabsa::data::parse_conll(Path::new(test), xdabsa::data::DomainLabel::Target).unwrap();
    let back = xdabsa::data::parse_conll(&pred, xdabsa::data::DomainLabel::Target).unwrap();
    assert_eq!(back.sentences.len(), gold.sentences.len());
    for (a, b) in back.sentences.iter().zip(&gold.sentences) {
        assert_eq!(a.tokens, b.tokens);
    }

    let o = xdabsa(&["inspect", "--checkpoint", ckpt, "--input", test]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dumps: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let dumps = dumps.as_array().unwrap();
    assert_eq!(dumps.len(), gold.sentences.len());
    for (d, s) in dumps.iter().zip(&gold.sentences) {
        let hops = d["hops"].as_array().unwrap();
        assert_eq!(hops.len(), 2);
        for h in hops {
            for key in ["aspect", "opinion"] {
                let row: Vec<f64> = h[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
                assert_eq!(row.len(), s.tokens.len());
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn inspect_rejects_models_without_memory() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth(data.path());
    let o = train(data.path(), out.path(), "BASE_SO");
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.path().join("seed-4/best.ckpt");
    let test = data.path().join("target_test.conll");
    let o = xdabsa(&["inspect", "--checkpoint", ckpt.to_str().unwrap(), "--input", test.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("BASE_SO"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_at_default_sizes() {
    let o = xdabsa(&["grad-check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("PASS"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = xdabsa(&["evaluate", "--checkpoint", bad.to_str().unwrap(), "--corpus", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}
