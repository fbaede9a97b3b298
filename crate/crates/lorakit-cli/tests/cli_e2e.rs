//! End-to-end exercise of the installed binary: pretrain, adapt, eval,
//! merge, switch, budget, and analysis through real files and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lorakit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorakit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Tiny budgets keep the e2e run to a few seconds; quality gates live
    // in the acceptance suite, not here.
    write(
        &root.join("pretrain.cfg"),
        "task = pretrain-copy\nseed = 42\nepochs = 3\nn_pairs = 48\n",
    );
    write(
        &root.join("adapt.cfg"),
        "task = reverse\nstrategy = lora:r=4:qv\nseed = 7\nepochs = 4\nn_pairs = 32\n",
    );
    write(
        &root.join("adapt_kv.cfg"),
        "task = kv-lookup\nstrategy = lora:r=4:qv\nseed = 8\nepochs = 4\nn_pairs = 32\n",
    );

    let out = lorakit(
        &["pretrain", "--config", "pretrain.cfg", "--out", "pre"],
        root,
    );
    assert_ok(&out, "pretrain");
    assert!(root.join("pre/model.ckpt").is_file());
    let metrics = fs::read_to_string(root.join("pre/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,trainable_params,wall_ms"));
    assert_eq!(metrics.lines().count(), 4); // header + 3 epochs

    // Adapt twice with the same seed: byte-identical deltas.
    for run in ["run1", "run2"] {
        let out = lorakit(
            &["adapt", "--config", "adapt.cfg", "--base", "pre/model.ckpt", "--out", run],
            root,
        );
        assert_ok(&out, "adapt");
    }
    let d1 = fs::read(root.join("run1/delta.ckpt")).unwrap();
    let d2 = fs::read(root.join("run2/delta.ckpt")).unwrap();
    assert_eq!(d1, d2, "same seed must give byte-identical deltas");

    // A different seed gives a different file.
    let out = lorakit(
        &[
            "adapt", "--config", "adapt.cfg", "--base", "pre/model.ckpt", "--out", "run3",
            "--seed", "99",
        ],
        root,
    );
    assert_ok(&out, "adapt with seed override");
    assert_ne!(d1, fs::read(root.join("run3/delta.ckpt")).unwrap());

    // Second task for switching.
    let out = lorakit(
        &["adapt", "--config", "adapt_kv.cfg", "--base", "pre/model.ckpt", "--out", "kv"],
        root,
    );
    assert_ok(&out, "adapt kv");

    // Merge, then switch from task 1 to task 2.
    let out = lorakit(
        &["merge", "--base", "pre/model.ckpt", "--delta", "run1/delta.ckpt", "--out", "m1"],
        root,
    );
    assert_ok(&out, "merge");
    let out = lorakit(
        &[
            "switch", "--base", "m1/merged.ckpt", "--old", "run1/delta.ckpt", "--new",
            "kv/delta.ckpt", "--out", "sw",
        ],
        root,
    );
    assert_ok(&out, "switch");

    // Switched model evaluates like a fresh merge of the kv delta.
    let out = lorakit(
        &["merge", "--base", "pre/model.ckpt", "--delta", "kv/delta.ckpt", "--out", "m2"],
        root,
    );
    assert_ok(&out, "fresh merge");
    let eval = |model: &str| -> f64 {
        let out = lorakit(
            &["eval", "--model", model, "--task", "kv-lookup", "--seed", "8", "--n-pairs", "32"],
            root,
        );
        assert_ok(&out, "eval");
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let loss = text
            .split("loss ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .expect("loss printed")
            .parse::<f64>()
            .unwrap();
        loss
    };
    let switched = eval("sw/switched.ckpt");
    let fresh = eval("m2/merged.ckpt");
    assert!((switched - fresh).abs() <= 1e-6, "switch {switched} vs fresh {fresh}");

    // Delta eval path: base + delta on the fly.
    let out = lorakit(
        &[
            "eval", "--model", "pre/model.ckpt", "--delta", "run1/delta.ckpt", "--task",
            "reverse", "--seed", "7", "--n-pairs", "32",
        ],
        root,
    );
    assert_ok(&out, "eval with delta");

    // Subspace self-comparison produces grids with a unit diagonal.
    let out = lorakit(
        &[
            "analyze", "--mode", "subspace", "--left", "run1/delta.ckpt", "--right",
            "run1/delta.ckpt", "--out", "sub",
        ],
        root,
    );
    assert_ok(&out, "analyze subspace");
    let grid = fs::read_to_string(root.join("sub/subspace_layer0_w_q.csv")).unwrap();
    let second_line = grid.lines().nth(1).unwrap();
    let first_cell: f64 =
        second_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!((first_cell - 1.0).abs() <= 1e-10);
    assert!(root.join("sub/subspace_layer0_w_q.pgm").is_file());

    // Projection study emits the table.
    let out = lorakit(
        &[
            "analyze", "--mode", "projection", "--base", "pre/model.ckpt", "--delta",
            "run1/delta.ckpt", "--out", "proj",
        ],
        root,
    );
    assert_ok(&out, "analyze projection");
    let proj = fs::read_to_string(root.join("proj/projection.csv")).unwrap();
    assert!(proj.starts_with(
        "site,rank,norm_w,norm_dw,proj_update_basis,proj_host_basis,proj_random_basis,amplification"
    ));
    assert_eq!(proj.lines().count(), 5); // header + 4 sites
}

#[test]
fn budget_subcommand_matches_published_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = lorakit(
        &["budget", "gpt3-175b", "lora:r=8:qv", "lora:r=8:q", "adapterH:r=1"],
        dir.path(),
    );
    assert_ok(&out, "budget");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("37748736"), "missing 37,748,736 in:\n{text}");
    assert!(text.contains("18874368"));
    assert!(text.contains("7078080"));

    let out = lorakit(&["budget", "roberta-base", "lora:r=8:qv"], dir.path());
    assert_ok(&out, "budget roberta");
    assert!(String::from_utf8_lossy(&out.stdout).contains("294912"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Missing --config.
    let out = lorakit(&["pretrain"], root);
    assert_eq!(out.status.code(), Some(2));
    // Unknown key in the config file.
    write(&root.join("bad.cfg"), "task = reverse\nbogus = 1\n");
    let out = lorakit(&["pretrain", "--config", "bad.cfg"], root);
    assert_eq!(out.status.code(), Some(2));
    // Unknown preset.
    let out = lorakit(&["budget", "gpt5", "lora:r=1:q"], root);
    assert_eq!(out.status.code(), Some(2));
    // Adapting without a pretrained checkpoint.
    write(&root.join("a.cfg"), "task = reverse\nstrategy = lora:r=2:qv\n");
    let out = lorakit(&["adapt", "--config", "a.cfg", "--base", "missing.ckpt"], root);
    assert_eq!(out.status.code(), Some(3));
}
