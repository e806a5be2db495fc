//! End-to-end tests that drive the compiled binary the way an operator
//! would: real config files, real artifacts on disk, exit codes checked.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lotn::eval::parse_prediction_dump;

fn lotn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lotn"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}, got {:?}\nstderr:\n{}",
        out.status.code(),
        stderr_of(out)
    );
}

/// Lays down reviews, embeddings, and a config file under `dir`, returning
/// the config path. The embedding table covers both TOWE fixtures and the
/// synthetic review pools.
fn write_workspace(dir: &Path, extra_config: &str) -> PathBuf {
    let train = common::fixture("towe-train.tsv");
    let test = common::fixture("towe-test.tsv");
    let tokens = common::fixture_vocabulary(&[&train, &test]);

    let reviews_path = dir.join("reviews.tsv");
    fs::write(&reviews_path, common::synthetic_reviews(15, 3)).unwrap();
    let emb_path = dir.join("embeddings.txt");
    fs::write(&emb_path, common::random_embeddings(&tokens, 8, 5)).unwrap();

    let out_dir = dir.join("out");
    let config = format!(
        "# desk-scale run\n\
         towe_train = {}\n\
         towe_test = {}\n\
         reviews_train = {}\n\
         embeddings = {}\n\
         sentiment_checkpoint = {}\n\
         model_checkpoint = {}\n\
         out_dir = {}\n\
         word_dim = 8\n\
         sc_hidden = 5\n\
         hidden = 6\n\
         pos_dim = 4\n\
         l_max = 20\n\
         batch_size = 5\n\
         dropout = 0.0\n\
         lr = 0.01\n\
         pretrain_epochs = 3\n\
         pretrain_patience = 3\n\
         train_epochs = 3\n\
         train_patience = 3\n\
         dev_fraction = 0.25\n\
         shuffles = 200\n\
         {extra_config}",
        train.display(),
        test.display(),
        reviews_path.display(),
        emb_path.display(),
        out_dir.join("sentiment.ckpt").display(),
        out_dir.join("model.ckpt").display(),
        out_dir.display(),
    );
    let config_path = dir.join("run.conf");
    fs::write(&config_path, config).unwrap();
    config_path
}

#[test]
fn full_pipeline_produces_working_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_workspace(dir.path(), "");
    let config = config.to_str().unwrap();
    let out_dir = dir.path().join("out");

    // pretrain: checkpoint plus a manifest echoing the run
    let out = lotn(&["pretrain", "--config", config]);
    assert_exit(&out, 0, "pretrain");
    assert!(out_dir.join("sentiment.ckpt").exists());
    let manifest = fs::read_to_string(out_dir.join("pretrain-manifest.txt")).unwrap();
    assert!(manifest.contains("command = pretrain"));
    assert!(manifest.contains("lr = 0.01"));
    assert!(manifest.contains("sha256="), "inputs should be fingerprinted:\n{manifest}");
    assert!(manifest.contains("epoch=1 train_loss="));
    assert!(manifest.contains("best_dev_accuracy = "));

    // train the full model against the frozen checkpoint
    let out = lotn(&["train", "--config", config, "--variant", "lotn"]);
    assert_exit(&out, 0, "train");
    assert!(out_dir.join("model.ckpt").exists());
    let manifest = fs::read_to_string(out_dir.join("train-manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("best_dev_f1 = "));
    let epoch_line = manifest
        .lines()
        .find(|l| l.contains("epoch=1 j="))
        .unwrap_or_else(|| panic!("no epoch history in manifest:\n{manifest}"));
    let aux = epoch_line
        .split_whitespace()
        .find_map(|f| f.strip_prefix("l_a="))
        .unwrap();
    aux.parse::<f64>().expect("lotn reports a numeric auxiliary loss");

    // evaluate: line-record report plus a parseable prediction dump
    let out = lotn(&["evaluate", "--config", config]);
    assert_exit(&out, 0, "evaluate");
    let report = fs::read_to_string(out_dir.join("eval-report.txt")).unwrap();
    assert!(report.starts_with("n_gold="), "report:\n{report}");
    assert!(report.contains("f1="));
    assert!(report.contains("null="));
    let dump = fs::read_to_string(out_dir.join("predictions.tsv")).unwrap();
    let records = parse_prediction_dump(&dump).unwrap();
    assert_eq!(records.len(), 5, "one record per test target");
    assert!(records.iter().all(|r| r.gold.is_some()));

    // comparing a run against its own dump is a p = 1.0 null result
    let baseline = dir.path().join("baseline.tsv");
    fs::copy(out_dir.join("predictions.tsv"), &baseline).unwrap();
    let out = lotn(&["evaluate", "--config", config, "--compare", baseline.to_str().unwrap()]);
    assert_exit(&out, 0, "evaluate --compare");
    assert!(stderr_of(&out).contains("p = 1.000000"));
    let report = fs::read_to_string(out_dir.join("eval-report.txt")).unwrap();
    assert!(report.contains("p_value=1.000000"), "report:\n{report}");

    // predict on unlabeled input, mixing rows with and without gold
    let predict_in = dir.path().join("predict-input.tsv");
    fs::write(
        &predict_in,
        "the wine list was impressive\tO B I O O\n\
         service was painfully slow\tB O O O\tO O B I\n",
    )
    .unwrap();
    let predict_out = dir.path().join("predicted.tsv");
    let out = lotn(&[
        "predict",
        "--config",
        config,
        "--input",
        predict_in.to_str().unwrap(),
        "--output",
        predict_out.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "predict");
    let records = parse_prediction_dump(&fs::read_to_string(&predict_out).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[0].gold.is_none(), "two-field row has no gold column");
    assert_eq!(records[1].gold.as_deref(), Some(&[lotn::eval::Span::new(2, 3)][..]));

    // an empty input is an empty dump, not an error
    let empty_in = dir.path().join("empty.tsv");
    fs::write(&empty_in, "").unwrap();
    let empty_out = dir.path().join("empty-out.tsv");
    let out = lotn(&[
        "predict",
        "--config",
        config,
        "--input",
        empty_in.to_str().unwrap(),
        "--output",
        empty_out.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "predict on empty input");
    assert!(parse_prediction_dump(&fs::read_to_string(&empty_out).unwrap()).unwrap().is_empty());

    // inspect-transform: per-sentence blocks whose beta column renormalizes
    let out = lotn(&["inspect-transform", "--config", config]);
    assert_exit(&out, 0, "inspect-transform");
    let inspect = fs::read_to_string(out_dir.join("transform-inspect.tsv")).unwrap();
    assert!(inspect.contains("# token\talpha\tc\tbeta\ty_a\tgold"));
    let mut blocks = 0;
    for block in inspect.split("\n\n").filter(|b| b.contains("# sentence")) {
        blocks += 1;
        let mut beta_sum = 0.0;
        let mut positives = 0;
        for line in block.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 6, "inspect line: {line:?}");
            beta_sum += fields[3].parse::<f64>().unwrap();
            if fields[4] == "1" {
                positives += 1;
            }
        }
        assert!((beta_sum - 1.0).abs() < 1e-4, "block beta sums to {beta_sum}");
        assert!(positives >= 1, "every sentence has at least one latent opinion token");
    }
    assert_eq!(blocks, 20, "one block per training sentence");
}

#[test]
fn bad_inputs_use_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out_flag = out_dir.to_str().unwrap().to_string();

    // a required data path missing from the config: usage error
    let out = lotn(&["train", "--out-dir", &out_flag]);
    assert_exit(&out, 2, "train without towe_train");
    assert!(stderr_of(&out).contains("towe_train"));

    // a configured file that does not exist: usage error naming the path
    let ghost = dir.path().join("no-such-reviews.tsv");
    let out = lotn(&[
        "pretrain",
        "--reviews-train",
        ghost.to_str().unwrap(),
        "--embeddings",
        ghost.to_str().unwrap(),
        "--out-dir",
        &out_flag,
    ]);
    assert_exit(&out, 2, "pretrain with missing reviews file");
    assert!(stderr_of(&out).contains("no-such-reviews.tsv"));

    // a file that exists but cannot be parsed: data error
    let broken = dir.path().join("broken.tsv");
    fs::write(&broken, "only one field here\n").unwrap();
    let out = lotn(&["train", "--towe-train", broken.to_str().unwrap(), "--out-dir", &out_flag]);
    assert_exit(&out, 3, "train on malformed TOWE file");
    assert!(stderr_of(&out).contains("broken.tsv:1:"), "stderr:\n{}", stderr_of(&out));

    // unknown configuration keys are rejected, not ignored
    let config = dir.path().join("typo.conf");
    fs::write(&config, "lerning_rate = 0.1\n").unwrap();
    let out = lotn(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2, "config with unknown key");
    assert!(stderr_of(&out).contains("lerning_rate"));

    // out-of-range values are caught after merging flags over the file
    let out = lotn(&["train", "--dropout", "1.5", "--out-dir", &out_flag]);
    assert_exit(&out, 2, "dropout out of range");

    // option typos and missing subcommands are usage errors too
    assert_exit(&lotn(&["train", "--frobnicate"]), 2, "unknown flag");
    assert_exit(&lotn(&[]), 2, "no subcommand");
}

#[test]
fn gradcheck_reports_every_model_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out_flag = out_dir.to_str().unwrap().to_string();

    let out = lotn(&["gradcheck", "--seed", "11", "--out-dir", &out_flag]);
    assert_exit(&out, 0, "gradcheck");
    let report = fs::read_to_string(out_dir.join("gradcheck.txt")).unwrap();
    for model in ["classifier", "base", "+encoder", "+auxiliary", "lotn"] {
        assert!(report.contains(&format!("model={model}\t")), "missing {model}:\n{report}");
    }
    assert_eq!(report.matches("verdict=ok").count(), 5, "report:\n{report}");

    let corrupt_dir = dir.path().join("corrupt");
    let out = lotn(&[
        "gradcheck",
        "--seed",
        "11",
        "--corrupt",
        "--out-dir",
        corrupt_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 4, "gradcheck --corrupt");
    let report = fs::read_to_string(corrupt_dir.join("gradcheck.txt")).unwrap();
    assert!(report.contains("verdict=FAIL"), "report:\n{report}");
}

#[test]
fn lambda_sweep_writes_a_monotone_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_workspace(
        dir.path(),
        "pretrain_epochs = 1\n\
         train_epochs = 1\n\
         hidden = 3\n\
         pos_dim = 3\n\
         sc_hidden = 3\n\
         lambda_min = 0.2\n\
         lambda_max = 0.8\n\
         lambda_step = 0.2\n\
         seeds = 1\n",
    );
    let config = config.to_str().unwrap();
    let out_dir = dir.path().join("out");

    assert_exit(&lotn(&["pretrain", "--config", config]), 0, "pretrain for sweep");
    let out = lotn(&["lambda-sweep", "--config", config]);
    assert_exit(&out, 0, "lambda-sweep");

    let table = fs::read_to_string(out_dir.join("lambda-sweep.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4, "grid 0.2..=0.8 step 0.2:\n{table}");
    let mut last = f64::NEG_INFINITY;
    for row in &rows {
        let fields: Vec<&str> = row.split('\t').collect();
        assert_eq!(fields.len(), 3, "row: {row:?}");
        let lambda: f64 = fields[0].parse().unwrap();
        assert!(lambda > last, "lambda column not increasing:\n{table}");
        last = lambda;
        fields[1].parse::<f64>().expect("dev f1 column");
        fields[2].parse::<f64>().expect("test f1 column");
    }
    let manifest = fs::read_to_string(out_dir.join("sweep-manifest.txt")).unwrap();
    assert!(manifest.contains("best_lambda = "));
    assert!(manifest.contains("best_dev_f1 = "));

    // the sweep refuses variants that have no auxiliary loss to weight
    let out = lotn(&["lambda-sweep", "--config", config, "--variant", "base"]);
    assert_exit(&out, 2, "lambda-sweep on base");
}

#[test]
fn pretraining_is_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_workspace(dir.path(), "pretrain_epochs = 2\n");
    let config = config.to_str().unwrap();

    let first_dir = dir.path().join("first");
    let second_dir = dir.path().join("second");
    for out_dir in [&first_dir, &second_dir] {
        let out =
            lotn(&["pretrain", "--config", config, "--out-dir", out_dir.to_str().unwrap()]);
        assert_exit(&out, 0, "seeded pretrain");
    }
    let first = fs::read(first_dir.join("sentiment.ckpt")).unwrap();
    let second = fs::read(second_dir.join("sentiment.ckpt")).unwrap();
    assert_eq!(first, second, "same seed must produce byte-identical checkpoints");
}
