mod common;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command as Process;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use idaug_cli::stages::{
    self, Context, AUGMENTED, CORPUS, GENERATIONS, LM_STEM, LOSS, RESULTS, TEST, TRAIN, VALIDATION,
};
use idaug_cli::{run, run_with, Cli, Command, PipelineConfig};
use idaug_core::augment::merge;
use idaug_core::dataset::{load_interactions, load_interactions_with_ids};
use idaug_core::eval::PairedResult;
use idaug_core::genbackend::{DeskGenerator, DeskLm, GenerationRequest, Generator, Prompt};
use idaug_core::parsefilter::read_records;
use idaug_core::pipeline::tokenize_corpus;
use idaug_core::promptgen::{read_corpus, Vocabulary};
use serde_json::json;
use tempfile::TempDir;

use common::{completion_server, config, diff, fixture, shifted_ids, snapshot};

fn setup(users: usize, extra: serde_json::Value) -> (TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), users);
    let cfg = config(&data, extra);
    (dir, cfg)
}

fn stage(cfg: &PipelineConfig, out: &Path, cmd: Command) -> String {
    run_with(cfg.clone(), out, cmd).unwrap()
}

fn remote(url: &str) -> serde_json::Value {
    json!({"backend": {"kind": "remote", "client": {"url": url, "timeout_secs": 5.0, "max_retries": 0, "backoff_ms": 1}}})
}

#[test]
fn prepare_partitions_the_filtered_data() {
    let (dir, cfg) = setup(60, json!({}));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    let full = load_interactions(&cfg.dataset.path).unwrap();
    let ctx = Context::new(cfg.clone(), &out).unwrap();
    let bundle = stages::load_bundle(&ctx, "test").unwrap();
    let mut seen = HashSet::new();
    for part in [&bundle.train, &bundle.validation, &bundle.test] {
        for (u, i) in part.pairs() {
            assert!(
                seen.insert((part.external_user(u), part.external_item(i))),
                "pair in two splits"
            );
        }
    }
    let expected: HashSet<(u64, u64)> = full
        .pairs()
        .map(|(u, i)| (full.external_user(u), full.external_item(i)))
        .collect();
    assert_eq!(seen, expected);
    for name in [TRAIN, VALIDATION, TEST] {
        assert!(out.join(name).exists());
    }
}

#[test]
fn k_core_that_empties_the_data_is_a_user_error() {
    let (dir, mut cfg) = setup(20, json!({}));
    cfg.dataset.k_core = 1000;
    let err = run_with(cfg, &dir.path().join("out"), Command::Prepare).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("prepare"), "{err}");
}

#[test]
fn missing_inputs_are_user_errors() {
    let (dir, mut cfg) = setup(20, json!({}));
    let err = run_with(cfg.clone(), &dir.path().join("fresh"), Command::Corpus).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("run `prepare` first"), "{err}");
    cfg.dataset.path = dir.path().join("absent.tsv");
    assert_eq!(
        run_with(cfg, &dir.path().join("out"), Command::Prepare)
            .unwrap_err()
            .exit_code(),
        1
    );
}

#[test]
fn binary_reports_config_errors_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"dataset": {"path": "x.tsv"}, "seeds": [0], "filter": {"min_valid": "two"}}"#,
    )
    .unwrap();
    let output = Process::new(env!("CARGO_BIN_EXE_idaug"))
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
            "prepare",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("filter.min_valid"), "{stderr}");

    let missing = Process::new(env!("CARGO_BIN_EXE_idaug"))
        .args([
            "--config",
            dir.path().join("nope.json").to_str().unwrap(),
            "prepare",
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn seed_flag_replaces_the_seed_list() {
    let (dir, cfg) = setup(20, json!({"seeds": [1, 2, 3]}));
    let config_path = dir.path().join("idaug.json");
    std::fs::write(&config_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("out");
    let cli = Cli {
        config: config_path,
        seed: Some(9),
        out: out.clone(),
        command: Command::Prepare,
    };
    run(&cli).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seeds"], json!([9]));
}

#[test]
fn corpus_counts_follow_the_mode() {
    let (dir, cfg) = setup(40, json!({}));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    let text = stage(&cfg, &out, Command::Corpus);
    let ctx = Context::new(cfg.clone(), &out).unwrap();
    let train = stages::load_bundle(&ctx, "test").unwrap().train;
    let expected: usize = (0..train.num_users())
        .map(|u| train.user(u).len())
        .filter(|&n| n >= 2)
        .sum();
    let lines = std::fs::read_to_string(out.join(CORPUS))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, expected);
    assert!(text.starts_with(&expected.to_string()));

    let random = config(
        &cfg.dataset.path,
        json!({"corpus": {"mode": "random", "length": 2, "samples_per_target": 3}}),
    );
    let out2 = dir.path().join("random");
    stage(&random, &out2, Command::Prepare);
    stage(&random, &out2, Command::Corpus);
    let lines = std::fs::read_to_string(out2.join(CORPUS))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, expected * 3);
}

#[test]
fn prepare_and_corpus_reruns_are_byte_identical() {
    let (dir, cfg) = setup(40, json!({"corpus": {"mode": "random"}}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        stage(&cfg, out, Command::Prepare);
        stage(&cfg, out, Command::Corpus);
    }
    let first = snapshot(&a);
    assert!(diff(&first, &snapshot(&b)).is_empty());
    stage(&cfg, &a, Command::Corpus);
    assert!(diff(&first, &snapshot(&a)).is_empty());
}

#[test]
fn zero_step_finetune_persists_the_initial_model() {
    let (dir, cfg) = setup(20, json!({"backend": {"train": {"steps": 0}}}));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    stage(&cfg, &out, Command::Corpus);
    stage(&cfg, &out, Command::Finetune);
    let saved = DeskLm::load(&out.join(LM_STEM)).unwrap();
    let idaug_cli::config::BackendSection::Desk(desk) = &cfg.backend else {
        unreachable!()
    };
    let model = &desk.model;
    let fresh = DeskLm::new(
        saved.vocab,
        model.clone(),
        cfg.stage_seed(stages::INIT_STREAM),
    )
    .unwrap();
    let stem = dir.path().join("fresh");
    fresh.save(&stem).unwrap();
    assert_eq!(DeskLm::load(&stem).unwrap(), saved);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join(stages::TRAIN_REPORT)).unwrap()).unwrap();
    assert_eq!(report["initial_loss"], report["final_loss"]);
}

#[test]
fn finetune_loss_falls_over_ten_step_means_and_reproduces() {
    let (dir, cfg) = setup(
        12,
        json!({"backend": {"train": {"steps": 50, "batch_size": 1000, "learning_rate": 1e-3}}}),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        stage(&cfg, out, Command::Prepare);
        stage(&cfg, out, Command::Corpus);
        stage(&cfg, out, Command::Finetune);
    }
    assert!(diff(&snapshot(&a), &snapshot(&b)).is_empty());
    let losses: Vec<f64> = std::fs::read_to_string(a.join(LOSS))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 50);
    let means: Vec<f64> = losses
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

#[test]
fn memorized_checkpoint_reproduces_training_targets() {
    let dir = tempfile::tempdir().unwrap();
    let ds = idaug_core::synthetic::toy_dataset(50, 40, 4, 0).unwrap();
    let data = dir.path().join("toy.tsv");
    idaug_core::dataset::write_tsv(&ds, &data).unwrap();
    let cfg = config(
        &data,
        json!({
            "dataset": {"split": {"kind": "random_holdout", "test_fraction": 0.0, "val_fraction": 0.0}},
            "backend": {"model": {"d_model": 32, "ffn_hidden": 64}, "train": {"steps": 400, "batch_size": 200}}
        }),
    );
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    stage(&cfg, &out, Command::Corpus);
    stage(&cfg, &out, Command::Finetune);
    let ctx = Context::new(cfg.clone(), &out).unwrap();
    let train = stages::load_bundle(&ctx, "test").unwrap().train;
    let model = Arc::new(DeskLm::load(&out.join(LM_STEM)).unwrap());
    let context = model.config.context;
    let instances = read_corpus(&out.join(CORPUS), train.ids()).unwrap();
    let seqs = tokenize_corpus(&instances, &Vocabulary::for_dataset(&train), context).unwrap();
    let generator = DeskGenerator::new(Arc::clone(&model), Arc::clone(train.ids()), 1).unwrap();
    let mut hit_users = HashSet::new();
    for (inst, seq) in instances.iter().zip(&seqs) {
        let sep = seq.iter().position(|&t| t == Vocabulary::SEP).unwrap();
        let req = GenerationRequest {
            max_new_tokens: 1,
            temperature: 1e-6,
            ..GenerationRequest::new(Prompt::Tokens(seq[..=sep].to_vec()))
        };
        let text = generator.generate(&req).unwrap().raw_text;
        if text == train.external_item(inst.target_items[0]).to_string() {
            hit_users.insert(inst.user);
        }
    }
    assert!(
        hit_users.len() * 10 >= 9 * train.num_users(),
        "{} of {}",
        hit_users.len(),
        train.num_users()
    );
}

fn fail_even_users(prompt: &str) -> Option<String> {
    let ids = idaug_core::parsefilter::extract_item_ids(prompt);
    if ids[0] % 2 == 0 {
        None
    } else {
        shifted_ids(prompt)
    }
}

fn fail_all(_: &str) -> Option<String> {
    None
}

#[test]
fn generate_tolerates_failures_until_all_requests_fail() {
    let (url, _) = completion_server(fail_even_users);
    let (dir, cfg) = setup(20, remote(&url));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    stage(&cfg, &out, Command::Generate);
    let records = read_records(&out.join(GENERATIONS)).unwrap();
    assert_eq!(records.len(), 20);
    let users: Vec<u64> = records.iter().map(|r| r.user_id).collect();
    assert!(users.windows(2).all(|w| w[0] < w[1]));
    for r in &records {
        assert_eq!(r.error.is_some(), r.user_id % 2 == 0, "{r:?}");
    }
    stage(&cfg, &out, Command::Augment);

    let (url, _) = completion_server(fail_all);
    let cfg = config(&cfg.dataset.path, remote(&url));
    let out = dir.path().join("failing");
    stage(&cfg, &out, Command::Prepare);
    let err = run_with(cfg, &out, Command::Generate).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn generate_with_no_users_writes_an_empty_file() {
    let (url, count) = completion_server(shifted_ids);
    let (dir, cfg) = setup(20, remote(&url));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    std::fs::write(out.join(TRAIN), "").unwrap();
    assert_eq!(
        stage(&cfg, &out, Command::Generate),
        "0 generation records\n"
    );
    assert_eq!(std::fs::read(out.join(GENERATIONS)).unwrap(), b"");
    assert_eq!(count.load(Ordering::SeqCst), 0);
}

#[test]
fn augment_sweep_and_round_trip() {
    let (url, _) = completion_server(shifted_ids);
    let (dir, cfg) = setup(40, remote(&url));
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    stage(&cfg, &out, Command::Generate);
    let summary = stages::cmd_augment(&mut Context::new(cfg.clone(), &out).unwrap()).unwrap();
    assert_eq!(summary.variants.len(), 1 + cfg.augment.ratios.len());
    for (v, &r) in summary.variants[1..].iter().zip(&cfg.augment.ratios) {
        assert_eq!(v.cap_ratio, Some(r));
        assert!(out.join(&v.file).exists());
        assert!(v.composition.augmentation_ratio <= r + 1e-12);
    }
    assert!(summary.filter.accepted > 0);

    let ctx = Context::new(cfg.clone(), &out).unwrap();
    let bundle = stages::load_bundle(&ctx, "test").unwrap();
    let generated = stages::generated_from_files(&ctx).unwrap();
    let merged = merge(&bundle.train, &generated).unwrap().merged;
    let loaded =
        load_interactions_with_ids(&out.join(AUGMENTED), Arc::clone(bundle.train.ids())).unwrap();
    assert_eq!(loaded.pair_set(), merged.pair_set());
    assert_eq!(loaded, stages::load_augmented(&ctx).unwrap());
}

#[test]
fn train_eval_reproduces_and_reports_groups() {
    let (url, _) = completion_server(shifted_ids);
    let (dir, cfg) = setup(40, {
        let mut extra = remote(&url);
        extra["eval"] = json!({"ks": [10], "groups": 3});
        extra["augment"] = json!({"ratios": [0.05]});
        extra
    });
    let out = dir.path().join("out");
    stage(&cfg, &out, Command::Prepare);
    stage(&cfg, &out, Command::Generate);
    stage(&cfg, &out, Command::Augment);
    let report = stage(&cfg, &out, Command::TrainEval);
    let first = std::fs::read(out.join(RESULTS)).unwrap();
    let results: Vec<PairedResult> = serde_json::from_slice(&first).unwrap();
    assert_eq!(results.len(), 2);
    for p in &results {
        assert_eq!(p.base.groups.len(), 3);
        assert!(p.improvement.contains_key("recall@10"));
        assert!(p.augmented.is_some());
    }
    assert!(report.contains("group 0"), "{report}");
    assert!(report.contains("Improv."), "{report}");
    stage(&cfg, &out, Command::TrainEval);
    assert_eq!(std::fs::read(out.join(RESULTS)).unwrap(), first);
    assert_eq!(stage(&cfg, &out, Command::Report), report);
}
