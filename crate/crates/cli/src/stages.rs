//! One function per subcommand. Each reads its inputs from the output
//! directory (plus the dataset for `prepare`), writes its artifacts there and
//! records them in the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use idaug_core::augment::{
    cap_ratio, compute_composition, merge, CompositionStats, GeneratedInteractions,
};
use idaug_core::dataset::{
    compute_stats, group_users_by_activity, k_core_filter, load_interactions,
    load_interactions_with_ids, split_leave_last_two, split_random_holdout, write_tsv,
    DatasetStats, IdMap, IdMaps, InteractionDataset, SplitBundle, SplitKind, UserIdx,
};
use idaug_core::eval::{
    evaluate_users, format_table, multi_seed_average, AugmentationInfo, EvalResult, GroupMetrics,
    PairedResult, RankingMetrics,
};
use idaug_core::genbackend::{
    train_desk_lm, CachedGenerator, DeskGenerator, DeskLm, RemoteGenerator, ResponseCache,
    TrainReport,
};
use idaug_core::parsefilter::{read_records, write_records, FilterReport};
use idaug_core::pipeline::{
    generate_for_users, records_to_interactions, tokenize_corpus, PromptStyle,
};
use idaug_core::promptgen::{build_corpus, read_corpus, write_corpus, Vocabulary};
use idaug_core::recommenders::{
    train_bpr, train_lightgcn, train_sasrec, train_simgcl, user_sequences, BprConfig, SasRecConfig,
    SasRecScorer, Scorer, SimGclConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{BackendSection, DeskBackend, PipelineConfig, RemoteBackend, SplitSection};
use crate::error::{CliError, ResultExt};
use crate::manifest::{RunManifest, StageRecord};

pub const IDS: &str = "ids.json";
pub const TRAIN: &str = "train.tsv";
pub const VALIDATION: &str = "validation.tsv";
pub const TEST: &str = "test.tsv";
pub const STATS: &str = "stats.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const LM_STEM: &str = "desk_lm";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const LOSS: &str = "loss.tsv";
pub const GENERATIONS: &str = "generations.jsonl";
pub const FILTERED: &str = "generations_filtered.jsonl";
pub const GENERATED: &str = "generated.tsv";
pub const AUGMENTED: &str = "augmented.tsv";
pub const COMPOSITION: &str = "composition.json";
pub const AUGMENT_SUMMARY: &str = "augment_summary.json";
pub const RESULTS: &str = "results.json";
pub const TABLE: &str = "results.txt";

/// Stream numbers for [`PipelineConfig::stage_seed`].
pub const SPLIT_STREAM: u64 = 1;
pub const CORPUS_STREAM: u64 = 2;
pub const INIT_STREAM: u64 = 3;
pub const FINETUNE_STREAM: u64 = 4;
pub const GENERATE_STREAM: u64 = 5;
pub const AUGMENT_STREAM: u64 = 6;

/// Config, output directory and manifest shared by the stages.
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

impl Context {
    pub fn new(config: PipelineConfig, out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::user("output", format!("{}: {e}", out.display())))?;
        let value = serde_json::to_value(&config).internal_err("config")?;
        let manifest = RunManifest::open(out, &config.hash(), value)?;
        Ok(Self {
            config,
            out: out.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(
        &mut self,
        stage: &str,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        started: Instant,
    ) -> Result<(), CliError> {
        let record = StageRecord {
            inputs,
            outputs,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        self.manifest.record(&self.out, stage, record)
    }

    fn require(
        &self,
        stage: &'static str,
        name: &str,
        producer: &str,
    ) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::user(
                stage,
                format!("{} not found; run `{producer}` first", p.display()),
            ))
        }
    }
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).internal_err(stage)?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::internal(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(
    stage: &'static str,
    path: &Path,
) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::user(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::user(stage, format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct IdsFile {
    users: Vec<u64>,
    items: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub dataset: String,
    pub split: SplitKind,
    pub raw: DatasetStats,
    pub filtered: DatasetStats,
    pub train: DatasetStats,
    pub validation: DatasetStats,
    pub test: DatasetStats,
}

fn load_ids(ctx: &Context, stage: &'static str) -> Result<Arc<IdMaps>, CliError> {
    let f: IdsFile = read_json(stage, &ctx.require(stage, IDS, "prepare")?)?;
    Ok(Arc::new(IdMaps {
        users: IdMap::from_externals(f.users).user_err(stage)?,
        items: IdMap::from_externals(f.items).user_err(stage)?,
    }))
}

fn load_split_file(
    stage: &'static str,
    path: &Path,
    ids: &Arc<IdMaps>,
) -> Result<InteractionDataset, CliError> {
    let empty = fs::metadata(path)
        .map_err(|e| CliError::user(stage, format!("{}: {e}", path.display())))?
        .len()
        == 0;
    if empty {
        return InteractionDataset::from_records_with_ids(Arc::clone(ids), []).user_err(stage);
    }
    load_interactions_with_ids(path, Arc::clone(ids)).user_err(stage)
}

/// The persisted train/validation/test split.
pub fn load_bundle(ctx: &Context, stage: &'static str) -> Result<SplitBundle, CliError> {
    let ids = load_ids(ctx, stage)?;
    let stats: PrepareStats = read_json(stage, &ctx.require(stage, STATS, "prepare")?)?;
    let train = load_split_file(stage, &ctx.require(stage, TRAIN, "prepare")?, &ids)?;
    let val = load_split_file(stage, &ctx.require(stage, VALIDATION, "prepare")?, &ids)?;
    let test = load_split_file(stage, &ctx.require(stage, TEST, "prepare")?, &ids)?;
    SplitBundle::new(train, val, test, stats.split).user_err(stage)
}

/// Load, k-core filter, split; writes the split TSVs, the id maps and stats.
pub fn cmd_prepare(ctx: &mut Context) -> Result<SplitBundle, CliError> {
    const STAGE: &str = "prepare";
    let started = Instant::now();
    let cfg = &ctx.config;
    let src = cfg.dataset.path.clone();
    if !src.exists() {
        return Err(CliError::user(
            STAGE,
            format!("dataset {} does not exist", src.display()),
        ));
    }
    let raw = load_interactions(&src).user_err(STAGE)?;
    let filtered = k_core_filter(&raw, cfg.dataset.k_core).user_err(STAGE)?;
    let bundle = match cfg.dataset.split {
        SplitSection::RandomHoldout {
            test_fraction,
            val_fraction,
        } => split_random_holdout(
            &filtered,
            test_fraction,
            val_fraction,
            cfg.stage_seed(SPLIT_STREAM),
        ),
        SplitSection::LeaveLastTwo => split_leave_last_two(&filtered),
    }
    .user_err(STAGE)?;
    let ids = bundle.train.ids();
    let stats = PrepareStats {
        dataset: cfg.dataset.name.clone(),
        split: bundle.kind,
        raw: compute_stats(&raw),
        filtered: compute_stats(&filtered),
        train: compute_stats(&bundle.train),
        validation: compute_stats(&bundle.validation),
        test: compute_stats(&bundle.test),
    };
    write_json(
        STAGE,
        &ctx.path(IDS),
        &IdsFile {
            users: ids.users.externals().to_vec(),
            items: ids.items.externals().to_vec(),
        },
    )?;
    for (name, ds) in [
        (TRAIN, &bundle.train),
        (VALIDATION, &bundle.validation),
        (TEST, &bundle.test),
    ] {
        write_tsv(ds, &ctx.path(name)).internal_err(STAGE)?;
    }
    write_json(STAGE, &ctx.path(STATS), &stats)?;
    log::info!(
        "prepare: {} users, {} items, {} train interactions",
        stats.filtered.num_users,
        stats.filtered.num_items,
        stats.train.num_interactions
    );
    let outputs = [IDS, TRAIN, VALIDATION, TEST, STATS]
        .map(PathBuf::from)
        .to_vec();
    ctx.finish(STAGE, vec![src], outputs, started)?;
    Ok(bundle)
}

/// Instruction corpus from the train split.
pub fn cmd_corpus(ctx: &mut Context) -> Result<usize, CliError> {
    const STAGE: &str = "corpus";
    let started = Instant::now();
    let bundle = load_bundle(ctx, STAGE)?;
    let mut corpus_cfg = ctx.config.corpus.clone();
    corpus_cfg.seed = ctx.config.stage_seed(CORPUS_STREAM);
    let corpus = build_corpus(&bundle.train, &ctx.config.template, &corpus_cfg).user_err(STAGE)?;
    let n = write_corpus(&corpus.instances, bundle.train.ids(), &ctx.path(CORPUS))
        .internal_err(STAGE)?;
    log::info!(
        "corpus: {n} instances, {} users skipped",
        corpus.skipped_users
    );
    ctx.finish(
        STAGE,
        vec![TRAIN.into(), IDS.into()],
        vec![CORPUS.into()],
        started,
    )?;
    Ok(n)
}

fn corpus_tokens(
    ctx: &Context,
    stage: &'static str,
    train: &InteractionDataset,
    context: usize,
) -> Result<Vec<Vec<usize>>, CliError> {
    let instances =
        read_corpus(&ctx.require(stage, CORPUS, "corpus")?, train.ids()).user_err(stage)?;
    tokenize_corpus(&instances, &Vocabulary::for_dataset(train), context).user_err(stage)
}

/// Trains the desk LM on the tokenized corpus.
pub fn cmd_finetune(ctx: &mut Context) -> Result<TrainReport, CliError> {
    const STAGE: &str = "finetune";
    let started = Instant::now();
    let BackendSection::Desk(DeskBackend {
        model: model_cfg,
        train: train_cfg,
        base_checkpoint,
        ..
    }) = ctx.config.backend.clone()
    else {
        return Err(CliError::user(STAGE, "finetune needs the desk backend"));
    };
    let bundle = load_bundle(ctx, STAGE)?;
    let vocab = Vocabulary::for_dataset(&bundle.train);
    let mut inputs: Vec<PathBuf> = vec![CORPUS.into(), IDS.into()];
    let model = match &base_checkpoint {
        Some(stem) => {
            let mut m = DeskLm::load(stem).user_err(STAGE)?;
            if m.vocab != vocab {
                return Err(CliError::user(
                    STAGE,
                    "base checkpoint vocabulary does not match the dataset",
                ));
            }
            if let Some(spec) = model_cfg.adapter {
                m.attach_adapters(spec).user_err(STAGE)?;
            }
            inputs.push(stem.clone());
            m
        }
        None => DeskLm::new(vocab, model_cfg.clone(), ctx.config.stage_seed(INIT_STREAM))
            .user_err(STAGE)?,
    };
    let tokens = corpus_tokens(ctx, STAGE, &bundle.train, model.config.context)?;
    let mut tc = train_cfg.clone();
    tc.seed = ctx.config.stage_seed(FINETUNE_STREAM);
    let (model, report) = train_desk_lm(model, &tokens, &tc).map_err(|e| match e {
        idaug_core::genbackend::GenError::NonFiniteLoss { .. } => CliError::internal(STAGE, e),
        other => CliError::user(STAGE, other),
    })?;
    model.save(&ctx.path(LM_STEM)).internal_err(STAGE)?;
    write_json(STAGE, &ctx.path(TRAIN_REPORT), &report)?;
    let mut loss = String::from("step\tloss\n");
    for (s, l) in report.loss_history.iter().enumerate() {
        loss.push_str(&format!("{s}\t{l}\n"));
    }
    fs::write(ctx.path(LOSS), loss).internal_err(STAGE)?;
    log::info!(
        "finetune: loss {:.4} -> {:.4}",
        report.initial_loss,
        report.final_loss
    );
    let outputs = vec![
        idaug_core::checkpoint::manifest_path(Path::new(LM_STEM)),
        idaug_core::checkpoint::blob_path(Path::new(LM_STEM)),
        TRAIN_REPORT.into(),
        LOSS.into(),
    ];
    ctx.finish(STAGE, inputs, outputs, started)?;
    Ok(report)
}

/// Runs inference prompts through the configured backend. Fails only when
/// every request failed.
pub fn cmd_generate(ctx: &mut Context) -> Result<usize, CliError> {
    const STAGE: &str = "generate";
    let started = Instant::now();
    let bundle = load_bundle(ctx, STAGE)?;
    let mut settings = ctx.config.generation.clone();
    settings.seed = ctx.config.stage_seed(GENERATE_STREAM);
    let template = ctx.config.template.clone();
    let mut inputs: Vec<PathBuf> = vec![TRAIN.into(), IDS.into()];
    let records = match ctx.config.backend.clone() {
        BackendSection::Desk(DeskBackend {
            min_items_before_eos,
            ..
        }) => {
            let stem = ctx.path(LM_STEM);
            if !idaug_core::checkpoint::manifest_path(&stem).exists() {
                return Err(CliError::user(
                    STAGE,
                    "no desk LM checkpoint; run `finetune` first",
                ));
            }
            let model = DeskLm::load(&stem).user_err(STAGE)?;
            // keep [SEP] within the positions seen after a context in training
            let longest = corpus_tokens(ctx, STAGE, &bundle.train, model.config.context)?
                .iter()
                .map(Vec::len)
                .max()
                .unwrap_or(model.config.context);
            let context = longest.saturating_sub(2).clamp(4, model.config.context);
            let generator = DeskGenerator::new(
                Arc::new(model),
                Arc::clone(bundle.train.ids()),
                min_items_before_eos,
            )
            .user_err(STAGE)?;
            inputs.push(idaug_core::checkpoint::manifest_path(Path::new(LM_STEM)));
            inputs.push(CORPUS.into());
            generate_for_users(
                &generator,
                &bundle.train,
                &template,
                PromptStyle::Tokens { context },
                &settings,
            )
        }
        BackendSection::Remote(RemoteBackend {
            client,
            cache_dir,
            replay_only,
        }) => {
            let remote = RemoteGenerator::new(client).user_err(STAGE)?;
            let dir = cache_dir.unwrap_or_else(|| ctx.path("cache"));
            let cache = ResponseCache::open(&dir).internal_err(STAGE)?;
            inputs.push(dir);
            let generator = CachedGenerator::new(remote, cache, replay_only);
            generate_for_users(
                &generator,
                &bundle.train,
                &template,
                PromptStyle::Text,
                &settings,
            )
        }
    }
    .user_err(STAGE)?;
    write_records(&records, &ctx.path(GENERATIONS)).internal_err(STAGE)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    ctx.finish(STAGE, inputs, vec![GENERATIONS.into()], started)?;
    if failed > 0 {
        log::warn!("generate: {failed} of {} requests failed", records.len());
    }
    if !records.is_empty() && failed == records.len() {
        let first = records[0].error.clone().unwrap_or_default();
        return Err(CliError::internal(
            STAGE,
            format!("all {failed} requests failed; first error: {first}"),
        ));
    }
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentVariant {
    /// `None` for the uncapped set.
    pub cap_ratio: Option<f64>,
    pub file: PathBuf,
    pub composition: CompositionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub backend: String,
    pub filter: FilterReport,
    pub variants: Vec<AugmentVariant>,
}

fn ratio_file(r: f64) -> String {
    format!("augmented_r{r}.tsv")
}

/// Filters generations, writes `R_LLM`, `R_aug` and one capped `R_aug` per
/// configured ratio.
pub fn cmd_augment(ctx: &mut Context) -> Result<AugmentSummary, CliError> {
    const STAGE: &str = "augment";
    let started = Instant::now();
    let bundle = load_bundle(ctx, STAGE)?;
    let mut records =
        read_records(&ctx.require(STAGE, GENERATIONS, "generate")?).user_err(STAGE)?;
    let backend = records
        .first()
        .map_or_else(|| "none".to_string(), |r| r.backend.clone());
    let (generated, report) = records_to_interactions(
        &mut records,
        &bundle.train,
        ctx.config.filter.min_valid,
        &backend,
    );
    write_records(&records, &ctx.path(FILTERED)).internal_err(STAGE)?;
    let aug = merge(&bundle.train, &generated).user_err(STAGE)?;
    generated
        .write_tsv(Some(&aug.merged), &ctx.path(GENERATED))
        .internal_err(STAGE)?;
    write_tsv(&aug.merged, &ctx.path(AUGMENTED)).internal_err(STAGE)?;
    let composition = compute_composition(&aug, &bundle.test, None);
    write_json(STAGE, &ctx.path(COMPOSITION), &composition)?;
    let mut variants = vec![AugmentVariant {
        cap_ratio: None,
        file: AUGMENTED.into(),
        composition,
    }];
    let mut outputs: Vec<PathBuf> = vec![
        FILTERED.into(),
        GENERATED.into(),
        AUGMENTED.into(),
        COMPOSITION.into(),
    ];
    for (k, &r) in ctx.config.augment.ratios.iter().enumerate() {
        let seed = ctx.config.stage_seed(AUGMENT_STREAM).wrapping_add(k as u64);
        let capped = cap_ratio(&generated, &bundle.train, r, seed).user_err(STAGE)?;
        let a = merge(&bundle.train, &capped).user_err(STAGE)?;
        let file = ratio_file(r);
        write_tsv(&a.merged, &ctx.path(&file)).internal_err(STAGE)?;
        outputs.push(file.clone().into());
        variants.push(AugmentVariant {
            cap_ratio: Some(r),
            file: file.into(),
            composition: compute_composition(&a, &bundle.test, None),
        });
    }
    let summary = AugmentSummary {
        backend,
        filter: report,
        variants,
    };
    write_json(STAGE, &ctx.path(AUGMENT_SUMMARY), &summary)?;
    outputs.push(AUGMENT_SUMMARY.into());
    log::info!(
        "augment: {} of {} generations accepted, {} pairs",
        report.accepted,
        report.total,
        generated.len()
    );
    ctx.finish(
        STAGE,
        vec![GENERATIONS.into(), TRAIN.into(), TEST.into()],
        outputs,
        started,
    )?;
    Ok(summary)
}

/// A recommender family with its config.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Bpr(BprConfig),
    LightGcn(SimGclConfig),
    SimGcl(SimGclConfig),
    SasRec(SasRecConfig),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Bpr(_) => "BPR",
            Self::LightGcn(_) => "LightGCN",
            Self::SimGcl(_) => "SimGCL",
            Self::SasRec(_) => "SASRec",
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Vec<Self> {
        let m = &cfg.models;
        let mut out = Vec::new();
        out.extend(m.bpr.clone().map(Self::Bpr));
        out.extend(m.lightgcn.clone().map(Self::LightGcn));
        out.extend(m.simgcl.clone().map(Self::SimGcl));
        out.extend(m.sasrec.clone().map(Self::SasRec));
        out
    }

    /// Trains on `data` with `seed` and evaluates against `bundle`, masking
    /// the original train split. Per-group metrics follow when `groups` is
    /// given.
    pub fn train_eval(
        &self,
        data: &InteractionDataset,
        bundle: &SplitBundle,
        ks: &[usize],
        groups: Option<&[Vec<UserIdx>]>,
        seed: u64,
    ) -> Result<(RankingMetrics, Vec<Option<RankingMetrics>>), String> {
        let eval = |s: &(dyn Scorer + Sync)| -> Result<_, String> {
            let all = evaluate_users(s, &bundle.train, &bundle.test, ks, None)
                .map_err(|e| e.to_string())?
                .ok_or("no user has test interactions")?;
            let per_group = groups
                .unwrap_or(&[])
                .iter()
                .map(|g| {
                    evaluate_users(s, &bundle.train, &bundle.test, ks, Some(g))
                        .map_err(|e| e.to_string())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((all, per_group))
        };
        let err = |e: idaug_core::recommenders::RecError| e.to_string();
        match self {
            Self::Bpr(c) => eval(&train_bpr(data, &BprConfig { seed, ..c.clone() }).map_err(err)?),
            Self::LightGcn(c) => {
                eval(&train_lightgcn(data, &SimGclConfig { seed, ..c.clone() }).map_err(err)?)
            }
            Self::SimGcl(c) => {
                eval(&train_simgcl(data, &SimGclConfig { seed, ..c.clone() }).map_err(err)?)
            }
            Self::SasRec(c) => {
                let seqs = user_sequences(data);
                let model =
                    train_sasrec(&seqs, data.num_items(), &SasRecConfig { seed, ..c.clone() })
                        .map_err(err)?;
                eval(&SasRecScorer {
                    model: &model,
                    sequences: seqs,
                })
            }
        }
    }
}

fn summarize(
    model: &str,
    dataset: &str,
    augmentation: Option<AugmentationInfo>,
    seeds: &[u64],
    runs: Vec<(RankingMetrics, Vec<Option<RankingMetrics>>)>,
    groups: Option<&[Vec<UserIdx>]>,
    train: &InteractionDataset,
) -> Result<EvalResult, String> {
    let overall: Vec<RankingMetrics> = runs.iter().map(|r| r.0.clone()).collect();
    let summary = multi_seed_average(&overall).map_err(|e| e.to_string())?;
    let degrees = train.user_degrees();
    let mut group_rows = Vec::new();
    for (g, users) in groups.unwrap_or(&[]).iter().enumerate() {
        let per_seed: Vec<RankingMetrics> = runs.iter().filter_map(|r| r.1[g].clone()).collect();
        let metrics = if per_seed.is_empty() {
            None
        } else {
            Some(
                multi_seed_average(&per_seed)
                    .map_err(|e| e.to_string())?
                    .mean,
            )
        };
        group_rows.push(GroupMetrics {
            group: g,
            min_interactions: users.iter().map(|&u| degrees[u]).min().unwrap_or(0),
            max_interactions: users.iter().map(|&u| degrees[u]).max().unwrap_or(0),
            users: users.len(),
            metrics,
        });
    }
    Ok(EvalResult::from_summary(
        model,
        dataset,
        augmentation,
        seeds,
        &summary,
        group_rows,
    ))
}

/// Trains every configured model on the base split and on each augmented
/// variant with the same seeds, then writes paired results and a table.
pub fn cmd_train_eval(ctx: &mut Context) -> Result<Vec<PairedResult>, CliError> {
    const STAGE: &str = "train-eval";
    let started = Instant::now();
    let bundle = load_bundle(ctx, STAGE)?;
    let cfg = ctx.config.clone();
    let ks = cfg.eval.ks.clone();
    let groups = match cfg.eval.groups {
        Some(n) => Some(group_users_by_activity(&bundle.train, n).user_err(STAGE)?),
        None => None,
    };
    let mut inputs: Vec<PathBuf> = vec![TRAIN.into(), TEST.into(), IDS.into()];
    let summary_path = ctx.path(AUGMENT_SUMMARY);
    let mut variants: Vec<(AugmentVariant, InteractionDataset, String)> = Vec::new();
    if summary_path.exists() {
        let summary: AugmentSummary = read_json(STAGE, &summary_path)?;
        inputs.push(AUGMENT_SUMMARY.into());
        for v in summary.variants {
            let data = load_split_file(
                STAGE,
                &ctx.path(&v.file.to_string_lossy()),
                bundle.train.ids(),
            )?;
            inputs.push(v.file.clone());
            variants.push((v, data, summary.backend.clone()));
        }
    }
    let models = ModelSpec::from_config(&cfg);
    if models.is_empty() {
        return Err(CliError::user(STAGE, "no models configured"));
    }
    let mut results = Vec::new();
    for spec in &models {
        let run_all = |data: &InteractionDataset| -> Result<Vec<_>, CliError> {
            cfg.seeds
                .iter()
                .map(|&s| {
                    spec.train_eval(data, &bundle, &ks, groups.as_deref(), s)
                        .internal_err(STAGE)
                })
                .collect()
        };
        let base_runs = run_all(&bundle.train)?;
        let base = summarize(
            spec.name(),
            &cfg.dataset.name,
            None,
            &cfg.seeds,
            base_runs,
            groups.as_deref(),
            &bundle.train,
        )
        .internal_err(STAGE)?;
        log::info!("train-eval: {} base done", spec.name());
        if variants.is_empty() {
            results.push(PairedResult::new(base, None));
            continue;
        }
        for (v, data, backend) in &variants {
            let runs = run_all(data)?;
            let info = AugmentationInfo {
                ratio: v.composition.augmentation_ratio,
                backend: backend.clone(),
            };
            let aug = summarize(
                spec.name(),
                &cfg.dataset.name,
                Some(info),
                &cfg.seeds,
                runs,
                groups.as_deref(),
                &bundle.train,
            )
            .internal_err(STAGE)?;
            results.push(PairedResult::new(base.clone(), Some(aug)));
        }
    }
    write_json(STAGE, &ctx.path(RESULTS), &results)?;
    fs::write(ctx.path(TABLE), format_table(&results)).internal_err(STAGE)?;
    ctx.finish(STAGE, inputs, vec![RESULTS.into(), TABLE.into()], started)?;
    Ok(results)
}

/// Renders stored results and composition as text.
pub fn cmd_report(ctx: &Context) -> Result<String, CliError> {
    const STAGE: &str = "report";
    let results: Vec<PairedResult> = read_json(STAGE, &ctx.require(STAGE, RESULTS, "train-eval")?)?;
    let mut text = format_table(&results);
    let summary_path = ctx.path(AUGMENT_SUMMARY);
    if summary_path.exists() {
        let summary: AugmentSummary = read_json(STAGE, &summary_path)?;
        let f = summary.filter;
        text.push_str(&format!(
            "\nGenerations: {} total, {} accepted, {} without valid ids, {} below multiplicity, {} duplicates removed\n",
            f.total, f.accepted, f.rejected_invalid, f.rejected_multiplicity, f.duplicate_removed
        ));
        for v in &summary.variants {
            let c = &v.composition;
            let cap = v
                .cap_ratio
                .map_or_else(|| "none".to_string(), |r| r.to_string());
            text.push_str(&format!(
                "cap {cap}: {} generated / {} base, ratio {:.2}%, test overlap {:.2}%\n",
                c.generated_interactions,
                c.base_interactions,
                c.augmentation_ratio * 100.0,
                c.test_overlap_ratio * 100.0
            ));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for r in results
        .iter()
        .flat_map(|p| std::iter::once(&p.base).chain(p.augmented.as_ref()))
    {
        if r.groups.is_empty() {
            continue;
        }
        let label = match &r.augmentation {
            Some(a) => format!("{}+{} ({:.2}%)", r.model, a.backend, a.ratio * 100.0),
            None => r.model.clone(),
        };
        if !seen.insert(label.clone()) {
            continue;
        }
        text.push_str(&format!("\n{label}\n"));
        for g in &r.groups {
            match g
                .metrics
                .as_ref()
                .and_then(|m| m.recall.iter().next().map(|(k, v)| (*k, *v)))
            {
                Some((k, v)) => text.push_str(&format!(
                    "  group {} ({}-{} interactions, {} users): Recall@{k} {v:.5}\n",
                    g.group, g.min_interactions, g.max_interactions, g.users
                )),
                None => text.push_str(&format!("  group {}: no test users\n", g.group)),
            }
        }
    }
    Ok(text)
}

/// Loads the uncapped augmented file written by [`cmd_augment`].
pub fn load_augmented(ctx: &Context) -> Result<InteractionDataset, CliError> {
    let bundle = load_bundle(ctx, "augment")?;
    load_split_file(
        "augment",
        &ctx.require("augment", AUGMENTED, "augment")?,
        bundle.train.ids(),
    )
}

/// The generated pairs as merged in memory, for comparisons with files.
pub fn generated_from_files(ctx: &Context) -> Result<GeneratedInteractions, CliError> {
    let bundle = load_bundle(ctx, "augment")?;
    let mut records =
        read_records(&ctx.require("augment", GENERATIONS, "generate")?).user_err("augment")?;
    let backend = records
        .first()
        .map_or_else(|| "none".to_string(), |r| r.backend.clone());
    Ok(records_to_interactions(
        &mut records,
        &bundle.train,
        ctx.config.filter.min_valid,
        &backend,
    )
    .0)
}
