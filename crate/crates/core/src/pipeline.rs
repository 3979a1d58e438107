//! In-memory glue between stages: corpus tokenization, per-user generation
//! and turning generation records into augmentation pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GeneratedInteractions;
use crate::dataset::InteractionDataset;
use crate::genbackend::{batch_generate, GenError, GenerationRequest, Generator, Prompt};
use crate::parsefilter::{filter_records, FilterReport, GenerationRecord};
use crate::promptgen::{
    build_inference_prompts, PromptError, PromptInstance, PromptTemplate, Vocabulary,
};

/// Token sequences for the identifier LM, each fitted to `context` tokens.
pub fn tokenize_corpus(
    instances: &[PromptInstance],
    vocab: &Vocabulary,
    context: usize,
) -> Result<Vec<Vec<usize>>, PromptError> {
    instances
        .iter()
        .map(|inst| vocab.tokenize_truncated(inst, context))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Token ids for the built-in LM, truncated to its context window.
    Tokens { context: usize },
    /// Rendered instruction text for a text-completion backend.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub generations_per_user: usize,
    pub max_new_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub concurrency: usize,
    pub max_rendered_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            generations_per_user: 1,
            max_new_tokens: 8,
            top_p: 0.9,
            temperature: 1.0,
            concurrency: 4,
            max_rendered_tokens: 2048,
            seed: 0,
        }
    }
}

/// One inference prompt per user with history, `generations_per_user`
/// requests each, in user order. Each request gets its own sampling seed
/// drawn from `settings.seed`.
pub fn generate_for_users<G: Generator + ?Sized>(
    generator: &G,
    train: &InteractionDataset,
    template: &PromptTemplate,
    style: PromptStyle,
    settings: &GenerationSettings,
) -> Result<Vec<GenerationRecord>, GenError> {
    if settings.generations_per_user == 0 {
        return Err(GenError::InvalidConfig(
            "generations_per_user must be at least 1".into(),
        ));
    }
    let prompts = build_inference_prompts(train, template, settings.max_rendered_tokens)?;
    let vocab = Vocabulary::for_dataset(train);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut requests = Vec::new();
    let mut meta = Vec::new();
    for inst in &prompts {
        let prompt = match style {
            PromptStyle::Tokens { context } => {
                Prompt::Tokens(vocab.tokenize_truncated(inst, context)?)
            }
            PromptStyle::Text => Prompt::Text(inst.input_text.clone()),
        };
        for _ in 0..settings.generations_per_user {
            requests.push(GenerationRequest {
                prompt: prompt.clone(),
                max_new_tokens: settings.max_new_tokens,
                top_p: settings.top_p,
                temperature: settings.temperature,
                seed: rng.random(),
            });
            meta.push((train.external_user(inst.user), inst.input_text.clone()));
        }
    }
    let backend = generator.backend_id();
    let results = batch_generate(generator, &requests, settings.concurrency.max(1))?;
    Ok(meta
        .into_iter()
        .zip(results)
        .map(|((user_id, prompt), r)| match r {
            Ok(resp) => GenerationRecord::new(user_id, prompt, resp.raw_text, resp.backend_id),
            Err(e) => {
                let mut rec =
                    GenerationRecord::new(user_id, prompt, String::new(), backend.clone());
                rec.error = Some(e.to_string());
                rec
            }
        })
        .collect())
}

/// Filters `records` in place and collects the surviving pairs.
pub fn records_to_interactions(
    records: &mut [GenerationRecord],
    train: &InteractionDataset,
    min_valid: usize,
    backend: &str,
) -> (GeneratedInteractions, FilterReport) {
    let (accepted, report) = filter_records(records, train, min_valid);
    let generated = GeneratedInteractions::from_candidates(
        std::sync::Arc::clone(train.ids()),
        &accepted,
        backend,
    );
    (generated, report)
}
