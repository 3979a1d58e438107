//! Prompt rendering and fine-tuning corpus construction.
//!
//! A user's train history is turned into (input, output) text pairs: the
//! input lists the user's clicked items and asks for recommendations, the
//! output names one held-out item. Two corpus modes exist. `Full` holds out
//! each item in turn and keeps the whole remaining history as context;
//! `Random` draws fixed-length random subsets of the remaining history.
//!
//! [`Vocabulary`] maps instances onto the token space of the built-in
//! identifier language model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{IdMaps, InteractionDataset, ItemIdx, UserIdx};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt context is empty")]
    EmptyContext,
    #[error("target item {0} is part of the context")]
    TargetInContext(u64),
    #[error("unknown {kind} index {index}")]
    UnknownIndex { kind: &'static str, index: usize },
    #[error("unknown external {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },
    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Full,
    Random,
    Inference,
}

/// Text pattern with `{user}`, `{items}` and `{target}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub input_pattern: String,
    pub output_pattern: String,
    pub item_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            input_pattern: "Given the user({user})'s clicked list items:{items}, predict what are items to recommend to the user({user}). Please only answer the items.".into(),
            output_pattern: "{target}".into(),
            item_separator: ", ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render_input(&self, user: u64, items: &[u64]) -> String {
        let joined = items
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(&self.item_separator);
        self.input_pattern
            .replace("{items}", &joined)
            .replace("{user}", &user.to_string())
    }

    pub fn render_output(&self, targets: &[u64]) -> String {
        let joined = targets
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(&self.item_separator);
        self.output_pattern.replace("{target}", &joined)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub user: UserIdx,
    pub context_items: Vec<ItemIdx>,
    /// One item for training instances, empty for inference.
    pub target_items: Vec<ItemIdx>,
    pub input_text: String,
    pub output_text: String,
    pub mode: PromptMode,
}

/// Rough token count of rendered text: every digit, every alphabetic run
/// and every other non-space character count as one token. Digit-wise
/// counting mirrors how common LLM tokenizers split numerals.
pub fn approx_token_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphabetic() {
            if !in_word {
                count += 1;
                in_word = true;
            }
            continue;
        }
        in_word = false;
        if !c.is_whitespace() {
            count += 1;
        }
    }
    count
}

fn check_user(ids: &IdMaps, user: UserIdx) -> Result<(), PromptError> {
    if user >= ids.users.len() {
        return Err(PromptError::UnknownIndex {
            kind: "user",
            index: user,
        });
    }
    Ok(())
}

fn check_item(ids: &IdMaps, item: ItemIdx) -> Result<(), PromptError> {
    if item >= ids.items.len() {
        return Err(PromptError::UnknownIndex {
            kind: "item",
            index: item,
        });
    }
    Ok(())
}

/// Renders one instance. With a target it is a training instance
/// (`mode` should be `Full` or `Random`); without one it is an inference
/// prompt.
pub fn render_prompt(
    template: &PromptTemplate,
    ids: &IdMaps,
    user: UserIdx,
    context_items: &[ItemIdx],
    target: Option<ItemIdx>,
    mode: PromptMode,
) -> Result<PromptInstance, PromptError> {
    if context_items.is_empty() {
        return Err(PromptError::EmptyContext);
    }
    check_user(ids, user)?;
    for &i in context_items {
        check_item(ids, i)?;
    }
    let ext_items: Vec<u64> = context_items
        .iter()
        .map(|&i| ids.items.external(i))
        .collect();
    let input_text = template.render_input(ids.users.external(user), &ext_items);
    let (target_items, output_text, mode) = match target {
        Some(t) => {
            check_item(ids, t)?;
            if context_items.contains(&t) {
                return Err(PromptError::TargetInContext(ids.items.external(t)));
            }
            let out = template.render_output(&[ids.items.external(t)]);
            (vec![t], out, mode)
        }
        None => (Vec::new(), String::new(), PromptMode::Inference),
    };
    Ok(PromptInstance {
        user,
        context_items: context_items.to_vec(),
        target_items,
        input_text,
        output_text,
        mode,
    })
}

/// Renders, dropping the oldest context items until the input fits within
/// `max_tokens` (at least one item is always kept).
fn render_truncated(
    template: &PromptTemplate,
    ids: &IdMaps,
    user: UserIdx,
    context: &[ItemIdx],
    target: Option<ItemIdx>,
    mode: PromptMode,
    max_tokens: usize,
) -> Result<PromptInstance, PromptError> {
    let mut start = 0;
    loop {
        let inst = render_prompt(template, ids, user, &context[start..], target, mode)?;
        if approx_token_count(&inst.input_text) <= max_tokens || start + 1 >= context.len() {
            return Ok(inst);
        }
        start += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    Full,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub mode: CorpusMode,
    /// Context length for random mode.
    pub length: usize,
    pub samples_per_target: usize,
    pub max_rendered_tokens: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            mode: CorpusMode::Full,
            length: 2,
            samples_per_target: 3,
            max_rendered_tokens: 2048,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.length == 0 {
            return Err(PromptError::InvalidConfig(
                "length must be at least 1".into(),
            ));
        }
        if self.samples_per_target == 0 {
            return Err(PromptError::InvalidConfig(
                "samples_per_target must be at least 1".into(),
            ));
        }
        if self.max_rendered_tokens == 0 {
            return Err(PromptError::InvalidConfig(
                "max_rendered_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub instances: Vec<PromptInstance>,
    /// Users with fewer than two train interactions.
    pub skipped_users: usize,
}

/// One instance per (user, held-out train item), context = all other
/// train items of that user in stored order.
pub fn build_full_corpus(
    train: &InteractionDataset,
    template: &PromptTemplate,
    cfg: &CorpusConfig,
) -> Result<Corpus, PromptError> {
    cfg.validate()?;
    let ids = train.ids();
    let mut instances = Vec::new();
    let mut skipped = 0;
    for u in 0..train.num_users() {
        let items = train.user_items(u);
        if items.len() < 2 {
            skipped += 1;
            continue;
        }
        for (k, &target) in items.iter().enumerate() {
            let context: Vec<ItemIdx> = items
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &i)| i)
                .collect();
            instances.push(render_truncated(
                template,
                ids,
                u,
                &context,
                Some(target),
                PromptMode::Full,
                cfg.max_rendered_tokens,
            )?);
        }
    }
    Ok(Corpus {
        instances,
        skipped_users: skipped,
    })
}

/// For each (user, target), `samples_per_target` contexts of
/// `min(length, |history| - 1)` items drawn uniformly without replacement
/// from the rest of the history, kept in stored order.
pub fn build_random_corpus(
    train: &InteractionDataset,
    template: &PromptTemplate,
    cfg: &CorpusConfig,
) -> Result<Corpus, PromptError> {
    cfg.validate()?;
    let ids = train.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::new();
    let mut skipped = 0;
    for u in 0..train.num_users() {
        let items = train.user_items(u);
        if items.len() < 2 {
            skipped += 1;
            continue;
        }
        let size = cfg.length.min(items.len() - 1);
        for (k, &target) in items.iter().enumerate() {
            let rest: Vec<ItemIdx> = items
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &i)| i)
                .collect();
            for _ in 0..cfg.samples_per_target {
                let mut picked = rand::seq::index::sample(&mut rng, rest.len(), size).into_vec();
                picked.sort_unstable();
                let context: Vec<ItemIdx> = picked.into_iter().map(|p| rest[p]).collect();
                instances.push(render_truncated(
                    template,
                    ids,
                    u,
                    &context,
                    Some(target),
                    PromptMode::Random,
                    cfg.max_rendered_tokens,
                )?);
            }
        }
    }
    Ok(Corpus {
        instances,
        skipped_users: skipped,
    })
}

pub fn build_corpus(
    train: &InteractionDataset,
    template: &PromptTemplate,
    cfg: &CorpusConfig,
) -> Result<Corpus, PromptError> {
    match cfg.mode {
        CorpusMode::Full => build_full_corpus(train, template, cfg),
        CorpusMode::Random => build_random_corpus(train, template, cfg),
    }
}

/// One inference prompt per user with a nonempty train history, using the
/// full history as context.
pub fn build_inference_prompts(
    train: &InteractionDataset,
    template: &PromptTemplate,
    max_rendered_tokens: usize,
) -> Result<Vec<PromptInstance>, PromptError> {
    let mut out = Vec::new();
    for u in 0..train.num_users() {
        let items = train.user_items(u);
        if items.is_empty() {
            continue;
        }
        out.push(render_truncated(
            template,
            train.ids(),
            u,
            &items,
            None,
            PromptMode::Inference,
            max_rendered_tokens,
        )?);
    }
    Ok(out)
}

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub input: String,
    pub output: String,
    pub user_id: u64,
    pub context_items: Vec<u64>,
    pub target_item: Option<u64>,
    pub mode: PromptMode,
}

impl CorpusRecord {
    pub fn from_instance(inst: &PromptInstance, ids: &IdMaps) -> Self {
        Self {
            input: inst.input_text.clone(),
            output: inst.output_text.clone(),
            user_id: ids.users.external(inst.user),
            context_items: inst
                .context_items
                .iter()
                .map(|&i| ids.items.external(i))
                .collect(),
            target_item: inst.target_items.first().map(|&i| ids.items.external(i)),
            mode: inst.mode,
        }
    }

    pub fn to_instance(&self, ids: &IdMaps) -> Result<PromptInstance, PromptError> {
        let item = |id: u64| {
            ids.items
                .get(id)
                .ok_or(PromptError::UnknownId { kind: "item", id })
        };
        Ok(PromptInstance {
            user: ids.users.get(self.user_id).ok_or(PromptError::UnknownId {
                kind: "user",
                id: self.user_id,
            })?,
            context_items: self
                .context_items
                .iter()
                .map(|&i| item(i))
                .collect::<Result<_, _>>()?,
            target_items: self
                .target_item
                .map(item)
                .transpose()?
                .into_iter()
                .collect(),
            input_text: self.input.clone(),
            output_text: self.output.clone(),
            mode: self.mode,
        })
    }
}

/// Writes instances as JSONL and returns the number of lines written.
pub fn write_corpus(
    instances: &[PromptInstance],
    ids: &IdMaps,
    path: &Path,
) -> Result<usize, PromptError> {
    let io_err = |e| PromptError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for inst in instances {
        let line = serde_json::to_string(&CorpusRecord::from_instance(inst, ids))
            .expect("corpus records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(instances.len())
}

pub fn read_corpus(path: &Path, ids: &IdMaps) -> Result<Vec<PromptInstance>, PromptError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| PromptError::Io {
        path: name.clone(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PromptError::Io {
            path: name.clone(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| PromptError::Json {
            path: name.clone(),
            line: k + 1,
            source: e,
        })?;
        out.push(rec.to_instance(ids)?);
    }
    Ok(out)
}

/// Token vocabulary of the identifier language model:
/// `BOS, SEP, EOS, PAD`, then one token per user, then one per item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_users: usize,
    pub num_items: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Bos,
    Sep,
    Eos,
    Pad,
    User(UserIdx),
    Item(ItemIdx),
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const SEP: usize = 1;
    pub const EOS: usize = 2;
    pub const PAD: usize = 3;
    const SPECIAL: usize = 4;

    pub fn new(num_users: usize, num_items: usize) -> Self {
        Self {
            num_users,
            num_items,
        }
    }

    pub fn for_dataset(ds: &InteractionDataset) -> Self {
        Self::new(ds.num_users(), ds.num_items())
    }

    pub fn size(&self) -> usize {
        Self::SPECIAL + self.num_users + self.num_items
    }

    pub fn user_token(&self, u: UserIdx) -> usize {
        Self::SPECIAL + u
    }

    pub fn item_token(&self, i: ItemIdx) -> usize {
        Self::SPECIAL + self.num_users + i
    }

    pub fn item_tokens(&self) -> std::ops::Range<usize> {
        let first = Self::SPECIAL + self.num_users;
        first..first + self.num_items
    }

    pub fn decode_token(&self, t: usize) -> Option<Token> {
        match t {
            Self::BOS => Some(Token::Bos),
            Self::SEP => Some(Token::Sep),
            Self::EOS => Some(Token::Eos),
            Self::PAD => Some(Token::Pad),
            t if t < Self::SPECIAL + self.num_users => Some(Token::User(t - Self::SPECIAL)),
            t if t < self.size() => Some(Token::Item(t - Self::SPECIAL - self.num_users)),
            _ => None,
        }
    }

    /// `[BOS] [USER] [ITEM]* [SEP]` followed by `[ITEM]* [EOS]` for
    /// training instances; inference instances stop at `[SEP]`.
    pub fn tokenize(&self, inst: &PromptInstance) -> Result<Vec<usize>, PromptError> {
        self.tokenize_parts(
            inst.user,
            &inst.context_items,
            &inst.target_items,
            inst.mode,
        )
    }

    fn tokenize_parts(
        &self,
        user: UserIdx,
        context: &[ItemIdx],
        targets: &[ItemIdx],
        mode: PromptMode,
    ) -> Result<Vec<usize>, PromptError> {
        if user >= self.num_users {
            return Err(PromptError::UnknownIndex {
                kind: "user",
                index: user,
            });
        }
        let mut out = Vec::with_capacity(context.len() + targets.len() + 4);
        out.push(Self::BOS);
        out.push(self.user_token(user));
        for &i in context.iter().chain(targets) {
            if i >= self.num_items {
                return Err(PromptError::UnknownIndex {
                    kind: "item",
                    index: i,
                });
            }
        }
        out.extend(context.iter().map(|&i| self.item_token(i)));
        out.push(Self::SEP);
        if mode != PromptMode::Inference {
            out.extend(targets.iter().map(|&i| self.item_token(i)));
            out.push(Self::EOS);
        }
        Ok(out)
    }

    /// Tokenizes, dropping the oldest context items until the sequence has
    /// at most `max_len` tokens. Fails if even a single context item does
    /// not fit.
    pub fn tokenize_truncated(
        &self,
        inst: &PromptInstance,
        max_len: usize,
    ) -> Result<Vec<usize>, PromptError> {
        let fixed = 3 + if inst.mode == PromptMode::Inference {
            0
        } else {
            inst.target_items.len() + 1
        };
        if fixed + 1 > max_len {
            return Err(PromptError::InvalidTokens(format!(
                "instance needs at least {} tokens, window is {max_len}",
                fixed + 1
            )));
        }
        let keep = inst.context_items.len().min(max_len - fixed);
        let ctx = &inst.context_items[inst.context_items.len() - keep..];
        self.tokenize_parts(inst.user, ctx, &inst.target_items, inst.mode)
    }

    /// Inverse of [`tokenize`](Self::tokenize): (user, context, targets, mode
    /// is inference).
    pub fn detokenize(
        &self,
        tokens: &[usize],
    ) -> Result<(UserIdx, Vec<ItemIdx>, Vec<ItemIdx>, bool), PromptError> {
        let bad = |m: &str| PromptError::InvalidTokens(m.to_string());
        let mut it = tokens.iter().map(|&t| self.decode_token(t));
        if it.next() != Some(Some(Token::Bos)) {
            return Err(bad("missing BOS"));
        }
        let user = match it.next() {
            Some(Some(Token::User(u))) => u,
            _ => return Err(bad("missing USER after BOS")),
        };
        let mut context = Vec::new();
        loop {
            match it.next() {
                Some(Some(Token::Item(i))) => context.push(i),
                Some(Some(Token::Sep)) => break,
                _ => return Err(bad("context must be items followed by SEP")),
            }
        }
        let mut targets = Vec::new();
        let mut closed = false;
        for tok in it.by_ref() {
            match tok {
                Some(Token::Item(i)) if !closed => targets.push(i),
                Some(Token::Eos) if !closed => closed = true,
                _ => return Err(bad("unexpected token after SEP")),
            }
        }
        if !closed && !targets.is_empty() {
            return Err(bad("targets without EOS"));
        }
        Ok((user, context, targets, !closed))
    }
}
