//! Built-in identifier language model.
//!
//! Token embedding plus learned positions, one causal attention block, and
//! an untied projection onto the vocabulary. Training maximizes the log
//! likelihood of the tokens after `[SEP]` given everything before them.
//! With adapters configured, [`TrainMode::Adapter`] updates only the
//! low-rank factors and leaves every base weight untouched.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::sample_token;
use super::{GenError, GenerationRequest, GenerationResponse, Generator, Prompt};
use crate::checkpoint;
use crate::dataset::IdMaps;
use crate::nn::{
    normal_matrix, softmax_rows, AttentionBlock, BlockCache, LowRank, ParamKind, Parameterized,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::promptgen::Vocabulary;

const ADAPTER_STREAM: u64 = 0x00ad_a9e5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskLmConfig {
    pub d_model: usize,
    /// Maximum sequence length in tokens.
    pub context: usize,
    pub ffn_hidden: usize,
    pub init_std: f64,
    pub adapter: Option<AdapterSpec>,
}

impl Default for DeskLmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            context: 64,
            ffn_hidden: 64,
            init_std: 0.3,
            adapter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskLm {
    pub config: DeskLmConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub block: AttentionBlock,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

struct Forward {
    logits: Array2<f64>,
    hidden: Array2<f64>,
    block: BlockCache,
}

impl DeskLm {
    pub fn new(vocab: Vocabulary, config: DeskLmConfig, seed: u64) -> Result<Self, GenError> {
        if config.d_model == 0 || config.ffn_hidden == 0 {
            return Err(GenError::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        if config.context < 4 {
            return Err(GenError::InvalidConfig(
                "context window must hold at least 4 tokens".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = config.init_std;
        let mut model = Self {
            tok_emb: normal_matrix(vocab.size(), d, std, &mut rng),
            pos_emb: normal_matrix(config.context, d, std, &mut rng),
            block: AttentionBlock::new(d, config.ffn_hidden, std, &mut rng),
            out_w: normal_matrix(d, vocab.size(), std, &mut rng),
            out_b: Array2::zeros((1, vocab.size())),
            config: DeskLmConfig {
                adapter: None,
                ..config.clone()
            },
            vocab,
            seed,
        };
        if let Some(spec) = config.adapter {
            model.attach_adapters(spec)?;
        }
        Ok(model)
    }

    /// Adds fresh query/value adapters (`B = 0`). Their randomness comes from
    /// a stream separate from the base initialization.
    pub fn attach_adapters(&mut self, spec: AdapterSpec) -> Result<(), GenError> {
        if spec.rank == 0 || spec.rank > self.config.d_model {
            return Err(GenError::InvalidConfig(format!(
                "adapter rank {} outside 1..={}",
                spec.rank, self.config.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ADAPTER_STREAM);
        let d = self.config.d_model;
        let std = self.config.init_std;
        self.block.adapter_q = Some(LowRank::new(d, spec.rank, spec.alpha, std, &mut rng));
        self.block.adapter_v = Some(LowRank::new(d, spec.rank, spec.alpha, std, &mut rng));
        self.config.adapter = Some(spec);
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        Self {
            config: self.config.clone(),
            vocab: self.vocab,
            seed: self.seed,
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            block: self.block.zeros_like(),
            out_w: z(&self.out_w),
            out_b: z(&self.out_b),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), GenError> {
        if tokens.is_empty() {
            return Err(GenError::InvalidRequest("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(GenError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.context,
            });
        }
        let vocab = self.vocab.size();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(GenError::TokenOutOfVocab { token: t, vocab });
        }
        Ok(())
    }

    fn run(&self, tokens: &[usize]) -> Forward {
        let t_len = tokens.len();
        let mut x = Array2::zeros((t_len, self.config.d_model));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.tok_emb.row(tok);
            row += &self.pos_emb.row(t);
        }
        let (hidden, block) = self.block.forward(&x);
        let logits = hidden.dot(&self.out_w) + &self.out_b;
        Forward {
            logits,
            hidden,
            block,
        }
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Array2<f64>, GenError> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens).logits)
    }

    /// Next-token distributions, one row per position.
    pub fn probabilities(&self, tokens: &[usize]) -> Result<Array2<f64>, GenError> {
        Ok(softmax_rows(&self.logits(tokens)?))
    }

    fn target_start(tokens: &[usize]) -> Result<usize, GenError> {
        match tokens.iter().position(|&t| t == Vocabulary::SEP) {
            Some(s) if s + 1 < tokens.len() => Ok(s),
            _ => Err(GenError::InvalidRequest(
                "training sequence needs SEP followed by at least one target token".into(),
            )),
        }
    }

    /// Token-averaged negative log likelihood of the post-`[SEP]` tokens.
    pub fn mean_loss(&self, seqs: &[&[usize]]) -> Result<f64, GenError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in seqs {
            self.check_tokens(seq)?;
            let start = Self::target_start(seq)?;
            let logits = self.run(seq).logits;
            for t in start..seq.len() - 1 {
                let row = logits.row(t);
                total += crate::nn::log_sum_exp(row) - row[seq[t + 1]];
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// Loss as in [`mean_loss`](Self::mean_loss) plus its gradient with
    /// respect to every parameter.
    pub fn loss_and_grads(&self, seqs: &[&[usize]]) -> Result<(f64, DeskLm), GenError> {
        let mut count = 0usize;
        for seq in seqs {
            self.check_tokens(seq)?;
            count += seq.len() - 1 - Self::target_start(seq)?;
        }
        let norm = 1.0 / count as f64;
        let mut grads = self.zeros_like();
        let mut total = 0.0;
        for seq in seqs {
            let start = Self::target_start(seq)?;
            let fwd = self.run(seq);
            let mut d_logits = Array2::<f64>::zeros(fwd.logits.raw_dim());
            for t in start..seq.len() - 1 {
                let row = fwd.logits.row(t);
                let lse = crate::nn::log_sum_exp(row);
                let y = seq[t + 1];
                total += lse - row[y];
                let mut d = d_logits.row_mut(t);
                d.assign(&row.mapv(|v| (v - lse).exp() * norm));
                d[y] -= norm;
            }
            grads.out_w += &fwd.hidden.t().dot(&d_logits);
            grads.out_b += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_hidden = d_logits.dot(&self.out_w.t());
            let d_x = self.block.backward(&fwd.block, &d_hidden, &mut grads.block);
            for (t, &tok) in seq.iter().enumerate() {
                let mut e = grads.tok_emb.row_mut(tok);
                e += &d_x.row(t);
                let mut p = grads.pos_emb.row_mut(t);
                p += &d_x.row(t);
            }
        }
        Ok((total * norm, grads))
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<(), GenError> {
        let meta = serde_json::json!({
            "kind": "desk_lm",
            "vocab": self.vocab,
            "config": self.config,
            "seed": self.seed,
        });
        checkpoint::save(stem, meta, self)?;
        Ok(())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self, GenError> {
        let manifest = checkpoint::read_manifest(stem)?;
        let bad = |m: String| {
            GenError::Checkpoint(checkpoint::CheckpointError::Manifest {
                path: checkpoint::manifest_path(stem).display().to_string(),
                message: m,
            })
        };
        if manifest.get("kind").and_then(|k| k.as_str()) != Some("desk_lm") {
            return Err(bad("not a desk_lm checkpoint".into()));
        }
        let vocab: Vocabulary = serde_json::from_value(manifest["vocab"].clone())
            .map_err(|e| bad(format!("vocab: {e}")))?;
        let config: DeskLmConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let seed = manifest["seed"]
            .as_u64()
            .ok_or_else(|| bad("seed missing".into()))?;
        let mut model = DeskLm::new(vocab, config, seed)?;
        checkpoint::load_into(stem, &mut model)?;
        Ok(model)
    }
}

impl Parameterized for DeskLm {
    fn params(&self) -> Vec<(ParamKind, String, &Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "tok_emb".to_string(), &self.tok_emb),
            (ParamKind::Base, "pos_emb".to_string(), &self.pos_emb),
        ];
        out.extend(
            self.block
                .params()
                .into_iter()
                .map(|(k, n, p)| (k, format!("block.{n}"), p)),
        );
        out.push((ParamKind::Base, "out_w".to_string(), &self.out_w));
        out.push((ParamKind::Base, "out_b".to_string(), &self.out_b));
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, String, &mut Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "tok_emb".to_string(), &mut self.tok_emb),
            (ParamKind::Base, "pos_emb".to_string(), &mut self.pos_emb),
        ];
        out.extend(
            self.block
                .params_mut()
                .into_iter()
                .map(|(k, n, p)| (k, format!("block.{n}"), p)),
        );
        out.push((ParamKind::Base, "out_w".to_string(), &mut self.out_w));
        out.push((ParamKind::Base, "out_b".to_string(), &mut self.out_b));
        out
    }
}

/// Next-token distributions for `tokens`, one row per position.
pub fn lm_forward(model: &DeskLm, tokens: &[usize]) -> Result<Array2<f64>, GenError> {
    model.probabilities(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every parameter, adapters included, is trainable.
    Full,
    /// Only adapter factors are trainable.
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 1e-3,
            batch_size: 64,
            mode: TrainMode::Full,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    /// Mean loss over the whole corpus after training, nats per token.
    pub final_loss: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Minibatch loss at each step.
    pub loss_history: Vec<f64>,
}

/// Fits `model` to `corpus` (token sequences containing `[SEP]`).
/// Deterministic for a fixed model, corpus and config.
pub fn train_desk_lm(
    mut model: DeskLm,
    corpus: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(DeskLm, TrainReport), GenError> {
    if corpus.is_empty() {
        return Err(GenError::InvalidConfig("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(GenError::InvalidConfig(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let trainable: &[ParamKind] = match cfg.mode {
        TrainMode::Full => &[ParamKind::Base, ParamKind::Adapter],
        TrainMode::Adapter => {
            if model.block.adapter_q.is_none() {
                return Err(GenError::InvalidConfig(
                    "adapter training requested but the model has no adapters".into(),
                ));
            }
            &[ParamKind::Adapter]
        }
    };
    let all: Vec<&[usize]> = corpus.iter().map(Vec::as_slice).collect();
    let initial_loss = model.mean_loss(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(all[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(GenError::NonFiniteLoss { step });
        }
        opt.step(&mut model, &grads, trainable);
        history.push(loss);
    }
    let final_loss = if cfg.steps == 0 {
        initial_loss
    } else {
        model.mean_loss(&all)?
    };
    if !final_loss.is_finite() {
        return Err(GenError::NonFiniteLoss { step: cfg.steps });
    }
    let report = TrainReport {
        steps: cfg.steps,
        initial_loss,
        final_loss,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        loss_history: history,
    };
    Ok((model, report))
}

/// Samples item continuations from a [`DeskLm`].
///
/// Only item tokens may be emitted; `[EOS]` becomes available once
/// `min_items_before_eos` items have been produced. The raw text lists the
/// emitted items' external ids separated by `", "`.
#[derive(Debug, Clone)]
pub struct DeskGenerator {
    model: Arc<DeskLm>,
    ids: Arc<IdMaps>,
    min_items_before_eos: usize,
}

impl DeskGenerator {
    pub fn new(
        model: Arc<DeskLm>,
        ids: Arc<IdMaps>,
        min_items_before_eos: usize,
    ) -> Result<Self, GenError> {
        if ids.items.len() != model.vocab.num_items || ids.users.len() != model.vocab.num_users {
            return Err(GenError::InvalidConfig(
                "id maps do not match the model vocabulary".into(),
            ));
        }
        Ok(Self {
            model,
            ids,
            min_items_before_eos,
        })
    }

    pub fn model(&self) -> &DeskLm {
        &self.model
    }
}

impl Generator for DeskGenerator {
    fn backend_id(&self) -> String {
        "desk".into()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError> {
        request.validate()?;
        let started = Instant::now();
        let mut tokens = match &request.prompt {
            Prompt::Tokens(t) => t.clone(),
            Prompt::Text(_) => {
                return Err(GenError::InvalidRequest(
                    "the desk backend takes token prompts".into(),
                ))
            }
        };
        self.model.check_tokens(&tokens)?;
        let vocab = self.model.vocab;
        let items = vocab.item_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let mut emitted = Vec::new();
        while emitted.len() < request.max_new_tokens && tokens.len() < self.model.config.context {
            let logits = self.model.run(&tokens).logits;
            let last = logits.slice(s![logits.nrows() - 1, ..]);
            let eos_ok = emitted.len() >= self.min_items_before_eos;
            let max = last
                .iter()
                .enumerate()
                .filter(|&(t, _)| items.contains(&t) || (eos_ok && t == Vocabulary::EOS))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = last
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    if items.contains(&t) || (eos_ok && t == Vocabulary::EOS) {
                        (v - max).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            let next = sample_token(&probs, request.top_p, request.temperature, &mut rng);
            if next == Vocabulary::EOS {
                break;
            }
            tokens.push(next);
            emitted.push(next - items.start);
        }
        let raw_text = emitted
            .iter()
            .map(|&i| self.ids.items.external(i).to_string())
            .collect::<Vec<_>>()
            .join(", ");
        Ok(GenerationResponse {
            raw_text,
            token_count: emitted.len(),
            backend_id: self.backend_id(),
            latency: started.elapsed(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_fd_error;
    use rand::Rng;

    fn tiny_config() -> DeskLmConfig {
        DeskLmConfig {
            d_model: 8,
            context: 16,
            ffn_hidden: 12,
            init_std: 0.3,
            adapter: None,
        }
    }

    fn seq(v: &Vocabulary, user: usize, ctx: &[usize], tgt: usize) -> Vec<usize> {
        let mut s = vec![Vocabulary::BOS, v.user_token(user)];
        s.extend(ctx.iter().map(|&i| v.item_token(i)));
        s.push(Vocabulary::SEP);
        s.push(v.item_token(tgt));
        s.push(Vocabulary::EOS);
        s
    }

    #[test]
    fn rows_are_distributions_and_causal() {
        let v = Vocabulary::new(3, 5);
        let m = DeskLm::new(v, tiny_config(), 1).unwrap();
        let toks = seq(&v, 1, &[0, 2, 4], 3);
        let p = lm_forward(&m, &toks).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
        let mut other = toks.clone();
        other[4] = v.item_token(1);
        other[5] = Vocabulary::PAD;
        let q = lm_forward(&m, &other).unwrap();
        for t in 0..4 {
            assert_eq!(p.row(t), q.row(t));
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let v = Vocabulary::new(1, 2);
        let m = DeskLm::new(v, tiny_config(), 1).unwrap();
        assert!(matches!(
            lm_forward(&m, &[0, 99]),
            Err(GenError::TokenOutOfVocab { .. })
        ));
        assert!(matches!(
            lm_forward(&m, &[0; 17]),
            Err(GenError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let v = Vocabulary::new(3, 6);
        let mut m = DeskLm::new(
            v,
            DeskLmConfig {
                adapter: Some(AdapterSpec {
                    rank: 2,
                    alpha: 4.0,
                }),
                ..tiny_config()
            },
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lr in [&mut m.block.adapter_q, &mut m.block.adapter_v] {
            let lr = lr.as_mut().unwrap();
            lr.b = normal_matrix(2, 8, 0.3, &mut rng);
        }
        m.out_b.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        let corpus = [seq(&v, 0, &[1, 2], 3), seq(&v, 2, &[5], 0)];
        let batch: Vec<&[usize]> = corpus.iter().map(Vec::as_slice).collect();
        let (loss, grads) = m.loss_and_grads(&batch).unwrap();
        assert!((loss - m.mean_loss(&batch).unwrap()).abs() < 1e-12);
        let err = max_fd_error(&m, &grads, |mm| mm.mean_loss(&batch).unwrap(), 300, 3);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_steps_keep_model_and_loss() {
        let v = Vocabulary::new(2, 4);
        let m = DeskLm::new(v, tiny_config(), 2).unwrap();
        let corpus = vec![seq(&v, 0, &[1], 2)];
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (trained, report) = train_desk_lm(m.clone(), &corpus, &cfg).unwrap();
        assert_eq!(trained, m);
        assert_eq!(report.final_loss, report.initial_loss);
    }

    #[test]
    fn adapter_training_freezes_base() {
        let v = Vocabulary::new(2, 4);
        let base = DeskLm::new(v, tiny_config(), 4).unwrap();
        let mut adapted = base.clone();
        adapted
            .attach_adapters(AdapterSpec {
                rank: 2,
                alpha: 4.0,
            })
            .unwrap();
        let toks = seq(&v, 1, &[0, 3], 2);
        assert_eq!(
            lm_forward(&base, &toks).unwrap(),
            lm_forward(&adapted, &toks).unwrap()
        );

        let cfg = TrainConfig {
            steps: 20,
            learning_rate: 1e-2,
            mode: TrainMode::Adapter,
            ..Default::default()
        };
        let (trained, report) = train_desk_lm(adapted, &[toks.clone()], &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        for ((kind, name, a), (_, _, b)) in trained.params().into_iter().zip(base.params()) {
            if kind == ParamKind::Base {
                assert_eq!(a, b, "{name} changed");
            }
        }
        assert!(trained
            .block
            .adapter_q
            .as_ref()
            .unwrap()
            .b
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn adapter_mode_without_adapters_is_an_error() {
        let v = Vocabulary::new(1, 2);
        let m = DeskLm::new(v, tiny_config(), 1).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Adapter,
            ..Default::default()
        };
        assert!(train_desk_lm(m, &[seq(&v, 0, &[0], 1)], &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let v = Vocabulary::new(2, 4);
        let corpus = vec![seq(&v, 0, &[1], 2), seq(&v, 1, &[3], 0)];
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 1,
            ..Default::default()
        };
        let a = train_desk_lm(DeskLm::new(v, tiny_config(), 3).unwrap(), &corpus, &cfg).unwrap();
        let b = train_desk_lm(DeskLm::new(v, tiny_config(), 3).unwrap(), &corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let v = Vocabulary::new(2, 4);
        let m = DeskLm::new(
            v,
            DeskLmConfig {
                adapter: Some(AdapterSpec::default()),
                ..tiny_config()
            },
            8,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("lm");
        m.save(&stem).unwrap();
        let back = DeskLm::load(&stem).unwrap();
        assert_eq!(back.config, m.config);
        let close = back
            .params()
            .iter()
            .zip(m.params())
            .all(|((_, _, a), (_, _, b))| {
                a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6)
            });
        assert!(close);
    }

    #[test]
    fn generator_emits_items_only() {
        let ds = crate::dataset::InteractionDataset::from_records(
            (0..6).map(|i| (1u64, 100 + i as u64, None)),
        );
        let v = Vocabulary::for_dataset(&ds);
        let m = Arc::new(DeskLm::new(v, tiny_config(), 1).unwrap());
        let g = DeskGenerator::new(m, Arc::clone(ds.ids()), 3).unwrap();
        let prompt = vec![
            Vocabulary::BOS,
            v.user_token(0),
            v.item_token(0),
            Vocabulary::SEP,
        ];
        let req = GenerationRequest {
            max_new_tokens: 5,
            seed: 4,
            ..GenerationRequest::new(Prompt::Tokens(prompt.clone()))
        };
        let a = g.generate(&req).unwrap();
        assert!(a.token_count >= 3 && a.token_count <= 5);
        let ids = crate::parsefilter::extract_item_ids(&a.raw_text);
        assert_eq!(ids.len(), a.token_count);
        assert!(ids.iter().all(|i| (100..106).contains(i)));
        assert_eq!(g.generate(&req).unwrap().raw_text, a.raw_text);
        let text_req = GenerationRequest::new(Prompt::Text("x".into()));
        assert!(g.generate(&text_req).is_err());
    }
}
