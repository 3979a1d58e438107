use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpr::sigmoid;
use super::{RecError, Scorer};
use crate::dataset::{InteractionDataset, ItemIdx, UserIdx};
use crate::nn::{normal_matrix, AttentionBlock, BlockCache, ParamKind, Parameterized};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SasRecConfig {
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub blocks: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SasRecConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 20,
            heads: 1,
            blocks: 1,
            learning_rate: 0.005,
            epochs: 100,
            dropout: 0.1,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl SasRecConfig {
    pub fn validate(&self) -> Result<(), RecError> {
        let bad = |m: &str| Err(RecError::InvalidConfig(m.into()));
        if self.dim == 0 || self.blocks == 0 {
            return bad("dim and blocks must be at least 1");
        }
        if self.heads != 1 {
            return bad("only single-head attention is implemented");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("need learning_rate > 0 and dropout in [0, 1)");
        }
        Ok(())
    }
}

/// Item embeddings plus learned positions, fed through causal attention
/// blocks; the score of item `i` at position `t` is `h_t · e_i`. Positions
/// are right-aligned: the newest item always takes the last position slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SasRec {
    pub config: SasRecConfig,
    pub item_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<AttentionBlock>,
}

impl SasRec {
    pub fn new(num_items: usize, config: SasRecConfig) -> Result<Self, RecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::init(num_items, config, &mut rng))
    }

    fn init<R: Rng + ?Sized>(num_items: usize, config: SasRecConfig, rng: &mut R) -> Self {
        let d = config.dim;
        Self {
            item_emb: normal_matrix(num_items, d, 0.1, rng),
            pos_emb: normal_matrix(config.max_len, d, 0.1, rng),
            blocks: (0..config.blocks)
                .map(|_| AttentionBlock::new(d, d, 0.1, rng))
                .collect(),
            config,
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            item_emb: Array2::zeros(self.item_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            blocks: self.blocks.iter().map(AttentionBlock::zeros_like).collect(),
        }
    }

    fn check(&self, seq: &[ItemIdx]) -> Result<(), RecError> {
        if seq.len() > self.config.max_len {
            return Err(RecError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= self.num_items()) {
            return Err(RecError::InvalidConfig(format!(
                "item index {bad} out of range"
            )));
        }
        Ok(())
    }

    fn hidden(
        &self,
        seq: &[ItemIdx],
        mask: Option<&Array2<f64>>,
    ) -> (Array2<f64>, Vec<BlockCache>) {
        let t = seq.len();
        let offset = self.config.max_len - t;
        let mut x = Array2::zeros((t, self.config.dim));
        for (p, &i) in seq.iter().enumerate() {
            let mut row = x.row_mut(p);
            row.assign(&self.item_emb.row(i));
            row += &self.pos_emb.row(offset + p);
        }
        if let Some(m) = mask {
            x *= m;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, cache) = b.forward(&x);
            caches.push(cache);
            x = out;
        }
        (x, caches)
    }

    /// Scores over all items for the item following `seq`. Only the last
    /// `max_len` items are used.
    pub fn score_sequence(&self, seq: &[ItemIdx]) -> Vec<f64> {
        if seq.is_empty() {
            return vec![0.0; self.num_items()];
        }
        let tail = &seq[seq.len().saturating_sub(self.config.max_len)..];
        let (h, _) = self.hidden(tail, None);
        self.item_emb.dot(&h.row(h.nrows() - 1)).to_vec()
    }

    /// Mean over positions of `-ln σ(h_t·e_{pos_t} - h_t·e_{neg_t})`.
    pub fn sequence_loss(
        &self,
        input: &[ItemIdx],
        pos: &[ItemIdx],
        neg: &[ItemIdx],
    ) -> Result<f64, RecError> {
        Ok(self.loss_and_grads(input, pos, neg, None)?.0)
    }

    /// Loss and parameter gradients; `mask` multiplies the input embeddings
    /// (inverted dropout).
    pub fn loss_and_grads(
        &self,
        input: &[ItemIdx],
        pos: &[ItemIdx],
        neg: &[ItemIdx],
        mask: Option<&Array2<f64>>,
    ) -> Result<(f64, SasRec), RecError> {
        self.check(input)?;
        if pos.len() != input.len() || neg.len() != input.len() || input.is_empty() {
            return Err(RecError::InvalidConfig(
                "input, positives and negatives must have equal nonzero length".into(),
            ));
        }
        self.check(pos)?;
        self.check(neg)?;
        let t_len = input.len();
        let (h, caches) = self.hidden(input, mask);
        let mut grads = self.zeros_like();
        let mut dh = Array2::zeros(h.raw_dim());
        let mut loss = 0.0;
        let scale = 1.0 / t_len as f64;
        for t in 0..t_len {
            let ht = h.row(t);
            let diff = &self.item_emb.row(pos[t]) - &self.item_emb.row(neg[t]);
            let x = ht.dot(&diff);
            loss += ((-x).max(0.0) + (-x.abs()).exp().ln_1p()) * scale;
            let g = -sigmoid(-x) * scale;
            dh.row_mut(t).scaled_add(g, &diff);
            grads.item_emb.row_mut(pos[t]).scaled_add(g, &ht);
            grads.item_emb.row_mut(neg[t]).scaled_add(-g, &ht);
        }
        let mut dx = dh;
        for (k, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&caches[k], &dx, &mut grads.blocks[k]);
        }
        if let Some(m) = mask {
            dx *= m;
        }
        let offset = self.config.max_len - t_len;
        for (p, &i) in input.iter().enumerate() {
            grads.item_emb.row_mut(i).scaled_add(1.0, &dx.row(p));
            grads
                .pos_emb
                .row_mut(offset + p)
                .scaled_add(1.0, &dx.row(p));
        }
        Ok((loss, grads))
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<(), RecError> {
        let meta = serde_json::json!({
            "kind": "sasrec",
            "num_items": self.num_items(),
            "config": self.config,
        });
        crate::checkpoint::save(stem, meta, self)?;
        Ok(())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self, RecError> {
        let manifest = crate::checkpoint::read_manifest(stem)?;
        let bad = |m: String| crate::checkpoint::CheckpointError::Manifest {
            path: stem.display().to_string(),
            message: m,
        };
        let config: SasRecConfig =
            serde_json::from_value(manifest["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let num_items = manifest["num_items"]
            .as_u64()
            .ok_or_else(|| bad("missing num_items".into()))? as usize;
        let mut model = Self::new(num_items, config)?;
        crate::checkpoint::load_into(stem, &mut model)?;
        Ok(model)
    }
}

impl Parameterized for SasRec {
    fn params(&self) -> Vec<(ParamKind, String, &Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "item_emb".to_string(), &self.item_emb),
            (ParamKind::Base, "pos_emb".to_string(), &self.pos_emb),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.params()
                    .into_iter()
                    .map(|(kind, n, p)| (kind, format!("block{k}.{n}"), p)),
            );
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, String, &mut Array2<f64>)> {
        let mut out = vec![
            (ParamKind::Base, "item_emb".to_string(), &mut self.item_emb),
            (ParamKind::Base, "pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.params_mut()
                    .into_iter()
                    .map(|(kind, n, p)| (kind, format!("block{k}.{n}"), p)),
            );
        }
        out
    }
}

/// Per-position scores over all items, one row per input position.
pub fn sasrec_forward(model: &SasRec, seq: &[ItemIdx]) -> Result<Array2<f64>, RecError> {
    model.check(seq)?;
    let (h, _) = model.hidden(seq, None);
    Ok(h.dot(&model.item_emb.t()))
}

/// Next-item training over item sequences. Each step takes one sequence's
/// latest `max_len + 1` items; every position gets one uniform negative
/// distinct from its true next item.
pub fn train_sasrec(
    sequences: &[Vec<ItemIdx>],
    num_items: usize,
    cfg: &SasRecConfig,
) -> Result<SasRec, RecError> {
    cfg.validate()?;
    if num_items < 2 {
        return Err(RecError::InvalidConfig("need at least two items".into()));
    }
    let usable: Vec<&Vec<ItemIdx>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(RecError::EmptyTrain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SasRec::init(num_items, cfg.clone(), &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let keep = 1.0 - cfg.dropout;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, &k) in order.iter().enumerate() {
            let seq = usable[k];
            let window = &seq[seq.len().saturating_sub(cfg.max_len + 1)..];
            let input = &window[..window.len() - 1];
            let pos = &window[1..];
            let neg: Vec<ItemIdx> = pos
                .iter()
                .map(|&p| loop {
                    let j = rng.random_range(0..num_items);
                    if j != p {
                        break j;
                    }
                })
                .collect();
            let mask = (cfg.dropout > 0.0).then(|| {
                Array2::from_shape_simple_fn((input.len(), cfg.dim), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            let (loss, grads) = model.loss_and_grads(input, pos, &neg, mask.as_ref())?;
            if !loss.is_finite() {
                return Err(RecError::NonFinite { epoch, step });
            }
            opt.step(&mut model, &grads, &[ParamKind::Base]);
        }
    }
    Ok(model)
}

/// Each user's train items in stored order.
pub fn user_sequences(train: &InteractionDataset) -> Vec<Vec<ItemIdx>> {
    (0..train.num_users())
        .map(|u| train.user_items(u))
        .collect()
}

/// Scores a user by running the model over their train sequence.
pub struct SasRecScorer<'a> {
    pub model: &'a SasRec,
    pub sequences: Vec<Vec<ItemIdx>>,
}

impl Scorer for SasRecScorer<'_> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }

    fn score_user(&self, user: UserIdx) -> Vec<f64> {
        self.model.score_sequence(&self.sequences[user])
    }
}
