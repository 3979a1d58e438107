//! Continuation generators behind one contract.
//!
//! [`Generator`] is implemented by the built-in identifier language model
//! ([`DeskGenerator`]) and by an HTTP completion client
//! ([`RemoteGenerator`]). [`CachedGenerator`] makes any backend replayable.

mod desk;
mod remote;
mod sampling;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use desk::{
    lm_forward, train_desk_lm, AdapterSpec, DeskGenerator, DeskLm, DeskLmConfig, TrainConfig,
    TrainMode, TrainReport,
};
pub use remote::{CachedGenerator, RemoteConfig, RemoteGenerator, ResponseCache};
pub use sampling::{nucleus, sample_token};

use crate::checkpoint::CheckpointError;
use crate::promptgen::PromptError;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds context window {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("response cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Text(String),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: Prompt,
    pub max_new_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(prompt: Prompt) -> Self {
        Self {
            prompt,
            max_new_tokens: 8,
            top_p: 0.9,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidRequest(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidRequest(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResponse {
    pub raw_text: String,
    pub token_count: usize,
    pub backend_id: String,
    pub latency: Duration,
}

pub trait Generator: Send + Sync {
    fn backend_id(&self) -> String;
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError> {
        (**self).generate(request)
    }
}

/// Runs `requests` with at most `limit` in flight. Results come back in
/// request order; a failing request yields an `Err` entry without
/// stopping the batch.
pub fn batch_generate<G: Generator + ?Sized>(
    generator: &G,
    requests: &[GenerationRequest],
    limit: usize,
) -> Result<Vec<Result<GenerationResponse, GenError>>, GenError> {
    if limit == 0 {
        return Err(GenError::InvalidRequest(
            "concurrency limit must be at least 1".into(),
        ));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GenerationResponse, GenError>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let workers = limit.min(requests.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= requests.len() {
                    break;
                }
                let result = generator.generate(&requests[k]);
                slots.lock().expect("result collector poisoned")[k] = Some(result);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("result collector poisoned")
        .into_iter()
        .map(|r| r.expect("every request index is visited"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Probe {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Generator for Probe {
        fn backend_id(&self) -> String {
            "probe".into()
        }
        fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GenError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            // later requests finish first
            std::thread::sleep(Duration::from_millis(30 - 5 * request.seed.min(5)));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            if request.seed == 99 {
                return Err(GenError::Transport("boom".into()));
            }
            Ok(GenerationResponse {
                raw_text: request.seed.to_string(),
                token_count: 1,
                backend_id: self.backend_id(),
                latency: Duration::ZERO,
            })
        }
    }

    fn req(seed: u64) -> GenerationRequest {
        GenerationRequest {
            seed,
            ..GenerationRequest::new(Prompt::Text("x".into()))
        }
    }

    fn probe() -> Probe {
        Probe {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    #[test]
    fn responses_keep_request_order_under_limit() {
        let g = probe();
        let reqs: Vec<_> = (0..5).map(req).collect();
        let out = batch_generate(&g, &reqs, 2).unwrap();
        let texts: Vec<_> = out.into_iter().map(|r| r.unwrap().raw_text).collect();
        assert_eq!(texts, vec!["0", "1", "2", "3", "4"]);
        assert!(g.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn failures_are_recorded_per_request() {
        let g = probe();
        let out = batch_generate(&g, &[req(1), req(99), req(2)], 3).unwrap();
        assert!(out[0].is_ok() && out[2].is_ok());
        assert!(matches!(out[1], Err(GenError::Transport(_))));
    }

    #[test]
    fn zero_limit_rejected() {
        assert!(batch_generate(&probe(), &[req(0)], 0).is_err());
    }

    #[test]
    fn request_validation() {
        assert!(req(0).validate().is_ok());
        assert!(GenerationRequest {
            max_new_tokens: 0,
            ..req(0)
        }
        .validate()
        .is_err());
        assert!(GenerationRequest {
            top_p: 0.0,
            ..req(0)
        }
        .validate()
        .is_err());
        assert!(GenerationRequest {
            temperature: 0.0,
            ..req(0)
        }
        .validate()
        .is_err());
    }
}
