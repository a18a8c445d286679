//! Teacher LLM access: chat-completion providers, response caching, and
//! bounded-parallel batch generation.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::{key_of, ContentCache};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};
use crate::par::bounded_map;
use crate::prompt::{render, TeacherPrompt};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One request asking for `n` choices.
    #[default]
    NSampling,
    /// `n` requests with one choice each.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Candidates per positive prompt, G.
    pub n_samples: usize,
    pub sampling: SamplingMode,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_new_tokens: 256,
            n_samples: 5,
            sampling: SamplingMode::NSampling,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            errs.push(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.n_samples == 0 {
            errs.push("g (candidates per query) must be >= 1".to_string());
        }
        if self.max_new_tokens == 0 {
            errs.push("max tokens must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Positive,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningCandidate {
    pub text: String,
    pub source: CandidateSource,
    pub candidate_index: usize,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Chat-completion request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: usize,
    /// Index of the first candidate this request fills. Not sent on the wire.
    #[serde(skip)]
    pub first_index: usize,
    #[serde(skip)]
    pub prompt_hash: String,
}

impl ChatRequest {
    pub fn new(prompt: &TeacherPrompt, model: &str, params: &GenerationParams, n: usize) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.instruction.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.input.clone(),
                },
            ],
            temperature: params.temperature,
            max_tokens: params.max_new_tokens,
            n,
            first_index: 0,
            prompt_hash: prompt.prompt_hash(),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;

    /// Returns the message bodies of the completion choices. May return fewer
    /// than `request.n` when the endpoint ignores n-sampling.
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>>;
}

/// Deterministic offline provider. `{i}` in the template becomes the
/// candidate index and `{hash}` the first 12 hex digits of the prompt hash.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub template: String,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self {
            template: "R{i}".into(),
        }
    }
}

impl ChatProvider for MockProvider {
    fn id(&self) -> String {
        format!("mock:{}", self.template)
    }

    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>> {
        let hash = &request.prompt_hash[..request.prompt_hash.len().min(12)];
        Ok((0..request.n)
            .map(|k| {
                let i = (request.first_index + k).to_string();
                render(&self.template, &[("i", i.as_str()), ("hash", hash)])
            })
            .collect())
    }
}

/// OpenAI-style `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpChatProvider {
    url: String,
    key: Option<String>,
    client: HttpClient,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatProvider {
    pub fn new(url: String, key: Option<String>) -> Self {
        Self::with_client(
            url,
            key,
            HttpClient::new(Duration::from_secs(120), RetryPolicy::default()),
        )
    }

    pub fn with_client(url: String, key: Option<String>, client: HttpClient) -> Self {
        Self { url, key, client }
    }
}

impl ChatProvider for HttpChatProvider {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>> {
        let resp: ChatResponse = self
            .client
            .post_json(&self.url, self.key.as_deref(), request)?;
        Ok(resp
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

#[derive(Serialize)]
struct CacheIdentity<'a> {
    provider: String,
    model: &'a str,
    prompt: String,
    temperature: f64,
    max_tokens: u32,
    n: usize,
    sampling: SamplingMode,
}

/// Candidates for one query: G positives and up to N perturbed reasonings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub positives: Vec<ReasoningCandidate>,
    pub perturbed: Vec<ReasoningCandidate>,
    /// Perturbed prompts whose generation failed.
    pub perturbed_failures: Vec<String>,
}

/// Prompts for one query.
#[derive(Debug, Clone)]
pub struct QueryPrompts {
    pub positive: TeacherPrompt,
    pub perturbed: Vec<TeacherPrompt>,
}

#[derive(Clone)]
pub struct TeacherGateway {
    provider: Arc<dyn ChatProvider>,
    model: String,
    cache: Option<ContentCache>,
}

impl TeacherGateway {
    pub fn new(provider: Arc<dyn ChatProvider>, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    fn cache_key(&self, prompt: &TeacherPrompt, params: &GenerationParams, n: usize) -> Result<String> {
        key_of(&CacheIdentity {
            provider: self.provider.id(),
            model: &self.model,
            prompt: format!("{}\n{}", prompt.instruction, prompt.input),
            temperature: params.temperature,
            max_tokens: params.max_new_tokens,
            n,
            sampling: params.sampling,
        })
    }

    fn request(
        &self,
        prompt: &TeacherPrompt,
        params: &GenerationParams,
        n: usize,
        first_index: usize,
    ) -> Result<Vec<String>> {
        let mut req = ChatRequest::new(prompt, &self.model, params, n);
        req.first_index = first_index;
        let mut texts = self.provider.complete(&req)?;
        texts.truncate(n);
        Ok(texts)
    }

    /// Fetches `n` raw texts, falling back to one-choice requests when the
    /// endpoint returns fewer choices than asked for.
    fn fetch(&self, prompt: &TeacherPrompt, params: &GenerationParams, n: usize) -> Result<Vec<String>> {
        let mut texts = match params.sampling {
            SamplingMode::NSampling => self.request(prompt, params, n, 0)?,
            SamplingMode::Independent => Vec::with_capacity(n),
        };
        while texts.len() < n {
            let got = self.request(prompt, params, 1, texts.len())?;
            if got.is_empty() {
                return Err(Error::Provider("endpoint returned no choices".into()));
            }
            texts.extend(got);
        }
        let mut texts: Vec<String> = texts.into_iter().map(|t| t.trim().to_string()).collect();

        // Empty completions get one retry each.
        for (i, text) in texts.iter_mut().enumerate() {
            if text.is_empty() {
                let retry = self.request(prompt, params, 1, i)?;
                *text = retry.into_iter().next().unwrap_or_default().trim().to_string();
                if text.is_empty() {
                    return Err(Error::EmptyReasoning {
                        prompt_hash: prompt.prompt_hash(),
                    });
                }
            }
        }
        Ok(texts)
    }

    /// `n` candidates for `prompt`, served from cache when available.
    pub fn generate_n(
        &self,
        prompt: &TeacherPrompt,
        params: &GenerationParams,
        n: usize,
        source: CandidateSource,
    ) -> Result<Vec<ReasoningCandidate>> {
        let key = self.cache_key(prompt, params, n)?;
        let cached = self.cache.as_ref().and_then(|c| c.get::<Vec<String>>(&key));
        let texts = match cached {
            Some(texts) if texts.len() == n => texts,
            _ => {
                let texts = self.fetch(prompt, params, n)?;
                if let Some(cache) = &self.cache {
                    cache.put(&key, &texts)?;
                }
                texts
            }
        };
        let prompt_hash = prompt.prompt_hash();
        Ok(texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| ReasoningCandidate {
                text,
                source,
                candidate_index: i,
                prompt_hash: prompt_hash.clone(),
            })
            .collect())
    }

    /// `params.n_samples` positive candidates for `prompt`.
    pub fn generate(
        &self,
        prompt: &TeacherPrompt,
        params: &GenerationParams,
    ) -> Result<Vec<ReasoningCandidate>> {
        self.generate_n(prompt, params, params.n_samples, CandidateSource::Positive)
    }

    /// Generates candidates for every query with at most `parallelism`
    /// requests in flight. Results follow input order. A failed positive
    /// prompt fails its query; failed perturbed prompts are recorded in the
    /// candidate set and the query proceeds.
    pub fn generate_batch(
        &self,
        queries: &[QueryPrompts],
        params: &GenerationParams,
        parallelism: usize,
    ) -> Vec<Result<CandidateSet>> {
        enum Job<'a> {
            Positive(&'a TeacherPrompt),
            Perturbed(&'a TeacherPrompt),
        }
        let mut jobs = Vec::new();
        for q in queries {
            jobs.push(Job::Positive(&q.positive));
            jobs.extend(q.perturbed.iter().map(Job::Perturbed));
        }
        let mut results = bounded_map(&jobs, parallelism, |job| match job {
            Job::Positive(p) => self.generate(p, params),
            Job::Perturbed(p) => self.generate_n(p, params, 1, CandidateSource::Perturbed),
        })
        .into_iter();

        queries
            .iter()
            .map(|q| {
                let positives = results.next().expect("one result per job");
                let mut perturbed = Vec::new();
                let mut failures = Vec::new();
                for (k, _) in q.perturbed.iter().enumerate() {
                    match results.next().expect("one result per job") {
                        Ok(mut c) => {
                            let mut cand = c.remove(0);
                            cand.candidate_index = k;
                            perturbed.push(cand);
                        }
                        Err(e) => failures.push(format!("perturbed prompt {k}: {e}")),
                    }
                }
                Ok(CandidateSet {
                    positives: positives?,
                    perturbed,
                    perturbed_failures: failures,
                })
            })
            .collect()
    }
}
