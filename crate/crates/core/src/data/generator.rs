//! Prompt → text generators.

use super::synth::{Difficulty, QuestionType, STAGE1_PREFIX, STAGE2_PREFIX};
use crate::encoder::fnv1a64;
use crate::error::Result;
use crate::numeric::{splitmix64, Seed};

/// A single blocking prompt → reply call. Implementations must either
/// return or fail; remote clients enforce a timeout.
pub trait GeneratorClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String>;
}

/// Wraps a closure; handy for tests and scripted replies.
pub struct FnGenerator<F>(pub F);

impl<F> GeneratorClient for FnGenerator<F>
where
    F: Fn(&str) -> Result<String> + Send + Sync,
{
    fn generate(&self, prompt: &str) -> Result<String> {
        (self.0)(prompt)
    }
}

/// Offline deterministic stand-in for an LLM.
///
/// Stage-one prompts get a persona picked by a seeded hash of the prompt, with
/// question type and difficulty derived from further bits of the same hash.
/// Stage-two prompts get a query made of the passage's most frequent words,
/// cycled to the requested length.
#[derive(Debug, Clone, Copy)]
pub struct MockGenerator {
    seed: Seed,
}

impl MockGenerator {
    pub fn new(seed: Seed) -> Self {
        MockGenerator { seed }
    }

    fn hash(&self, prompt: &str) -> u64 {
        splitmix64(self.seed.0 ^ fnv1a64(prompt.as_bytes()))
    }

    fn configure(&self, prompt: &str) -> String {
        let characters: Vec<&str> = section(prompt, "**Character**:\n", None)
            .unwrap_or("")
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .collect();
        if characters.is_empty() {
            return "{}".into();
        }
        let h = self.hash(prompt);
        let character = characters[(h % characters.len() as u64) as usize];
        let qt = QuestionType::ALL[((h >> 20) % 5) as usize];
        let diff = Difficulty::ALL[((h >> 40) % 3) as usize];
        serde_json::json!({
            "Character": character,
            "Question_Type": qt.as_str(),
            "Difficulty": diff.as_str(),
        })
        .to_string()
    }

    fn query(&self, prompt: &str) -> String {
        let passage = section(prompt, "**Passage**\n", Some("\n**Requirment**")).unwrap_or("");
        let length = section(prompt, "should be ", Some(" words"))
            .and_then(|s| s.trim().parse::<usize>().ok())
            .unwrap_or(5)
            .max(1);
        let words = top_words(passage);
        if words.is_empty() {
            return "{}".into();
        }
        let query: Vec<&str> = words.iter().cycle().take(length).map(String::as_str).collect();
        serde_json::json!({ "Query": query.join(" ") }).to_string()
    }
}

impl GeneratorClient for MockGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        Ok(if prompt.starts_with(STAGE1_PREFIX) {
            self.configure(prompt)
        } else if prompt.starts_with(STAGE2_PREFIX) {
            self.query(prompt)
        } else {
            "{}".into()
        })
    }
}

fn section<'a>(text: &'a str, start: &str, end: Option<&str>) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(match end {
        Some(e) => &rest[..rest.find(e)?],
        None => rest,
    })
}

/// Distinct lowercase words by descending frequency, ties by first occurrence.
fn top_words(text: &str) -> Vec<String> {
    let mut order: Vec<(String, usize)> = Vec::new();
    for w in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() > 2)
        .map(str::to_lowercase)
    {
        match order.iter_mut().find(|(x, _)| *x == w) {
            Some(e) => e.1 += 1,
            None => order.push((w, 1)),
        }
    }
    // stable sort keeps first-occurrence order among equal counts
    order.sort_by_key(|e| std::cmp::Reverse(e.1));
    order.into_iter().map(|(w, _)| w).collect()
}

#[cfg(feature = "remote")]
pub use remote::{RemoteGenerator, TOKEN_ENV};

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use super::GeneratorClient;
    use crate::error::{Error, Result};

    pub const TOKEN_ENV: &str = "QEMBED_GENERATOR_TOKEN";

    /// HTTP client: POSTs `{"prompt": ...}` and expects `{"text": ...}`.
    /// A bearer token is read from `QEMBED_GENERATOR_TOKEN` when set.
    pub struct RemoteGenerator {
        endpoint: String,
        token: Option<String>,
        agent: ureq::Agent,
    }

    impl RemoteGenerator {
        pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
            let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
            Self::with_token(endpoint, token, timeout)
        }

        pub fn with_token(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            RemoteGenerator {
                endpoint: endpoint.into(),
                token,
                agent,
            }
        }
    }

    #[derive(serde::Deserialize)]
    struct Reply {
        text: String,
    }

    impl GeneratorClient for RemoteGenerator {
        fn generate(&self, prompt: &str) -> Result<String> {
            let mut req = self.agent.post(&self.endpoint);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            let fail = |e: ureq::Error| Error::Generation {
                attempts: 1,
                message: format!("{}: {e}", self.endpoint),
                last_reply: String::new(),
            };
            let mut resp = req.send_json(serde_json::json!({ "prompt": prompt })).map_err(fail)?;
            let reply: Reply = resp.body_mut().read_json().map_err(fail)?;
            Ok(reply.text)
        }
    }
}
