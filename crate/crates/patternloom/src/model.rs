//! Deterministic scripted model backend.
//!
//! Stands in for a real LLM so every workflow is runnable and testable
//! offline: an ordered rule table maps prompt substrings to canned
//! responses, a seed drives an optional deterministic perturbation, and
//! the tokenizer is a fixed chars/4 counter.

use serde::{Deserialize, Serialize};

/// chars/4 rounded up; empty text counts zero.
pub fn tokenize(text: &str) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(4)
}

/// One scripted completion rule. First matching rule wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring matched against the prompt.
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
    /// When set, the response is padded or truncated to exactly this
    /// many tokens before max_tokens applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
    /// When true, a seed-derived suffix is appended so different seeds
    /// produce different (but individually deterministic) outputs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub perturb: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedModel {
    pub rules: Vec<ScriptRule>,
    #[serde(default = "default_fallback")]
    pub fallback: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_fallback() -> String {
    "no scripted response".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptRule>, fallback: impl Into<String>, seed: u64) -> Self {
        Self { rules, fallback: fallback.into(), seed }
    }

    pub fn empty(seed: u64) -> Self {
        Self { rules: Vec::new(), fallback: default_fallback(), seed }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Add a plain substring rule.
    pub fn rule(mut self, matcher: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            matcher: matcher.into(),
            response: response.into(),
            tokens: None,
            perturb: false,
        });
        self
    }

    pub fn complete(&self, prompt: &str, max_tokens: u64) -> Completion {
        assert!(max_tokens >= 1, "max_tokens must be at least 1");
        let tokens_in = tokenize(prompt);
        let matched = self.rules.iter().find(|r| prompt.contains(&r.matcher));
        let mut text = match matched {
            Some(rule) => {
                let mut t = rule.response.clone();
                if let Some(n) = rule.tokens {
                    t = fit_to_tokens(&t, n);
                }
                if rule.perturb {
                    t.push_str(&format!(" [s{:x}]", mix(self.seed, &rule.matcher)));
                }
                t
            }
            None => self.fallback.clone(),
        };
        if tokenize(&text) > max_tokens {
            text = text.chars().take((max_tokens * 4) as usize).collect();
        }
        let tokens_out = tokenize(&text);
        Completion { text, tokens_in, tokens_out }
    }
}

/// Pad with '.' or truncate so that tokenize(result) == n.
fn fit_to_tokens(text: &str, n: u64) -> String {
    let target_chars = (n * 4) as usize;
    let mut out: String = text.chars().take(target_chars).collect();
    while out.chars().count() < target_chars {
        out.push('.');
    }
    out
}

/// FNV-1a over seed bytes then the matcher; stable across platforms.
fn mix(seed: u64, salt: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(salt.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
