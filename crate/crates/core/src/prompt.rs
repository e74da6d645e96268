//! Rendering class labels into natural-language prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::vocab::ClassVocabulary;

pub const PLACEHOLDER: &str = "{labels}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    id: String,
    pattern: String,
}

impl PromptTemplate {
    /// Fails unless `pattern` contains `{labels}` exactly once.
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let (id, pattern) = (id.into(), pattern.into());
        let count = pattern.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Template(format!(
                "template {id:?} must contain {PLACEHOLDER} exactly once, found {count}"
            )));
        }
        Ok(Self { id, pattern })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub labels: Vec<String>,
    pub template_id: String,
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    [
        ("photo", "a photo of {labels}"),
        ("picture", "a picture of {labels}"),
        ("bare", "{labels}"),
        ("image", "an image containing {labels}"),
        ("scene", "a scene with {labels}"),
    ]
    .into_iter()
    .map(|(id, p)| PromptTemplate::new(id, p).expect("builtin template is well formed"))
    .collect()
}

/// Looks up a builtin template by id.
pub fn builtin_template(id: &str) -> Result<PromptTemplate> {
    builtin_templates()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Template(format!("unknown template id {id:?}")))
}

/// Joins labels as `a, b, … and z` and substitutes them into the template.
///
/// Labels are trimmed; empty labels and labels containing commas are rejected.
/// Duplicates are rendered as given.
pub fn render_prompt<S: AsRef<str>>(labels: &[S], template: &PromptTemplate) -> Result<RenderedPrompt> {
    if labels.is_empty() {
        return Err(Error::Argument("cannot render a prompt from zero labels".into()));
    }
    let mut cleaned = Vec::with_capacity(labels.len());
    for l in labels {
        let l = l.as_ref().trim();
        if l.is_empty() {
            return Err(Error::Argument("empty label".into()));
        }
        if l.contains(',') {
            return Err(Error::Argument(format!("label {l:?} contains a comma")));
        }
        cleaned.push(l.to_string());
    }
    let joined = match cleaned.as_slice() {
        [only] => only.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
        [] => unreachable!(),
    };
    Ok(RenderedPrompt {
        text: template.pattern.replacen(PLACEHOLDER, &joined, 1),
        labels: cleaned,
        template_id: template.id.clone(),
    })
}

/// One single-label prompt per class, in vocabulary order.
pub fn render_class_prompts(vocab: &ClassVocabulary, template: &PromptTemplate) -> Result<Vec<RenderedPrompt>> {
    if vocab.is_empty() {
        return Err(Error::Argument("empty vocabulary".into()));
    }
    vocab.names().map(|name| render_prompt(&[name], template)).collect()
}
