//! Vector algebra in the joint text–image embedding space and neutral prompt
//! rendering.

use std::fmt;
use std::path::Path;

use crate::autodiff::{dot, l2_norm, NORM_FLOOR};
use crate::error::{check_dim, Error, Result};

/// A finite vector in the joint embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding(Vec<f64>);

impl ClipEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::BadDims("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BackendFailure("non-finite embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ClipEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Where one end of a [`Direction`] came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tag {
    Text(String),
    Image(String),
    Unlabelled,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Text(s) => write!(f, "text:{s}"),
            Tag::Image(s) => write!(f, "image:{s}"),
            Tag::Unlabelled => f.write_str("-"),
        }
    }
}

/// `target − source` in embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
    pub source: Tag,
    pub target: Tag,
}

impl Direction {
    pub fn unlabelled(values: Vec<f64>) -> Self {
        Self {
            values,
            source: Tag::Unlabelled,
            target: Tag::Unlabelled,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("cosine_similarity", a.len(), b.len())?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::ZeroVector("cosine_similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if !(n >= NORM_FLOOR) {
        return Err(Error::ZeroVector("normalize"));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

pub fn direction(src: &ClipEmbedding, dst: &ClipEmbedding) -> Result<Direction> {
    direction_tagged(src, Tag::Unlabelled, dst, Tag::Unlabelled)
}

pub fn direction_tagged(
    src: &ClipEmbedding,
    source: Tag,
    dst: &ClipEmbedding,
    target: Tag,
) -> Result<Direction> {
    check_dim("direction", src.dim(), dst.dim())?;
    Ok(Direction {
        values: dst.0.iter().zip(&src.0).map(|(d, s)| d - s).collect(),
        source,
        target,
    })
}

pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a {}.",
    "an image of a {}.",
    "a picture of a {}.",
    "a cropped photo of a {}.",
    "a close-up photo of a {}.",
    "a good photo of a {}.",
    "a photo of one {}.",
    "a bright photo of a {}.",
];

/// Neutral prompts obtained by substituting a class token into templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub class_token: String,
    pub templates: Vec<String>,
    pub rendered: Vec<String>,
}

impl PromptSet {
    /// The prompt rendered with the first template.
    pub fn canonical(&self) -> &str {
        &self.rendered[0]
    }
}

pub fn render_prompts<S: AsRef<str>>(class_token: &str, templates: &[S]) -> Result<PromptSet> {
    if class_token.is_empty() {
        return Err(Error::BadTemplate {
            template: String::new(),
            found: 0,
        });
    }
    if templates.is_empty() {
        return Err(Error::BadDims("at least one template is required".into()));
    }
    let mut rendered = Vec::with_capacity(templates.len());
    for t in templates {
        let t = t.as_ref();
        let found = t.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::BadTemplate {
                template: t.to_string(),
                found,
            });
        }
        rendered.push(t.replacen(PLACEHOLDER, class_token, 1));
    }
    Ok(PromptSet {
        class_token: class_token.to_string(),
        templates: templates.iter().map(|t| t.as_ref().to_string()).collect(),
        rendered,
    })
}

/// Reads one template per line; blank lines are skipped.
pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let templates: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    for t in &templates {
        let found = t.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::BadTemplate {
                template: t.clone(),
                found,
            });
        }
    }
    if templates.is_empty() {
        return Err(Error::BadDims(format!(
            "template file {} is empty",
            path.display()
        )));
    }
    Ok(templates)
}
