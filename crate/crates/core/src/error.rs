use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HcpError>;

/// A single layer-level mismatch found while attaching HcP parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMismatch {
    pub layer: String,
    pub reason: String,
}

/// Every mismatch between a checkpoint and a target backbone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatibilityReport {
    pub mismatches: Vec<LayerMismatch>,
}

impl CompatibilityReport {
    pub fn is_empty(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn push(&mut self, layer: impl Into<String>, reason: impl Into<String>) {
        self.mismatches.push(LayerMismatch {
            layer: layer.into(),
            reason: reason.into(),
        });
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.mismatches.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", m.layer, m.reason)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HcpError {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("extractor contract violated: {0}")]
    Contract(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(CompatibilityReport),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("freeze guard violation: parameter block `{0}` changed")]
    FreezeViolation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl HcpError {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        HcpError::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HcpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
