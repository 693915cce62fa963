//! Errors shared by the JSON config loaders, with source positions.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{id}` at line {line}: {message}")]
    Validation { id: String, line: usize, message: String },
}

impl ConfigError {
    pub fn line(&self) -> usize {
        match self {
            ConfigError::Parse { line, .. } | ConfigError::Validation { line, .. } => *line,
        }
    }

    pub(crate) fn from_json(err: &serde_json::Error) -> Self {
        let message = err.to_string();
        // serde_json appends " at line L column C"; keep only the message part
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        ConfigError::Parse { line: err.line().max(1), column: err.column(), message }
    }

    /// Duplicate `id`, positioned at its second declaration.
    pub(crate) fn duplicate(source: &str, id: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation { id: id.to_string(), line: locate_nth(source, id, 1), message: message.into() }
    }

    /// Validation error positioned at the first line declaring `"id": "<id>"`
    /// (falls back to any mention of the quoted id, then line 1).
    pub(crate) fn validation(source: &str, id: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            id: id.to_string(),
            line: locate_id(source, id),
            message: message.into(),
        }
    }
}

pub(crate) fn locate_id(source: &str, id: &str) -> usize {
    locate_nth(source, id, 0)
}

/// Line of the `nth` (0-based) declaration of `id`, else of the first.
fn locate_nth(source: &str, id: &str, nth: usize) -> usize {
    let quoted = format!("\"{id}\"");
    let mut declared = source.lines().enumerate().filter(|(_, l)| {
        l.contains(&quoted) && l.split(&quoted).next().is_some_and(|pre| pre.contains("\"id\""))
    });
    let first = declared.next().map(|(i, _)| i);
    let nth = if nth == 0 { first } else { declared.nth(nth - 1).map(|(i, _)| i).or(first) };
    nth.or_else(|| source.lines().position(|l| l.contains(&quoted))).map_or(1, |i| i + 1)
}

/// Parses JSON with positioned errors.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(source: &str) -> Result<T, ConfigError> {
    serde_json::from_str(source).map_err(|e| ConfigError::from_json(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_declaring_line() {
        let src = "{\n  \"ref\": \"a\",\n  \"id\": \"a\"\n}";
        assert_eq!(locate_id(src, "a"), 3);
        assert_eq!(locate_id(src, "zzz"), 1);
        let dup = "{\"id\": \"a\"}\n{\"id\": \"b\"}\n{\"id\": \"a\"}";
        assert_eq!(locate_nth(dup, "a", 1), 3);
        assert_eq!(locate_nth(dup, "b", 1), 2);
    }

    #[test]
    fn json_errors_carry_positions() {
        let err = parse_json::<serde_json::Value>("{\n  \"a\": ,\n}").unwrap_err();
        assert_eq!(err.line(), 2);
        assert!(!err.to_string().contains(" at line 2 column"));
    }
}
