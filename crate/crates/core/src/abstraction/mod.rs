//! Source code abstraction.
//!
//! A method is lexed, identifiers and literals that are not idioms are
//! replaced by positional IDs such as `VAR_1` or `STRING_2`, and the
//! replacement table is kept so the model's output can be turned back into
//! concrete code.

mod idioms;
mod lexer;
mod mapping;

pub use idioms::{build_idiom_table, IdiomTable, DEFAULT_IDIOM_CUTOFF};
pub use lexer::{is_keyword, lex_java, CodeToken, TokenKind};
pub use mapping::{parse_abstract_id, Category, IdMapping};

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AbstractionError {
    #[error("unterminated literal starting at byte offset {offset}")]
    UnterminatedLiteral { offset: usize },
    #[error("illegal character {ch:?} at byte offset {offset}")]
    IllegalCharacter { offset: usize, ch: char },
    #[error("idiom corpus is empty")]
    EmptyCorpus,
    #[error("cutoff fraction {0} outside (0, 1]")]
    InvalidCutoff(f64),
    #[error("abstract id {category}_{index} has no entry in the mapping")]
    UnresolvedId { category: Category, index: usize },
    #[error("malformed mapping line {line}: {reason}")]
    MalformedMapping { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractedMethod {
    pub tokens: Vec<String>,
    pub mapping: IdMapping,
}

impl AbstractedMethod {
    /// The abstract stream as a single space-separated line.
    pub fn to_line(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Replaces every non-idiom identifier and literal by its category ID.
///
/// IDs are numbered from 1 in order of first occurrence, independently per
/// category; a repeated raw text reuses its ID.
pub fn abstract_method(tokens: &[CodeToken], idioms: &IdiomTable) -> AbstractedMethod {
    let mut mapping = IdMapping::default();
    let mut assigned: HashMap<(Category, &str), usize> = HashMap::new();
    let out = tokens
        .iter()
        .map(|tok| {
            let Some(category) = Category::of(tok.kind) else {
                return tok.text.clone();
            };
            if idioms.contains(&tok.text) {
                return tok.text.clone();
            }
            let index = *assigned
                .entry((category, tok.text.as_str()))
                .or_insert_with(|| mapping.push(category, tok.text.clone()));
            category.id(index)
        })
        .collect();
    AbstractedMethod {
        tokens: out,
        mapping,
    }
}

/// Maps abstract IDs back to raw text; every other token passes through.
pub fn concretize<S: AsRef<str>>(
    abstract_tokens: &[S],
    mapping: &IdMapping,
) -> Result<Vec<String>, AbstractionError> {
    abstract_tokens
        .iter()
        .map(|tok| {
            let tok = tok.as_ref();
            match parse_abstract_id(tok) {
                Some((category, index)) => mapping
                    .get(category, index)
                    .map(str::to_string)
                    .ok_or(AbstractionError::UnresolvedId { category, index }),
                None => Ok(tok.to_string()),
            }
        })
        .collect()
}
