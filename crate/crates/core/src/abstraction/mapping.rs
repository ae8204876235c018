use std::fmt;
use std::str::FromStr;

use super::{AbstractionError, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Var,
    Method,
    Type,
    String,
    Char,
    Int,
    Float,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Var,
        Category::Method,
        Category::Type,
        Category::String,
        Category::Char,
        Category::Int,
        Category::Float,
    ];

    pub fn of(kind: TokenKind) -> Option<Category> {
        Some(match kind {
            TokenKind::IdentVar => Category::Var,
            TokenKind::IdentMethod => Category::Method,
            TokenKind::IdentType => Category::Type,
            TokenKind::LitString => Category::String,
            TokenKind::LitChar => Category::Char,
            TokenKind::LitInt => Category::Int,
            TokenKind::LitFloat => Category::Float,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Var => "VAR",
            Category::Method => "METHOD",
            Category::Type => "TYPE",
            Category::String => "STRING",
            Category::Char => "CHAR",
            Category::Int => "INT",
            Category::Float => "FLOAT",
        }
    }

    pub fn id(self, index: usize) -> String {
        format!("{}_{index}", self.as_str())
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or(())
    }
}

/// Parses `CATEGORY_N` with N ≥ 1 and no leading zeros.
pub fn parse_abstract_id(token: &str) -> Option<(Category, usize)> {
    let (cat, num) = token.rsplit_once('_')?;
    let category = cat.parse().ok()?;
    if num.is_empty() || num.starts_with('0') || !num.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((category, num.parse().ok()?))
}

/// Per-category raw texts; entry `i` (0-based) is ID `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMapping {
    by_category: [Vec<String>; 7],
}

impl IdMapping {
    fn slot(category: Category) -> usize {
        category as usize
    }

    /// Appends a raw text and returns its 1-based index.
    pub fn push(&mut self, category: Category, raw: String) -> usize {
        let list = &mut self.by_category[Self::slot(category)];
        list.push(raw);
        list.len()
    }

    pub fn get(&self, category: Category, index: usize) -> Option<&str> {
        let list = &self.by_category[Self::slot(category)];
        index.checked_sub(1).and_then(|i| list.get(i)).map(String::as_str)
    }

    pub fn len(&self, category: Category) -> usize {
        self.by_category[Self::slot(category)].len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_category.iter().all(Vec::is_empty)
    }

    /// All `(category, index, raw)` entries in category order.
    pub fn entries(&self) -> impl Iterator<Item = (Category, usize, &str)> {
        Category::ALL.into_iter().flat_map(move |cat| {
            self.by_category[Self::slot(cat)]
                .iter()
                .enumerate()
                .map(move |(i, raw)| (cat, i + 1, raw.as_str()))
        })
    }

    /// Renders the `CATEGORY_N<TAB>raw` line format.
    pub fn to_map_file(&self) -> String {
        let mut out = String::new();
        for (cat, index, raw) in self.entries() {
            out.push_str(&cat.id(index));
            out.push('\t');
            out.push_str(raw);
            out.push('\n');
        }
        out
    }

    pub fn parse_map_file(text: &str) -> Result<Self, AbstractionError> {
        let mut mapping = IdMapping::default();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| AbstractionError::MalformedMapping {
                line: line_no,
                reason: reason.to_string(),
            };
            let (id, raw) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let (category, index) = parse_abstract_id(id).ok_or_else(|| bad("bad id"))?;
            if index != mapping.len(category) + 1 {
                return Err(bad("ids must be consecutive within a category"));
            }
            mapping.push(category, raw.to_string());
        }
        Ok(mapping)
    }
}
