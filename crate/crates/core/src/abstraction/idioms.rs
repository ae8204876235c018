use std::collections::{BTreeSet, HashMap};

use super::{AbstractionError, CodeToken};

/// 0.005% of the frequency-ranked vocabulary.
pub const DEFAULT_IDIOM_CUTOFF: f64 = 0.00005;

/// Frequent identifiers and literals that are kept verbatim during abstraction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdiomTable {
    // Ranked order, most frequent first.
    ranked: Vec<String>,
    members: BTreeSet<String>,
}

impl IdiomTable {
    pub fn from_idioms(idioms: impl IntoIterator<Item = String>) -> Self {
        let mut table = IdiomTable::default();
        for idiom in idioms {
            if table.members.insert(idiom.clone()) {
                table.ranked.push(idiom);
            }
        }
        table
    }

    pub fn contains(&self, text: &str) -> bool {
        self.members.contains(text)
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(String::as_str)
    }

    /// One idiom per line in rank order.
    pub fn to_file(&self) -> String {
        self.ranked.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn parse_file(text: &str) -> Self {
        Self::from_idioms(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Keeps the `ceil(cutoff_fraction * distinct)` most frequent abstractable
/// tokens, ties broken lexicographically.
pub fn build_idiom_table(
    corpus: &[Vec<CodeToken>],
    cutoff_fraction: f64,
) -> Result<IdiomTable, AbstractionError> {
    if corpus.is_empty() {
        return Err(AbstractionError::EmptyCorpus);
    }
    if !(cutoff_fraction > 0.0 && cutoff_fraction <= 1.0) {
        return Err(AbstractionError::InvalidCutoff(cutoff_fraction));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten().filter(|t| t.kind.is_abstractable()) {
        *counts.entry(tok.text.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(AbstractionError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = ((cutoff_fraction * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
    Ok(IdiomTable::from_idioms(
        ranked.into_iter().take(keep).map(|(t, _)| t.to_string()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::lex_java;

    fn corpus_with_counts(counts: &[(&str, usize)]) -> Vec<Vec<CodeToken>> {
        counts
            .iter()
            .map(|(name, n)| {
                let src = vec![format!("{name} ;"); *n].join(" ");
                lex_java(&src).unwrap()
            })
            .collect()
    }

    #[test]
    fn keeps_most_frequent() {
        let corpus = corpus_with_counts(&[("tmp", 1), ("i", 50), ("size", 30)]);
        // 3 distinct tokens; ceil(0.6 * 3) = 2.
        let table = build_idiom_table(&corpus, 0.6).unwrap();
        assert_eq!(table.iter().collect::<Vec<_>>(), vec!["i", "size"]);
        assert!(!table.contains("tmp"));
    }

    #[test]
    fn ceil_keeps_at_least_one() {
        let corpus = corpus_with_counts(&[("only", 3)]);
        let table = build_idiom_table(&corpus, DEFAULT_IDIOM_CUTOFF).unwrap();
        assert_eq!(table.iter().collect::<Vec<_>>(), vec!["only"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let corpus = corpus_with_counts(&[("b", 2), ("a", 2), ("c", 2)]);
        let table = build_idiom_table(&corpus, 0.5).unwrap();
        assert_eq!(table.iter().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn keywords_are_not_candidates() {
        let corpus = vec![lex_java("return return return x ;").unwrap()];
        let table = build_idiom_table(&corpus, 1.0).unwrap();
        assert_eq!(table.iter().collect::<Vec<_>>(), vec!["x"]);
    }

    #[test]
    fn errors() {
        assert_eq!(build_idiom_table(&[], 0.5), Err(AbstractionError::EmptyCorpus));
        let corpus = corpus_with_counts(&[("a", 1)]);
        assert!(matches!(
            build_idiom_table(&corpus, 0.0),
            Err(AbstractionError::InvalidCutoff(_))
        ));
        assert!(matches!(
            build_idiom_table(&corpus, 1.5),
            Err(AbstractionError::InvalidCutoff(_))
        ));
    }

    #[test]
    fn file_format_round_trip() {
        let table = IdiomTable::from_idioms(["i".to_string(), "size".to_string(), "0".to_string()]);
        assert_eq!(table.to_file(), "i\nsize\n0\n");
        assert_eq!(IdiomTable::parse_file(&table.to_file()), table);
    }
}
