//! Term extraction and lexical overlap.
//!
//! A "term" is a lowercase token of more than 3 characters that survives
//! stop-word removal. The stop list is a fixed 127-word English list shipped
//! as a versioned data file; the tokenizer lowercases, strips every
//! non-alphanumeric character from each whitespace-split token, then filters.

use std::collections::BTreeSet;
use std::sync::OnceLock;

/// One word per line, 127 entries, stored without apostrophes to match the
/// punctuation-stripped token stream.
pub const STOPWORDS_RAW: &str = include_str!("../../data/stopwords.txt");

fn stopwords() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect())
}

/// Lowercase punctuation-stripped tokens, before the term filters. Shared
/// with the attribute lexicon so both see the same token stream.
pub fn clean_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn extract_terms(text: &str) -> BTreeSet<String> {
    clean_tokens(text)
        .into_iter()
        .filter(|w| w.chars().count() > 3 && !stopwords().contains(w.as_str()))
        .collect()
}

/// Source-term recall in the target: |terms(src) ∩ terms(tgt)| / |terms(src)|.
/// `None` when the source term set is empty — the ratio is undefined there
/// and must be excluded from aggregates rather than imputed.
pub fn lexical_overlap(source: &str, target: &str) -> Option<f64> {
    let s = extract_terms(source);
    if s.is_empty() {
        return None;
    }
    let t = extract_terms(target);
    let shared = s.intersection(&t).count();
    Some(shared as f64 / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_list_has_127_words() {
        assert_eq!(stopwords().len(), 127);
    }

    #[test]
    fn empty_text_gives_empty_terms() {
        assert!(extract_terms("").is_empty());
    }

    #[test]
    fn three_char_words_excluded() {
        // "car", "red", "van" all have exactly 3 chars; "the"/"and" stop-listed
        assert!(extract_terms("The car and the red van").is_empty());
    }

    #[test]
    fn hand_traced_term_set() {
        let terms = extract_terms("pedestrian crossing the road ahead");
        let expect: BTreeSet<String> = ["pedestrian", "crossing", "road", "ahead"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(terms, expect);
    }

    #[test]
    fn punctuation_stripped_and_lowercased() {
        let terms = extract_terms("Pedestrian, CROSSING!");
        assert!(terms.contains("pedestrian"));
        assert!(terms.contains("crossing"));
    }

    #[test]
    fn overlap_identical_disjoint_and_hand_case() {
        assert_eq!(
            lexical_overlap("pedestrian crossing ahead", "pedestrian crossing ahead"),
            Some(1.0)
        );
        assert_eq!(
            lexical_overlap("pedestrian crossing", "green signal holds"),
            Some(0.0)
        );
        // source {pedestrian, crossing, road, ahead} ∩ target {slow, down,
        // pedestrian} = {pedestrian} → 0.25
        assert_eq!(
            lexical_overlap("pedestrian crossing the road ahead", "slow down pedestrian"),
            Some(0.25)
        );
    }

    #[test]
    fn empty_source_is_absent_not_zero() {
        assert_eq!(lexical_overlap("", "anything here"), None);
        assert_eq!(lexical_overlap("the a an", "anything"), None);
    }
}
