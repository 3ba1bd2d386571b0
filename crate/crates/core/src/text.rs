//! Tokenization shared by the offline providers, summaries and dedup filters.
//!
//! A token is a maximal run of non-whitespace characters.

use std::collections::HashSet;

pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn lowercase_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn token_set(text: &str) -> HashSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercased, whitespace-collapsed form used for exact-duplicate checks.
pub fn normalize_for_dedup(text: &str) -> String {
    lowercase_tokens(text).join(" ")
}

/// Set of lowercase word n-grams. Texts shorter than `n` contribute one
/// shingle made of all their tokens.
pub fn word_ngrams(text: &str, n: usize) -> HashSet<String> {
    let tokens = lowercase_tokens(text);
    if tokens.is_empty() {
        return HashSet::new();
    }
    if tokens.len() < n {
        return HashSet::from([tokens.join(" ")]);
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

/// |A ∩ B| / |A ∪ B|; two empty sets score 0.
pub fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ngrams() {
        let g = word_ngrams("A b c D", 3);
        assert_eq!(g, HashSet::from(["a b c".to_string(), "b c d".to_string()]));
        assert_eq!(word_ngrams("a b", 3), HashSet::from(["a b".to_string()]));
        assert!(word_ngrams("  ", 3).is_empty());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_for_dedup("  Hello\n\tWORLD  "), "hello world");
    }
}
