//! Text primitives: normalization, tokenization, longest common subsequence,
//! and Rouge-L F1. Everything here is pure and dependency-light so the same
//! code backs reward scoring, hit checks, and the stub embedder.

use unicode_normalization::UnicodeNormalization;

/// An ordered list of normalized tokens. Construction guarantees no empty
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Builds a sequence from pre-split tokens, dropping empty strings.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        TokenSequence(tokens.into_iter().filter(|t| !t.is_empty()).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

/// Lowercases, NFC-normalizes, strips punctuation and symbols, and collapses
/// whitespace to single spaces. Idempotent; empty input yields empty output.
///
/// Characters that are neither alphanumeric nor whitespace are removed
/// without leaving a gap, so "Hello, WORLD!" becomes "hello world" and CJK
/// text passes through unchanged. NFC runs again after filtering so that
/// removing a character can never leave a composable pair behind.
pub fn normalize_text(raw: &str) -> String {
    let lowered = raw.nfc().collect::<String>().to_lowercase();
    let filtered: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let recomposed: String = filtered.nfc().collect();
    recomposed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True for scripts whose words are not whitespace-delimited; these are
/// split into single-character tokens.
fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3400}'..='\u{4DBF}'     // CJK extension A
        | '\u{4E00}'..='\u{9FFF}'   // CJK unified ideographs
        | '\u{F900}'..='\u{FAFF}'   // CJK compatibility ideographs
        | '\u{3040}'..='\u{30FF}'   // hiragana + katakana
        | '\u{AC00}'..='\u{D7AF}'   // hangul syllables
    )
}

/// Normalizes and splits text into tokens: whitespace-delimited words, with
/// contiguous CJK characters split into single-character tokens.
pub fn tokenize(text: &str) -> TokenSequence {
    let normalized = normalize_text(text);
    let mut tokens = Vec::new();
    for word in normalized.split_whitespace() {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    tokens.push(std::mem::take(&mut run));
                }
                tokens.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            tokens.push(run);
        }
    }
    TokenSequence(tokens)
}

/// Length of the longest common subsequence between two token sequences.
/// Symmetric, bounded by min(|a|, |b|). Two-row dynamic program, O(|a|·|b|).
pub fn lcs_length(a: &TokenSequence, b: &TokenSequence) -> usize {
    let (a, b) = (a.tokens(), b.tokens());
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Rouge-L F1 between a prediction and a reference: P = LCS/|pred|,
/// R = LCS/|ref|, F1 = 2PR/(P+R). Returns 0 when either side is empty or
/// the sequences share no subsequence.
pub fn rouge_l_f1(pred: &TokenSequence, reference: &TokenSequence) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(pred, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / pred.len() as f64;
    let recall = lcs / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens(tokens.iter().map(|t| t.to_string()))
    }

    /// Exponential brute-force LCS used as an independent oracle: walks every
    /// subsequence of `a` and keeps the longest that is also a subsequence
    /// of `b`.
    pub(crate) fn lcs_brute_force(a: &[String], b: &[String]) -> usize {
        fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
            let mut it = hay.iter();
            needle.iter().all(|n| it.any(|h| h == *n))
        }
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let picked: Vec<&String> = a
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, t)| t)
                .collect();
            if picked.len() > best && is_subsequence(&picked, b) {
                best = picked.len();
            }
        }
        best
    }

    #[test]
    fn normalize_strips_case_punctuation_whitespace() {
        assert_eq!(normalize_text("  Hello,  WORLD! "), "hello world");
    }

    #[test]
    fn normalize_empty_is_empty() {
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn normalize_passes_cjk_through() {
        assert_eq!(normalize_text("AI 训练师"), "ai 训练师");
    }

    #[test]
    fn tokenize_splits_on_whitespace() {
        assert_eq!(tokenize("hello world").tokens(), ["hello", "world"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_splits_cjk_per_character() {
        assert_eq!(tokenize("ai 训练师").tokens(), ["ai", "训", "练", "师"]);
        // mixed latin/CJK inside one whitespace word
        assert_eq!(tokenize("gpt模型x").tokens(), ["gpt", "模", "型", "x"]);
    }

    #[test]
    fn lcs_identical_and_disjoint() {
        assert_eq!(lcs_length(&seq(&["a", "b", "c"]), &seq(&["a", "b", "c"])), 3);
        assert_eq!(lcs_length(&seq(&["a", "b", "c"]), &seq(&["x", "y"])), 0);
    }

    #[test]
    fn lcs_matches_brute_force_fixture() {
        // brute force over (["a","b","c","d"], ["b","d","a"]) gives 2
        let a = seq(&["a", "b", "c", "d"]);
        let b = seq(&["b", "d", "a"]);
        assert_eq!(lcs_brute_force(a.tokens(), b.tokens()), 2);
        assert_eq!(lcs_length(&a, &b), 2);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let x = seq(&["a", "b", "c"]);
        assert_eq!(rouge_l_f1(&x, &x), 1.0);
        assert_eq!(rouge_l_f1(&x, &seq(&["p", "q"])), 0.0);
        assert_eq!(rouge_l_f1(&seq(&[]), &x), 0.0);
    }

    #[test]
    fn rouge_partial_overlap() {
        // P = 1, R = 0.5, F1 = 2/3
        let f1 = rouge_l_f1(&seq(&["a", "b"]), &seq(&["a", "b", "c", "d"]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "f1 = {f1}");
    }

    fn token_strategy(max_len: usize) -> impl Strategy<Value = TokenSequence> {
        proptest::collection::vec("[a-e]{1,2}", 0..=max_len)
            .prop_map(TokenSequence::from_tokens)
    }

    proptest! {
        #[test]
        fn lcs_is_symmetric(a in token_strategy(20), b in token_strategy(20)) {
            prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
        }

        #[test]
        fn lcs_matches_brute_force(a in token_strategy(10), b in token_strategy(10)) {
            prop_assert_eq!(lcs_length(&a, &b), lcs_brute_force(a.tokens(), b.tokens()));
        }

        #[test]
        fn rouge_stays_in_unit_interval(a in token_strategy(20), b in token_strategy(20)) {
            let f1 = rouge_l_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn rouge_self_is_one(a in token_strategy(20)) {
            prop_assume!(!a.is_empty());
            prop_assert_eq!(rouge_l_f1(&a, &a), 1.0);
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
