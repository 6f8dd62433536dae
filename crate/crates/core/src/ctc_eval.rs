//! Transcript normalisation, the 28-symbol label alphabet, and text metrics
//! (Levenshtein distance, word and character error rates).
//!
//! The label alphabet has 28 entries: index 0 is the CTC blank, 1–26 are the
//! letters a–z, and 27 is the space. Apostrophes and anything else outside
//! the alphabet are dropped during normalisation.

use thiserror::Error;

/// CTC blank symbol index.
pub const BLANK: usize = 0;
/// Label index of the space character.
pub const SPACE_LABEL: usize = 27;
/// Total number of output symbols (blank + 26 letters + space).
pub const ALPHABET_SIZE: usize = 28;
/// Maximum label length accepted for a training transcript.
pub const MAX_LABEL_LEN: usize = 180;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("text is empty after normalisation")]
    EmptyAfterNormalise,
    #[error("reference side of a WER computation has no words")]
    EmptyReference,
}

/// A normalised transcript: lowercase a–z and single spaces, trimmed,
/// guaranteed non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transcript(String);

impl Transcript {
    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> Vec<&str> {
        self.0.split(' ').collect()
    }

    pub fn word_count(&self) -> usize {
        self.words().len()
    }

    /// Maps the transcript onto label indices (1..=27, no blanks).
    pub fn labels(&self) -> Vec<usize> {
        self.0.chars().map(|c| char_to_label(c).unwrap()).collect()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercases, drops characters outside [a-z ] (any whitespace counts as a
/// space), collapses whitespace runs, and trims.
pub fn normalise(text: &str) -> Result<Transcript, TextError> {
    let lowered = text.to_lowercase();
    let mapped: String = lowered
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| matches!(c, 'a'..='z' | ' '))
        .collect();
    let joined = mapped.split_whitespace().collect::<Vec<_>>().join(" ");
    if joined.is_empty() {
        return Err(TextError::EmptyAfterNormalise);
    }
    Ok(Transcript(joined))
}

/// Maps a character of the normalised alphabet to its label index.
pub fn char_to_label(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize + 1),
        ' ' => Some(SPACE_LABEL),
        _ => None,
    }
}

/// Inverse of [`char_to_label`]; `None` for the blank and out-of-range
/// indices.
pub fn label_to_char(label: usize) -> Option<char> {
    match label {
        1..=26 => Some((b'a' + (label - 1) as u8) as char),
        SPACE_LABEL => Some(' '),
        _ => None,
    }
}

/// Renders a label sequence (1..=27) back to text. Invalid indices are
/// skipped.
pub fn labels_to_text(labels: &[usize]) -> String {
    labels.iter().filter_map(|&l| label_to_char(l)).collect()
}

/// Levenshtein edit distance between two slices (two-row dynamic program).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur: Vec<usize> = vec![0; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            cur[j + 1] = (cur[j] + 1).min(prev[j + 1] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of a hypothesis against one reference transcript.
///
/// The hypothesis is a plain string because greedy decodes can legitimately
/// be empty; the reference is non-empty by construction. May exceed 1.0 when
/// the hypothesis inserts words.
pub fn word_error_rate(reference: &Transcript, hypothesis: &str) -> f64 {
    let ref_words = reference.words();
    let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
    levenshtein(&ref_words, &hyp_words) as f64 / ref_words.len() as f64
}

/// Corpus-level pooled WER: total edit distance over total reference words.
///
/// Pooling (rather than averaging per-utterance rates) keeps very short
/// references from dominating the metric.
pub fn pooled_wer<'a, I>(pairs: I) -> Result<f64, TextError>
where
    I: IntoIterator<Item = (&'a Transcript, &'a str)>,
{
    let mut distance = 0usize;
    let mut ref_words = 0usize;
    for (reference, hypothesis) in pairs {
        let r = reference.words();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        distance += levenshtein(&r, &h);
        ref_words += r.len();
    }
    if ref_words == 0 {
        return Err(TextError::EmptyReference);
    }
    Ok(distance as f64 / ref_words as f64)
}

/// Character error rate over the raw character sequences (spaces included).
pub fn character_error_rate(reference: &Transcript, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.text().chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    levenshtein(&r, &h) as f64 / r.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-matrix DP oracle, kept independent of the two-row implementation.
    fn levenshtein_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut d = vec![vec![0usize; m + 1]; n + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=m {
            d[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1)
                    .min(d[i][j - 1] + 1)
                    .min(d[i - 1][j - 1] + cost);
            }
        }
        d[n][m]
    }

    #[test]
    fn normalise_drops_case_punctuation_and_extra_spaces() {
        assert_eq!(normalise("The  CAT!").unwrap().text(), "the cat");
        assert_eq!(normalise("hello").unwrap().text(), "hello");
        assert_eq!(normalise("  a\tb\nc  ").unwrap().text(), "a b c");
        assert_eq!(normalise("???"), Err(TextError::EmptyAfterNormalise));
    }

    #[test]
    fn label_mapping_round_trips_the_alphabet() {
        assert_eq!(char_to_label('a'), Some(1));
        assert_eq!(char_to_label('z'), Some(26));
        assert_eq!(char_to_label(' '), Some(SPACE_LABEL));
        assert_eq!(char_to_label('\''), None);
        for label in 1..ALPHABET_SIZE {
            let c = label_to_char(label).unwrap();
            assert_eq!(char_to_label(c), Some(label));
        }
        assert_eq!(label_to_char(BLANK), None);
        let t = normalise("the cat").unwrap();
        assert_eq!(labels_to_text(&t.labels()), "the cat");
    }

    #[test]
    fn wer_frozen_examples() {
        let r = normalise("the cat sat").unwrap();
        assert_eq!(word_error_rate(&r, "the cat sat"), 0.0);
        assert!((word_error_rate(&r, "the bat sat") - 1.0 / 3.0).abs() < 1e-15);
        let r2 = normalise("a b").unwrap();
        // Two insertions over two reference words.
        assert_eq!(word_error_rate(&r2, "a x b y"), 1.0);
        // Empty hypothesis: every reference word deleted.
        assert_eq!(word_error_rate(&r2, ""), 1.0);
    }

    #[test]
    fn pooled_wer_pools_distances_not_rates() {
        let r1 = normalise("a").unwrap();
        let r2 = normalise("b c d e f g h i j").unwrap();
        // Per-utterance rates are 1.0 and 0.0; pooled is 1/10.
        let pairs = [(&r1, "x"), (&r2, "b c d e f g h i j")];
        let pooled = pooled_wer(pairs).unwrap();
        assert!((pooled - 0.1).abs() < 1e-15);
        assert_eq!(pooled_wer([]), Err(TextError::EmptyReference));
    }

    #[test]
    fn cer_counts_characters() {
        let r = normalise("abc").unwrap();
        assert!((character_error_rate(&r, "axc") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(character_error_rate(&r, ""), 1.0);
    }

    proptest! {
        #[test]
        fn distance_matches_oracle(
            a in proptest::collection::vec(0u8..5, 0..12),
            b in proptest::collection::vec(0u8..5, 0..12),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein_oracle(&a, &b));
        }

        #[test]
        fn distance_is_symmetric_and_triangular(
            a in proptest::collection::vec(0u8..4, 0..10),
            b in proptest::collection::vec(0u8..4, 0..10),
            c in proptest::collection::vec(0u8..4, 0..10),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn wer_of_identity_is_zero(words in proptest::collection::vec("[a-z]{1,6}", 1..8)) {
            let text = words.join(" ");
            let t = normalise(&text).unwrap();
            prop_assert_eq!(word_error_rate(&t, t.text()), 0.0);
        }
    }
}
