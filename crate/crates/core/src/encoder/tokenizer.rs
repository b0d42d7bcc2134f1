//! Whitespace tokenizer over a fixed word table with an out-of-vocabulary
//! fallback.

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const OOV_ID: usize = 2;
pub(crate) const RESERVED_TOKENS: usize = 3;

/// Fixed vocabulary: state descriptions, common template words and the
/// object categories the synthetic benchmark and the public 3D anomaly
/// datasets use.
const WORDS: &[&str] = &[
    "a", "photo", "of", "the", "perfect", "damaged", "normal", "abnormal", "good", "broken",
    "flawless", "defective", "object", "surface", "part", "item", "sphere", "box", "cylinder",
    "torus", "cone", "bagel", "cable", "gland", "carrot", "cookie", "dowel", "foam", "peach",
    "potato", "rope", "tire", "airplane", "candybar", "car", "chicken", "diamond", "duck", "fish",
    "gemstone", "seahorse", "shell", "starfish", "toffees",
];

/// Lowercase, split on whitespace, and map each word into the first
/// `vocab_size` slots of the table; words outside map to [`OOV_ID`].
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            let lower = w.to_lowercase();
            match WORDS.iter().position(|&v| v == lower) {
                Some(i) if RESERVED_TOKENS + i < vocab_size => RESERVED_TOKENS + i,
                _ => OOV_ID,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words_resolve() {
        let ids = tokenize("perfect sphere", 64);
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|&i| i >= RESERVED_TOKENS));
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn unknown_words_map_to_oov() {
        assert_eq!(tokenize("zzzz", 64), vec![OOV_ID]);
    }

    #[test]
    fn vocab_truncation_falls_back_to_oov() {
        // With a vocab of 4 only the first table word fits.
        assert_eq!(tokenize("a photo", 4), vec![3, OOV_ID]);
    }

    #[test]
    fn tokenization_is_case_insensitive() {
        assert_eq!(tokenize("Perfect", 64), tokenize("perfect", 64));
    }
}
