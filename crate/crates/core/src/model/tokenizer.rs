//! Word-level tokenizer over the closed prompt-template vocabulary.
//!
//! Encoding is greedy longest-match, so multi-character word tokens win over
//! their prefixes and any in-vocabulary text round-trips exactly
//! (`decode(encode(s)) == s`). Digits, whitespace, and punctuation are
//! single-character tokens, which is what grammar masking needs to steer
//! individual rate digits. Unknown input consumes one character as `<unk>`.

use serde::{Deserialize, Serialize};

/// Token id type. The vocabulary is small; `u32` leaves headroom.
pub type TokenId = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    unk_id: TokenId,
    eos_id: TokenId,
}

/// Words appearing in the prompt templates, contrast frames, and grammars.
const WORDS: &[&str] = &[
    "You", "are", "a", "loan", "officer", "you", "must", "arrive", "at", "specific", "decision",
    "reviewing", "mortgage", "application", "A", "man", "walked", "into", "the", "bank", "to",
    "obtain", "His", "credit", "score", "is", "What", "interest", "rate", "should", "he", "be",
    "offered", "Should", "approved", "The", "applicant", "s", "profile", "includes", "Income",
    "Loan", "Amount", "Credit", "Score", "Value", "Ratio", "Debt", "Race", "Alma", "Mater",
    "who", "attended", "Black", "white", "Latino", "Howard", "Brigham", "Young", "University",
    "yes", "no", "with", "good", "bad", "applied", "for", "was", "rejected", "of",
];

const CHARS: &[char] = &[
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', ' ', '\n', '.', ',', '?', '%', '$', ':',
    '-', '\'', '(', ')',
];

impl Tokenizer {
    /// The standard closed vocabulary used by every in-repo model.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = vec!["<unk>".into(), "<eos>".into()];
        tokens.extend(WORDS.iter().map(|w| (*w).to_string()));
        tokens.extend(CHARS.iter().map(|c| c.to_string()));
        Self {
            tokens,
            unk_id: 0,
            eos_id: 1,
        }
    }

    /// Rebuild from an explicit token list (weights-file loading).
    pub fn from_tokens(tokens: Vec<String>, unk_id: TokenId, eos_id: TokenId) -> Self {
        Self {
            tokens,
            unk_id,
            eos_id,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Surface text of a token (empty for specials).
    pub fn token_text(&self, id: usize) -> &str {
        if self.is_special(id) {
            ""
        } else {
            &self.tokens[id]
        }
    }

    pub fn is_special(&self, id: usize) -> bool {
        id as TokenId == self.unk_id || id as TokenId == self.eos_id
    }

    /// Id of an exact token string, if present.
    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == text).map(|i| i as TokenId)
    }

    /// Greedy longest-match encoding. Unmatched characters become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut best: Option<(usize, TokenId)> = None;
            for (id, tok) in self.tokens.iter().enumerate() {
                if self.is_special(id) || tok.is_empty() {
                    continue;
                }
                let tok_chars: Vec<char> = tok.chars().collect();
                if tok_chars.len() > chars.len() - pos {
                    continue;
                }
                if chars[pos..pos + tok_chars.len()] == tok_chars[..] {
                    // Word tokens must end at a word boundary so "not" never
                    // tokenizes as "no" + "t".
                    let is_word = tok_chars.iter().all(|c| c.is_alphanumeric());
                    if is_word && tok_chars.len() > 1 {
                        if let Some(next) = chars.get(pos + tok_chars.len()) {
                            if next.is_alphanumeric() {
                                continue;
                            }
                        }
                    }
                    if best.is_none_or(|(len, _)| tok_chars.len() > len) {
                        best = Some((tok_chars.len(), id as TokenId));
                    }
                }
            }
            match best {
                Some((len, id)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(self.unk_id);
                    pos += 1;
                }
            }
        }
        out
    }

    /// Concatenate token texts. Specials render as empty strings.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token_text(id as usize))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_template_text() {
        let t = Tokenizer::standard();
        let samples = [
            "You are a loan officer, you must arrive at a specific decision",
            "A Black man walked into the bank to obtain a loan. His credit score is 745.",
            "- Income: $122,000\n- Loan-to-Value Ratio: 76%",
            "What interest rate should he be offered?",
            "A man who attended Brigham Young University walked into the bank",
            "4.25",
            "yes",
        ];
        for s in samples {
            assert_eq!(t.decode(&t.encode(s)), s, "round trip failed for {s:?}");
        }
    }

    #[test]
    fn digits_are_single_tokens() {
        let t = Tokenizer::standard();
        let ids = t.encode("745");
        assert_eq!(ids.len(), 3);
        for (id, d) in ids.iter().zip(["7", "4", "5"]) {
            assert_eq!(t.token_text(*id as usize), d);
        }
    }

    #[test]
    fn counterfactual_pair_differs_at_one_token() {
        let t = Tokenizer::standard();
        let a = t.encode("A Black man walked");
        let b = t.encode("A white man walked");
        assert_eq!(a.len(), b.len());
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diffs.len(), 1);
    }

    #[test]
    fn unknown_text_maps_to_unk() {
        let t = Tokenizer::standard();
        let ids = t.encode("zebra");
        assert!(ids.iter().any(|&id| id == t.unk_id()));
    }

    #[test]
    fn word_boundary_respected() {
        let t = Tokenizer::standard();
        // "no" must not match inside an unknown longer word.
        let ids = t.encode("no");
        assert_eq!(ids.len(), 1);
        assert_eq!(t.token_text(ids[0] as usize), "no");
    }
}
