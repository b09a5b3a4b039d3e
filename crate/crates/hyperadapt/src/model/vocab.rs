use std::collections::HashMap;
use std::path::Path;

use super::{ModelError, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Reserved tokens occupy ids 0..5 in every vocabulary, in this order.
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Whitespace vocabulary with fixed reserved ids. Corpus tokens follow the
/// reserved block ordered by descending frequency, ties broken by token
/// text, so construction is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn lower_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

impl Vocab {
    /// Builds from an iterator of corpus lines. Tokens appearing fewer than
    /// `min_freq` times are dropped; `max_size` (if set) caps the total
    /// vocabulary including the reserved block.
    pub fn from_corpus<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Vocab {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in lower_tokens(line) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        for r in RESERVED_TOKENS {
            freq.remove(r);
        }
        let mut entries: Vec<(String, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for (tok, _) in entries {
            if let Some(cap) = max_size {
                if tokens.len() >= cap {
                    break;
                }
            }
            tokens.push(tok);
        }
        Self::from_tokens(tokens).expect("construction satisfies the reserved prefix")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(ModelError::Vocab(format!(
                    "token {i} must be the reserved {r:?}, got {:?}",
                    tokens.get(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens mapped to ids; unknowns become UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        lower_tokens(text).map(|t| self.id(&t)).collect()
    }

    /// Joins with single spaces, skipping every reserved token.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED_TOKENS.len() {
                continue;
            }
            if let Some(t) = self.token(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(t);
            }
        }
        out
    }

    /// One token per line, id = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }
}

/// `BOS + tokens(d) + SEP + tokens(s) + EOS`, truncating only the source so
/// the whole sequence fits in `max_len`. The description is never cut; if
/// it cannot fit with the three framing tokens, that is an error.
pub fn concat_input(
    vocab: &Vocab,
    description: &str,
    source: &str,
    max_len: usize,
) -> Result<Vec<usize>> {
    let d = vocab.tokenize(description);
    let needed = d.len() + 3;
    if needed > max_len {
        return Err(ModelError::InputTooLong { needed, max_len });
    }
    let mut s = vocab.tokenize(source);
    s.truncate(max_len - needed);
    let mut out = Vec::with_capacity(needed + s.len());
    out.push(BOS_ID);
    out.extend_from_slice(&d);
    out.push(SEP_ID);
    out.extend_from_slice(&s);
    out.push(EOS_ID);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vocab() -> Vocab {
        Vocab::from_corpus(["the cat sat on the mat", "the dog sat"], 1, None)
    }

    #[test]
    fn reserved_block_is_fixed() {
        let v = sample_vocab();
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            assert_eq!(v.token(i), Some(*r));
        }
        assert_eq!(PAD_ID, 0);
        assert_eq!(UNK_ID, 4);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        // "the" x3, "sat" x2, rest x1 in alphabetical order.
        let v = sample_vocab();
        assert_eq!(v.token(5), Some("the"));
        assert_eq!(v.token(6), Some("sat"));
        assert_eq!(v.token(7), Some("cat"));
        assert_eq!(v.token(8), Some("dog"));
        assert_eq!(v.token(9), Some("mat"));
        assert_eq!(v.token(10), Some("on"));
        assert_eq!(v.len(), 11);
    }

    #[test]
    fn tokenize_lowercases_and_maps_oov_to_unk() {
        let v = sample_vocab();
        let ids = v.tokenize("The CAT flew");
        assert_eq!(ids, vec![v.id("the"), v.id("cat"), UNK_ID]);
        assert_eq!(v.tokenize(""), Vec::<usize>::new());
    }

    #[test]
    fn detokenize_round_trip_and_strips_reserved() {
        let v = sample_vocab();
        let s = "the cat sat on the mat";
        assert_eq!(v.detokenize(&v.tokenize(s)), s);
        let with_reserved =
            [BOS_ID, v.id("cat"), SEP_ID, v.id("sat"), PAD_ID, UNK_ID, EOS_ID];
        assert_eq!(v.detokenize(&with_reserved), "cat sat");
        assert_eq!(v.detokenize(&[]), "");
    }

    #[test]
    fn save_load_round_trip(){
        let v = sample_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn load_rejects_broken_reserved_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<bos>\nword\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn min_freq_and_cap_apply() {
        let v = Vocab::from_corpus(["a a b"], 2, None);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
        let capped = Vocab::from_corpus(["a a b c d"], 1, Some(7));
        assert_eq!(capped.len(), 7);
    }

    #[test]
    fn concat_input_layout() {
        let v = sample_vocab();
        let ids = concat_input(&v, "cat", "dog", 64).unwrap();
        assert_eq!(ids, vec![BOS_ID, v.id("cat"), SEP_ID, v.id("dog"), EOS_ID]);
        let empty_source = concat_input(&v, "cat", "", 64).unwrap();
        assert_eq!(empty_source, vec![BOS_ID, v.id("cat"), SEP_ID, EOS_ID]);
    }

    #[test]
    fn concat_input_truncates_source_only() {
        let v = sample_vocab();
        let long_source = "the ".repeat(100);
        let ids = concat_input(&v, "cat sat", &long_source, 10).unwrap();
        assert_eq!(ids.len(), 10);
        // BOS d d SEP then as much source as fits, then EOS.
        assert_eq!(&ids[..4], &[BOS_ID, v.id("cat"), v.id("sat"), SEP_ID]);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        // Prefix ordering is preserved under a tighter budget.
        let tighter = concat_input(&v, "cat sat", &long_source, 8).unwrap();
        assert_eq!(&ids[..7], &tighter[..7]);
    }

    #[test]
    fn concat_input_rejects_oversize_description() {
        let v = sample_vocab();
        let err = concat_input(&v, "the cat sat on", "x", 6).unwrap_err();
        match err {
            ModelError::InputTooLong { needed, max_len } => {
                assert_eq!((needed, max_len), (7, 6));
            }
            other => panic!("wrong error: {other}"),
        }
    }
}
