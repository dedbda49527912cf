//! Byte-level BPE with three reserved ids (EOS, PAD, SEP) at the top of the range.
//!
//! Ids `0..256` are raw bytes, `256..256 + merges` are learned merges in priority
//! order, and the last three ids are the specials. Any byte string is encodable,
//! so `decode(encode(text)) == text` for every UTF-8 input.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

pub const BYTE_TOKENS: usize = 256;
pub const NUM_SPECIALS: usize = 3;
const FILE_HEADER: &str = "palign-bpe 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    tokens: Vec<Vec<u8>>,
}

impl Vocabulary {
    /// Pure byte vocabulary: no merges, `256 + 3` ids.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let limit = (BYTE_TOKENS + rank) as TokenId;
            if a >= limit || b >= limit {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("merge #{rank} ({a}, {b}) references an id not yet defined"),
                });
            }
            if ranks.insert((a, b), rank).is_some() {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("duplicate merge ({a}, {b})"),
                });
            }
            let mut bytes = tokens[a as usize].clone();
            bytes.extend_from_slice(&tokens[b as usize]);
            tokens.push(bytes);
        }
        for _ in 0..NUM_SPECIALS {
            tokens.push(Vec::new());
        }
        Ok(Self { merges, ranks, tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        (BYTE_TOKENS + self.merges.len()) as TokenId
    }

    pub fn pad(&self) -> TokenId {
        self.eos() + 1
    }

    pub fn sep(&self) -> TokenId {
        self.eos() + 2
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= self.eos() && (id as usize) < self.size()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Raw bytes of a token; empty for specials, `None` when out of range.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Applies merges to the UTF-8 bytes of `text`, always choosing the
    /// adjacent pair with the earliest-learned merge next.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            ids = merge_pair(&ids, pair, (BYTE_TOKENS + rank) as TokenId);
        }
        ids
    }

    /// Concatenates token bytes; specials render as nothing. Byte sequences
    /// that are not valid UTF-8 are decoded lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_bytes(id)
                .ok_or(Error::TokenOutOfRange { id, vocab_size: self.size() })?;
            bytes.extend_from_slice(tok);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Dialogue context as model input: each turn (one per line of `context`)
    /// followed by SEP.
    pub fn encode_prompt(&self, context: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for turn in context.lines().map(str::trim).filter(|t| !t.is_empty()) {
            ids.extend(self.encode(turn));
            ids.push(self.sep());
        }
        if ids.is_empty() {
            ids.push(self.sep());
        }
        ids
    }

    /// `prompt ++ response ++ [EOS]`, plus the index where the response starts.
    pub fn encode_pair(&self, context: &str, response: &str) -> (Vec<TokenId>, usize) {
        let mut ids = self.encode_prompt(context);
        let start = ids.len();
        ids.extend(self.encode(response.trim()));
        ids.push(self.eos());
        (ids, start)
    }

    /// Text serialization: header, specials line, merge count, one merge per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_HEADER}");
        let _ = writeln!(s, "specials eos={} pad={} sep={}", self.eos(), self.pad(), self.sep());
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "vocabulary", detail };
        let mut lines = text.lines();
        if lines.next() != Some(FILE_HEADER) {
            return Err(bad(format!("first line must be {FILE_HEADER:?}")));
        }
        let specials = lines.next().ok_or_else(|| bad("missing specials line".into()))?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing or malformed merge count".into()))?;
        let mut merges = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let mut it = line.split(' ');
            let pair = (
                it.next().and_then(|x| x.parse().ok()),
                it.next().and_then(|x| x.parse().ok()),
                it.next(),
            );
            match pair {
                (Some(a), Some(b), None) => merges.push((a, b)),
                _ => return Err(bad(format!("merge line {} is malformed: {line:?}", i + 1))),
            }
        }
        if merges.len() != count {
            return Err(bad(format!("header declares {count} merges, found {}", merges.len())));
        }
        let vocab = Self::from_merges(merges)?;
        let expected = format!("specials eos={} pad={} sep={}", vocab.eos(), vocab.pad(), vocab.sep());
        if specials != expected {
            return Err(bad(format!("specials line {specials:?} does not match {expected:?}")));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn merge_pair(ids: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary reaches `target_size` ids (specials
/// included) or no adjacent pair occurs at least twice. Each corpus item is
/// merged independently. The most frequent pair wins; ties go to the
/// numerically smallest `(left, right)` pair.
pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Vocabulary> {
    if target_size < BYTE_TOKENS + NUM_SPECIALS {
        return invalid(format!(
            "target size {target_size} is below the {} byte and special ids",
            BYTE_TOKENS + NUM_SPECIALS
        ));
    }
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .into_iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.bytes().map(TokenId::from).collect())
        .collect();
    if seqs.is_empty() {
        return invalid("cannot train a vocabulary on an empty corpus");
    }
    let wanted = target_size - BYTE_TOKENS - NUM_SPECIALS;
    let mut merges = Vec::with_capacity(wanted);
    while merges.len() < wanted {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = (BYTE_TOKENS + merges.len()) as TokenId;
        for s in &mut seqs {
            if s.len() > 1 {
                *s = merge_pair(s, pair, new_id);
            }
        }
        merges.push(pair);
    }
    Vocabulary::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_of_repeated_letter() {
        let v = train_bpe(["aaaa"], 260).unwrap();
        assert_eq!(v.merges()[0], (b'a' as TokenId, b'a' as TokenId));
        assert_eq!(v.size(), 256 + v.merges().len() + 3);
    }

    #[test]
    fn minimal_target_gives_byte_vocabulary() {
        let v = train_bpe(["hello hello hello"], 259).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), 259);
        assert_eq!(v, Vocabulary::bytes_only());
        assert!(train_bpe(["x"], 258).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe(Vec::<&str>::new(), 300).is_err());
        assert!(train_bpe([""], 300).is_err());
    }

    #[test]
    fn specials_sit_at_the_top_and_decode_to_nothing() {
        let v = train_bpe(["abab abab abab"], 262).unwrap();
        let n = v.size() as TokenId;
        assert_eq!((v.eos(), v.pad(), v.sep()), (n - 3, n - 2, n - 1));
        assert_eq!(v.decode(&[v.eos(), v.pad(), v.sep()]).unwrap(), "");
        assert!(matches!(v.decode(&[n]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn encode_examples() {
        let v = train_bpe(["hola, ¿qué tal? hola hola"], 300).unwrap();
        assert!(v.encode("").is_empty());
        let t = "hola, ¿qué tal?";
        assert_eq!(v.decode(&v.encode(t)).unwrap(), t);
        assert!(v.encode("hola").len() < 4);
    }

    #[test]
    fn dialogue_layout() {
        let v = Vocabulary::bytes_only();
        let (ids, start) = v.encode_pair("hi\nyo", "ok");
        assert_eq!(ids, vec![b'h' as u32, b'i' as u32, v.sep(), b'y' as u32, b'o' as u32, v.sep(), b'o' as u32, b'k' as u32, v.eos()]);
        assert_eq!(start, 6);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let v = train_bpe(["the cat sat on the mat", "the hat"], 280).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::parse(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), text);
        assert!(Vocabulary::parse(&text.replace("merges", "merged")).is_err());
        assert!(Vocabulary::parse("palign-bpe 1\nspecials eos=256 pad=257 sep=258\nmerges 1\n300 1\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_text(s in "\\PC{0,40}") {
            let v = train_bpe(["abracadabra alakazam", "¿qué? ñandú"], 290).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s.clone());
            prop_assert_eq!(v.encode(&s), v.encode(&s));
        }
    }
}
