use std::collections::HashMap;

use super::PromptTemplate;
use crate::error::{invalid, Error, Result};

pub const BOS: &str = "<bos>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
/// The null query used for calibration.
pub const NULL_QUERY: &str = "N/A";

/// Candidate index marker `[i]`, 1-based.
pub fn marker(i: usize) -> String {
    format!("[{i}]")
}

/// Whitespace-delimited symbol-table tokenizer.
///
/// Every symbol maps to exactly one id, so `decode(encode(x)) == x` for any
/// text written with single spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
    max_candidates: usize,
}

impl Tokenizer {
    /// Specials, `max_candidates` index markers, template words, then
    /// `alphabet` in order. Repeated symbols are kept once.
    pub fn build<'a>(
        template: &PromptTemplate,
        alphabet: impl IntoIterator<Item = &'a str>,
        max_candidates: usize,
    ) -> Result<Self> {
        if max_candidates < 2 {
            return Err(invalid("tokenizer needs at least 2 candidate markers"));
        }
        let mut symbols: Vec<String> = [BOS, THINK_OPEN, THINK_CLOSE, NULL_QUERY].map(String::from).to_vec();
        symbols.extend((1..=max_candidates).map(marker));
        symbols.extend(template.words().map(String::from));
        symbols.extend(alphabet.into_iter().map(String::from));
        let mut seen = std::collections::HashSet::new();
        symbols.retain(|s| seen.insert(s.clone()));
        Self::from_vocab(symbols)
    }

    /// Rebuilds a tokenizer from a stored vocabulary.
    pub fn from_vocab(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(invalid(format!("vocabulary symbol {s:?} is empty or contains whitespace")));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        for special in [BOS, THINK_OPEN, THINK_CLOSE, NULL_QUERY] {
            if !index.contains_key(special) {
                return Err(invalid(format!("vocabulary lacks special symbol {special}")));
            }
        }
        let max_candidates = (1..).take_while(|&i| index.contains_key(&marker(i))).count();
        if max_candidates < 2 {
            return Err(invalid("vocabulary lacks candidate markers"));
        }
        Ok(Tokenizer { symbols, index, max_candidates })
    }

    pub fn vocab(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn max_candidates(&self) -> usize {
        self.max_candidates
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    fn special(&self, symbol: &str) -> u32 {
        self.index[symbol]
    }

    pub fn bos(&self) -> u32 {
        self.special(BOS)
    }

    pub fn think_open(&self) -> u32 {
        self.special(THINK_OPEN)
    }

    pub fn think_close(&self) -> u32 {
        self.special(THINK_CLOSE)
    }

    pub fn null_query(&self) -> u32 {
        self.special(NULL_QUERY)
    }

    /// Id of the 1-based candidate marker `[i]`.
    pub fn marker(&self, i: usize) -> Result<u32> {
        self.id(&marker(i))
            .ok_or_else(|| invalid(format!("candidate {i} exceeds the {} supported markers", self.max_candidates)))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|s| self.id(s).ok_or_else(|| Error::UnknownSymbol(s.to_string()))).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.symbols.get(i as usize).map_or("<?>", String::as_str)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        let alphabet: Vec<String> = (0..10).map(|i| format!("k{i}")).collect();
        Tokenizer::build(&PromptTemplate::default(), alphabet.iter().map(String::as_str), 8).unwrap()
    }

    #[test]
    fn specials_and_markers() {
        let t = tok();
        assert_eq!(t.bos(), 0);
        assert_eq!(t.decode(&[t.null_query()]), "N/A");
        assert_eq!(t.decode(&[t.marker(3).unwrap()]), "[3]");
        assert!(t.marker(9).is_err());
        assert_eq!(t.max_candidates(), 8);
        let again = Tokenizer::from_vocab(t.vocab().to_vec()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        assert!(matches!(tok().encode("k1 zz"), Err(Error::UnknownSymbol(s)) if s == "zz"));
    }

    #[test]
    fn duplicate_vocab_rejected() {
        let mut v = tok().vocab().to_vec();
        v.push("k1".into());
        assert!(Tokenizer::from_vocab(v).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(idx in proptest::collection::vec(0usize..10, 1..20)) {
            let t = tok();
            let text = idx.iter().map(|i| format!("k{i}")).collect::<Vec<_>>().join(" ");
            let ids = t.encode(&text).unwrap();
            prop_assert_eq!(t.decode(&ids), text);
        }
    }
}
