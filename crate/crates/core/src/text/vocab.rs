use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Word,
    Char,
}

impl TokenizeMode {
    /// Splits `text` into surface tokens. Word mode splits on whitespace;
    /// char mode yields the characters of the whitespace-normalized text.
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            TokenizeMode::Word => text.split_whitespace().map(str::to_owned).collect(),
            TokenizeMode::Char => normalize(text).chars().map(String::from).collect(),
        }
    }

    pub fn join(self, tokens: &[&str]) -> String {
        match self {
            TokenizeMode::Word => tokens.join(" "),
            TokenizeMode::Char => tokens.concat(),
        }
    }
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn language_token(code: &str) -> String {
    format!("__{code}__")
}

pub(crate) fn validate_language(code: &str) -> Result<()> {
    if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == '_') {
        return Err(Error::Config(format!("invalid language code `{code}`")));
    }
    Ok(())
}

/// Token/id bijection. Ids `0..reserved` hold PAD, BOS, EOS, UNK and one
/// language tag per configured language (sorted by code); corpus tokens follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    mode: TokenizeMode,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    languages: Vec<String>,
}

impl Vocabulary {
    fn from_parts(mode: TokenizeMode, mut languages: Vec<String>, corpus_tokens: Vec<String>) -> Result<Self> {
        for code in &languages {
            validate_language(code)?;
        }
        languages.sort();
        languages.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| language_token(l)));
        tokens.extend(corpus_tokens);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self { mode, tokens, index, languages })
    }

    /// Counts tokens over `lines` and assigns ids by descending count, then
    /// lexicographic order. Tokens seen fewer than `min_count` times are left
    /// out and encode to UNK.
    pub fn build<'a, I>(lines: I, languages: &[&str], mode: TokenizeMode, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_lines = 0usize;
        for line in lines {
            n_lines += 1;
            for tok in mode.tokenize(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_lines == 0 {
            return Err(Error::Data("cannot build a vocabulary from empty corpora".into()));
        }
        let reserved: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(languages.iter().map(|l| language_token(l)))
            .collect();
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count.max(1) && !reserved.contains(tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_parts(
            mode,
            languages.iter().map(|s| s.to_string()).collect(),
            kept.into_iter().map(|(t, _)| t).collect(),
        )
    }

    pub fn mode(&self) -> TokenizeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Size of the reserved id block (specials plus language tags).
    pub fn reserved(&self) -> usize {
        SPECIALS.len() + self.languages.len()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_id(&self, code: &str) -> Result<TokenId> {
        match self.languages.binary_search_by(|l| l.as_str().cmp(code)) {
            Ok(i) => Ok((SPECIALS.len() + i) as TokenId),
            Err(_) => Err(Error::Config(format!("language `{code}` is not registered in the vocabulary"))),
        }
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a corpus token; reserved surface forms map to UNK.
    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if id as usize >= self.reserved() => id,
            _ => UNK_ID,
        }
    }

    pub fn encode(&self, text: &str, language: &str) -> Result<TokenSequence> {
        self.lang_id(language)?;
        let ids = self.mode.tokenize(text).iter().map(|t| self.id(t)).collect();
        Ok(TokenSequence { ids, language: language.to_owned() })
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let toks = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or_else(|| {
                    Error::index("decode", format!("token id {id} >= vocabulary {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.mode.join(&toks))
    }

    /// One token per line; line `i` holds id `i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for tok in &self.tokens {
            writeln!(f, "{tok}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, mode: TokenizeMode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &lines[..],
        };
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(format!("{}: missing reserved header", path.display())));
        }
        let mut languages = Vec::new();
        let mut rest = &lines[SPECIALS.len()..];
        while let Some((first, tail)) = rest.split_first() {
            match first.strip_prefix("__").and_then(|s| s.strip_suffix("__")) {
                Some(code) if validate_language(code).is_ok() => {
                    languages.push(code.to_owned());
                    rest = tail;
                }
                _ => break,
            }
        }
        let mut sorted = languages.clone();
        sorted.sort();
        if sorted != languages {
            return Err(Error::Data(format!("{}: language tags are not sorted", path.display())));
        }
        Self::from_parts(mode, languages, rest.iter().map(|s| s.to_string()).collect())
    }

    /// Stable digest of the token list, used to pair checkpoints with vocabularies.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint(&self.tokens.join("\n"))
    }
}
