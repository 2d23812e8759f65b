//! Token ↔ id mapping with fixed reserved ids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];
/// Separator used by the two-to-two concatenation baseline.
pub const SEP_TOKEN: &str = "<sep>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// Most frequent first, ties broken lexicographically. `max_size`
    /// includes the reserved entries.
    pub fn from_counts(counts: &BTreeMap<String, usize>, max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut ranked: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !RESERVED_TOKENS.contains(&t.as_str()) && t.as_str() != SEP_TOKEN)
            .map(|(t, &c)| (t, c))
            .collect();
        // BTreeMap iteration is already lexicographic; a stable sort keeps it.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - NUM_RESERVED).map(|(t, _)| t.clone()))
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends the separator if absent and returns its id.
    pub fn add_separator(&mut self) -> TokenId {
        if let Some(id) = self.sep_id() {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(SEP_TOKEN.to_string());
        self.index.insert(SEP_TOKEN.to_string(), id);
        id
    }

    pub fn sep_id(&self) -> Option<TokenId> {
        self.index.get(SEP_TOKEN).copied()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED_TOKENS[UNK as usize], String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED || Some(id) == self.sep_id()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {want}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "empty token or token containing whitespace".into(),
                });
            }
            if seen.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {t}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens, 1))
    }
}
