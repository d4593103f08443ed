use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::trajectory::TokenId;

pub const PAD: TokenId = 0;
/// Begin sentinel: encoder input for an empty source, decoder start for the
/// left-to-right baseline.
pub const BOS: TokenId = 1;
/// Trailing decoder input of the insertion model; its state scores the
/// append slot.
pub const SLOT: TokenId = 2;
/// Realizes the end-of-sequence event.
pub const STOP: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_CLASS: &str = "reserved";
pub const CONTENT_CLASS: &str = "content";
pub const FUNCTION_CLASS: &str = "function";

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<slot>", "<stop>"];

/// Token table with a class label per token. Ids `0..NUM_RESERVED` are the
/// reserved sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            classes: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t, RESERVED_CLASS);
        }
        v
    }

    fn push(&mut self, token: &str, class: &str) -> TokenId {
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.classes.push(class.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Adds a token, returning its id; existing tokens keep their id.
    pub fn add(&mut self, token: &str, class: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push(token, class),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn class(&self, id: TokenId) -> &str {
        &self.classes[id as usize]
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Ids of data tokens, i.e. everything but the reserved sentinels.
    pub fn data_ids(&self) -> impl Iterator<Item = TokenId> {
        (NUM_RESERVED as TokenId)..(self.tokens.len() as TokenId)
    }

    /// Parses whitespace-separated tokens; reserved tokens are rejected.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, String> {
        text.split_whitespace()
            .map(|t| match self.id(t) {
                Some(id) if !Self::is_reserved(id) => Ok(id),
                _ => Err(t.to_string()),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line (id = line number), followed by a tab and its class.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.classes)
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut v = Self {
            tokens: Vec::new(),
            classes: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let (token, class) = line.split_once('\t').unwrap_or((line, CONTENT_CLASS));
            if token.is_empty() || token.contains(char::is_whitespace) {
                return Err(DataError::Malformed {
                    line: i + 1,
                    msg: format!("bad vocabulary token `{token}`"),
                });
            }
            if i < NUM_RESERVED && token != RESERVED[i] {
                return Err(DataError::Malformed {
                    line: i + 1,
                    msg: format!("expected reserved token {}", RESERVED[i]),
                });
            }
            if v.index.contains_key(token) {
                return Err(DataError::Malformed {
                    line: i + 1,
                    msg: format!("duplicate token `{token}`"),
                });
            }
            v.push(token, class);
        }
        if v.len() < NUM_RESERVED {
            return Err(DataError::Malformed {
                line: v.len() + 1,
                msg: "vocabulary lacks the reserved tokens".into(),
            });
        }
        Ok(v)
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| DataError::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }
}
