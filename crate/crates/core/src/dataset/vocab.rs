use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Result, ShefuError};

pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Largest vocabulary accepted for generated datasets.
pub const MAX_VOCAB: usize = 646;

/// Token list where the line number is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from words, prepending the reserved UNK/PAD
    /// entries. Duplicates keep their first position.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![UNK.to_string(), PAD.to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Parses the one-token-per-line format. Lines 0 and 1 must be the
    /// UNK and PAD entries.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < 2 || tokens[UNK_ID] != UNK || tokens[PAD_ID] != PAD {
            return Err(ShefuError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("vocabulary must start with {UNK} and {PAD}"),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(ShefuError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("invalid token {t:?}"),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(ShefuError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io_err(format!("writing {}", path.display())))
    }

    /// All tokens in id order, UNK and PAD first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}
