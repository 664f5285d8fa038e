use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataset::ItemCatalog;
use crate::error::{CcfError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const YES: u32 = 2;
pub const NO: u32 = 3;
pub const USER_MARK: u32 = 4;
pub const ITEM_MARK: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<unk>", "yes", "no", "[user]", "[item]"];

/// Lowercased word-level tokens; every non-alphanumeric, non-space
/// character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(CcfError::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if ids.get(*r) != Some(&(i as u32)) {
                return Err(CcfError::Data(format!("reserved token {r:?} must have id {i}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Reserved tokens first, then new tokens in first-seen order over the
    /// template texts and the catalog titles (by item id).
    pub fn build(catalog: &ItemCatalog, template: &[&str]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, u32> = tokens.iter().cloned().zip(0..).collect();
        let texts = template
            .iter()
            .map(|s| s.to_string())
            .chain(catalog.items.values().map(|i| i.title.clone()));
        for text in texts {
            for t in tokenize(&text) {
                if !seen.contains_key(&t) {
                    seen.insert(t.clone(), tokens.len() as u32);
                    tokens.push(t);
                }
            }
        }
        Vocabulary { tokens, ids: seen }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut s = self.tokens.join("\n");
        s.push('\n');
        Ok(fs::write(path, s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CcfError::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}
