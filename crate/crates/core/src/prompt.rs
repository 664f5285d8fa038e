//! Hybrid prompts: task text interleaved with user and item placeholder
//! slots, plus the text-only and similar-items variants.

use std::collections::HashMap;
use std::fmt::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::ItemCatalog;
use crate::error::{CcfError, Result};
use crate::lm::Vocabulary;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum HybridToken {
    Text(u32),
    UserSlot(u32),
    ItemSlot(u32),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// Placeholder slots for the user, the history items and the target.
    Hybrid,
    /// Titles inlined as text; no user sentence.
    TextOnly,
    /// Titles inlined; the user sentence lists similar items by title.
    SimilarItems,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridPrompt {
    pub tokens: Vec<HybridToken>,
    pub answer_pos: usize,
    pub user: u32,
    pub item: u32,
    pub label: u8,
    pub style: PromptStyle,
    /// History item ids rendered into the prompt, oldest first.
    pub history: Vec<u32>,
    pub similar: Vec<u32>,
}

impl HybridPrompt {
    pub fn user_slots(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, HybridToken::UserSlot(_))).count()
    }

    pub fn item_slots(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, HybridToken::ItemSlot(_))).count()
    }
}

const Q_HISTORY: &str = "#Question: A user has given high ratings to the following items:";
const Q_USER: &str = ". Additionally, we have information about the user's preferences encoded in the feature";
const Q_SIMILAR: &str = ". Additionally, we have information that users like these items may also enjoy:";
const Q_TARGET: &str = ". Using all available information, make a prediction about whether the user would enjoy the item";
const Q_ANSWER: &str = ". Answer with \"Yes\" or \"No\". #Answer:";

/// All fixed prompt text, for building a vocabulary.
pub const TEMPLATE_TEXTS: [&str; 7] = [Q_HISTORY, Q_USER, Q_SIMILAR, Q_TARGET, Q_ANSWER, "none", ","];

#[derive(Clone, Debug)]
struct Pieces {
    history: Vec<u32>,
    user: Vec<u32>,
    similar: Vec<u32>,
    target: Vec<u32>,
    answer: Vec<u32>,
    none: u32,
    comma: u32,
}

/// Renders prompts against one vocabulary and catalog.
#[derive(Clone, Debug)]
pub struct PromptBuilder {
    vocab: Arc<Vocabulary>,
    titles: HashMap<u32, Vec<u32>>,
    pieces: Pieces,
}

impl PromptBuilder {
    pub fn new(vocab: Arc<Vocabulary>, catalog: &ItemCatalog) -> Self {
        let titles = catalog
            .items
            .iter()
            .map(|(&id, info)| (id, vocab.encode(&info.title)))
            .collect();
        let pieces = Pieces {
            history: vocab.encode(Q_HISTORY),
            user: vocab.encode(Q_USER),
            similar: vocab.encode(Q_SIMILAR),
            target: vocab.encode(Q_TARGET),
            answer: vocab.encode(Q_ANSWER),
            none: vocab.id("none"),
            comma: vocab.id(","),
        };
        PromptBuilder { vocab, titles, pieces }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn title_ids(&self, item: u32) -> Result<&[u32]> {
        self.titles
            .get(&item)
            .map(Vec::as_slice)
            .ok_or(CcfError::UnknownId { kind: "item", id: item })
    }

    fn text(out: &mut Vec<HybridToken>, ids: &[u32]) {
        out.extend(ids.iter().map(|&i| HybridToken::Text(i)));
    }

    fn items(&self, out: &mut Vec<HybridToken>, items: &[u32], slots: bool) -> Result<()> {
        if items.is_empty() {
            out.push(HybridToken::Text(self.pieces.none));
        }
        for (k, &i) in items.iter().enumerate() {
            if k > 0 {
                out.push(HybridToken::Text(self.pieces.comma));
            }
            self.item(out, i, slots)?;
        }
        Ok(())
    }

    fn item(&self, out: &mut Vec<HybridToken>, item: u32, slot: bool) -> Result<()> {
        let title = self.title_ids(item)?;
        if slot {
            out.push(HybridToken::ItemSlot(item));
        } else {
            Self::text(out, title);
        }
        Ok(())
    }

    fn render(
        &self,
        style: PromptStyle,
        user: u32,
        item: u32,
        label: u8,
        history: &[u32],
        similar: &[u32],
    ) -> Result<HybridPrompt> {
        let slots = style == PromptStyle::Hybrid;
        let pc = &self.pieces;
        let mut t = Vec::new();
        Self::text(&mut t, &pc.history);
        self.items(&mut t, history, slots)?;
        match style {
            PromptStyle::Hybrid => {
                Self::text(&mut t, &pc.user);
                t.push(HybridToken::UserSlot(user));
            }
            PromptStyle::SimilarItems if !similar.is_empty() => {
                Self::text(&mut t, &pc.similar);
                self.items(&mut t, similar, false)?;
            }
            _ => {}
        }
        Self::text(&mut t, &pc.target);
        self.item(&mut t, item, slots)?;
        Self::text(&mut t, &pc.answer);
        Ok(HybridPrompt {
            answer_pos: t.len() - 1,
            tokens: t,
            user,
            item,
            label,
            style,
            history: history.to_vec(),
            similar: similar.to_vec(),
        })
    }

    /// The hybrid template with slots for the history, the user and the
    /// target item.
    pub fn translate(&self, user: u32, item: u32, label: u8, history: &[u32]) -> Result<HybridPrompt> {
        self.render(PromptStyle::Hybrid, user, item, label, history, &[])
    }

    /// Titles inlined, no collaborative sentence.
    pub fn text_only(&self, user: u32, item: u32, label: u8, history: &[u32]) -> Result<HybridPrompt> {
        self.render(PromptStyle::TextOnly, user, item, label, history, &[])
    }

    /// Titles inlined; the collaborative sentence names `similar` items by
    /// title, and is left out when `similar` is empty.
    pub fn nl_cf(&self, user: u32, item: u32, label: u8, history: &[u32], similar: &[u32]) -> Result<HybridPrompt> {
        self.render(PromptStyle::SimilarItems, user, item, label, history, similar)
    }

    /// Number of input positions after slot expansion. Each item slot spans
    /// its title tokens plus `slot_extra` positions.
    pub fn expanded_len(&self, prompt: &HybridPrompt, slot_extra: usize) -> Result<usize> {
        let mut n = 0;
        for t in &prompt.tokens {
            n += match *t {
                HybridToken::ItemSlot(i) => self.title_ids(i)?.len() + slot_extra,
                _ => 1,
            };
        }
        Ok(n)
    }

    /// Drops whole history items, oldest first, until the expanded length is
    /// at most `max_tokens`.
    pub fn truncate(&self, prompt: &HybridPrompt, max_tokens: usize, slot_extra: usize) -> Result<HybridPrompt> {
        let mut history = prompt.history.clone();
        let mut cur = prompt.clone();
        loop {
            let len = self.expanded_len(&cur, slot_extra)?;
            if len <= max_tokens {
                return Ok(cur);
            }
            if history.is_empty() {
                return Err(CcfError::invalid(
                    "truncate",
                    format!("template alone needs {len} positions, limit is {max_tokens}"),
                ));
            }
            history.remove(0);
            cur = self.render(cur.style, cur.user, cur.item, cur.label, &history, &cur.similar)?;
        }
    }

    /// One-line debug dump with slots shown as `[User_12]` / `[Item_99]`.
    pub fn dump(&self, prompt: &HybridPrompt) -> String {
        let tokens: Vec<String> = prompt
            .tokens
            .iter()
            .map(|t| match *t {
                HybridToken::Text(id) => self.vocab.token(id).unwrap_or("<unk>").to_string(),
                HybridToken::UserSlot(u) => format!("[User_{u}]"),
                HybridToken::ItemSlot(i) => format!("[Item_{i}]"),
            })
            .collect();
        let mut s = String::new();
        let _ = write!(
            s,
            "{}",
            serde_json::json!({
                "tokens": tokens,
                "answer_pos": prompt.answer_pos,
                "user": prompt.user,
                "item": prompt.item,
                "label": prompt.label,
            })
        );
        s
    }
}
