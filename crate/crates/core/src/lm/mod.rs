//! Word-level vocabulary and a tiny causal transformer read out through the
//! probabilities of "yes" and "no".

mod model;
mod vocab;

pub use model::{yes_no_node, yes_no_probs, LmConfig, Prediction, TinyLm};
pub use vocab::{tokenize, Vocabulary, ITEM_MARK, NO, PAD, UNK, USER_MARK, YES};
