//! Fixed token table for the synthetic referring expressions.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;

pub const WORDS: [&str; 23] = [
    "<pad>", "<cls>", // specials
    "red", "green", "blue", "yellow", "purple", "orange", // colors
    "circle", "square", "triangle", // shapes
    "small", "large", // sizes
    "left", "right", "top", "bottom", // absolute positions
    "first", "second", "third", "fourth", // ordinals
    "from", "the", // relation words
];

pub fn size() -> usize {
    WORDS.len()
}

pub fn id(word: &str) -> Option<u32> {
    WORDS[2..].iter().position(|&w| w == word).map(|i| i as u32 + 2)
}

pub fn word(id: u32) -> Option<&'static str> {
    WORDS.get(id as usize).copied()
}

/// Hex SHA-256 over the newline-joined table.
pub fn hash() -> String {
    let mut h = Sha256::new();
    for w in WORDS {
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `[CLS] + word ids`, padded with `PAD` to `t_max`.
pub fn tokenize(expression: &str, t_max: usize) -> Result<Vec<u32>> {
    let mut ids = vec![CLS];
    for w in expression.split_whitespace() {
        ids.push(id(w).ok_or_else(|| Error::Input(format!("unknown word {w:?}")))?);
    }
    if ids.len() > t_max {
        return Err(Error::Input(format!(
            "expression has {} tokens, limit is {t_max}",
            ids.len()
        )));
    }
    ids.resize(t_max, PAD);
    Ok(ids)
}

/// Inverse of [`tokenize`] over regular words; specials are dropped.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut words = Vec::new();
    for &i in ids {
        if i == PAD || i == CLS {
            continue;
        }
        words.push(word(i).ok_or_else(|| Error::Input(format!("token id {i} out of range")))?);
    }
    Ok(words.join(" "))
}
