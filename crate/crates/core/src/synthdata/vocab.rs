//! The fixed 96-token vocabulary shared by the generator and the models.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::TokenId;

pub const VOCAB_SIZE: usize = 96;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

pub const SHAPES: [&str; 8] = ["circle", "square", "triangle", "star", "heart", "diamond", "cross", "hexagon"];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"];
pub const YES_NO_CHOICES: [&str; 4] = ["yes", "no", "equal", "unknown"];

const WORDS: [&str; 30] = [
    "what", "is", "the", "color", "of", "cell", "with", "largest", "count", "?", "shape", "at", "row", "column",
    "greater", "less", "than", "has", ".", "that", "its", "answer", "yes", "no", "equal", "unknown", "so", "a", "and",
    "in",
];

pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    fn build() -> Self {
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>"].iter().map(|s| s.to_string()).collect();
        words.extend(WORDS.iter().map(|s| s.to_string()));
        words.extend((0..10).map(|d| d.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(COLORS.iter().map(|s| s.to_string()));
        let mut k = 0;
        while words.len() < VOCAB_SIZE {
            words.push(format!("<unused{k}>"));
            k += 1;
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Self { words, ids }
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Whitespace tokenization; `Err` carries the first unknown word.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, String> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| w.to_string())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<oov>")).collect::<Vec<_>>().join(" ")
    }
}

pub fn vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(Vocab::build)
}
