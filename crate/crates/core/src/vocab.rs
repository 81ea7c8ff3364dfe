//! Character-level vocabulary shared by the encoder and the decoder.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
}

/// Digits `0`-`9`, `(`, `)`, `+`, `-`, `*`, `_`, then SOS, EOS, PAD: ids 0..=18.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocab;

const CHARS: [char; 16] = ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '(', ')', '+', '-', '*', '_'];

impl Vocab {
    pub const SOS: usize = 16;
    pub const EOS: usize = 17;
    pub const PAD: usize = 18;
    pub const SIZE: usize = 19;

    pub fn id(&self, c: char) -> Result<usize, VocabError> {
        match c {
            '0'..='9' => Ok(c as usize - '0' as usize),
            '(' => Ok(10),
            ')' => Ok(11),
            '+' => Ok(12),
            '-' => Ok(13),
            '*' => Ok(14),
            '_' => Ok(15),
            _ => Err(VocabError::UnknownSymbol(c)),
        }
    }

    /// The printable character for `id`, or `None` for special tokens.
    pub fn char_of(&self, id: usize) -> Option<char> {
        CHARS.get(id).copied()
    }

    /// Symbols in id order; special tokens are spelled `<SOS>`, `<EOS>`, `<PAD>`.
    pub fn symbols(&self) -> Vec<String> {
        CHARS
            .iter()
            .map(char::to_string)
            .chain(["<SOS>", "<EOS>", "<PAD>"].map(String::from))
            .collect()
    }

    /// Token ids of `text` without framing tokens.
    pub fn encode_bare(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// `SOS text EOS`.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(Self::SOS);
        for c in text.chars() {
            ids.push(self.id(c)?);
        }
        ids.push(Self::EOS);
        Ok(ids)
    }

    /// Drops SOS/PAD, stops at the first EOS. Unknown ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != Self::EOS)
            .filter_map(|&id| self.char_of(id))
            .collect()
    }
}
