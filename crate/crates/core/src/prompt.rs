//! Instruction prompts and their padded token encoding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;

/// Maps instruction ids to runs of consecutive token ids.
///
/// Instruction `k` owns ids `1 + k·n .. 1 + (k+1)·n`; id 0 is `<pad>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub instructions: usize,
    pub tokens_per_instruction: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        1 + self.instructions * self.tokens_per_instruction
    }

    pub fn token_ids(&self, instruction: usize) -> Result<Range<usize>> {
        if instruction >= self.instructions {
            return Err(Error::UnknownInstruction(instruction));
        }
        let start = 1 + instruction * self.tokens_per_instruction;
        Ok(start..start + self.tokens_per_instruction)
    }
}

/// An ordered list of instructions `P₁ … P_K`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    instructions: Vec<usize>,
}

impl Prompt {
    pub fn new(instructions: Vec<usize>) -> Self {
        Self { instructions }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn instructions(&self) -> &[usize] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// The prompt with instruction `index` removed, `P ∖ {P_index}`.
    pub fn without(&self, index: usize) -> Result<Prompt> {
        if index >= self.len() {
            return Err(Error::InstructionOutOfRange {
                index,
                count: self.len(),
            });
        }
        let mut rest = self.instructions.clone();
        rest.remove(index);
        Ok(Prompt::new(rest))
    }
}

/// A prompt encoded to exactly `T` token ids, followed by `<pad>`s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    ids: Vec<usize>,
    spans: Vec<Range<usize>>,
}

impl TextTokens {
    /// Concatenates per-instruction token runs and pads to `text_len`.
    pub fn encode(prompt: &Prompt, vocab: &Vocabulary, text_len: usize) -> Result<Self> {
        let needed = prompt.len() * vocab.tokens_per_instruction;
        if needed > text_len {
            return Err(Error::PromptTooLong {
                needed,
                available: text_len,
            });
        }
        let mut ids = Vec::with_capacity(text_len);
        let mut spans = Vec::with_capacity(prompt.len());
        for &instruction in prompt.instructions() {
            let start = ids.len();
            ids.extend(vocab.token_ids(instruction)?);
            spans.push(start..ids.len());
        }
        ids.resize(text_len, PAD_ID);
        Ok(Self { ids, spans })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn instruction_count(&self) -> usize {
        self.spans.len()
    }

    /// Count of non-pad positions, τ.
    pub fn content_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    /// Position of the first `<pad>`, if any.
    pub fn first_pad(&self) -> Option<usize> {
        let tau = self.content_len();
        (tau < self.ids.len()).then_some(tau)
    }

    /// Token positions of instruction `index`.
    pub fn span(&self, index: usize) -> Result<Range<usize>> {
        self.spans
            .get(index)
            .cloned()
            .ok_or(Error::InstructionOutOfRange {
                index,
                count: self.spans.len(),
            })
    }
}
