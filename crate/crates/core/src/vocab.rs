//! Token vocabulary and role tags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

/// Grammatical role of a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Plain,
    Digit,
    ToolOpen,
    ToolClose,
    ToolResult,
    AnswerMarker,
    End,
}

impl TokenRole {
    pub const ALL: [TokenRole; 7] = [
        TokenRole::Plain,
        TokenRole::Digit,
        TokenRole::ToolOpen,
        TokenRole::ToolClose,
        TokenRole::ToolResult,
        TokenRole::AnswerMarker,
        TokenRole::End,
    ];

    pub fn index(self) -> usize {
        match self {
            TokenRole::Plain => 0,
            TokenRole::Digit => 1,
            TokenRole::ToolOpen => 2,
            TokenRole::ToolClose => 3,
            TokenRole::ToolResult => 4,
            TokenRole::AnswerMarker => 5,
            TokenRole::End => 6,
        }
    }
}

/// Fixed token ids of the standard tool grammar.
pub mod ids {
    use super::Token;

    pub const CALL_CALC: Token = 10;
    pub const CALL_LOOKUP: Token = 11;
    pub const END_CALL: Token = 12;
    pub const ANSWER: Token = 13;
    pub const END: Token = 14;
    pub const ERROR: Token = 15;
    pub const SEP: Token = 16;

    pub fn digit(d: u32) -> Token {
        debug_assert!(d < 10);
        d as Token
    }
}

/// Smallest vocabulary that holds the full tool grammar.
pub const MIN_TOOL_VOCAB: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    roles: Vec<TokenRole>,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit role tags.
    ///
    /// Requires at least 8 tokens and exactly one end token.
    pub fn new(roles: Vec<TokenRole>) -> Result<Self> {
        if roles.len() < 8 {
            return Err(Error::config(format!(
                "vocabulary size {} below minimum 8",
                roles.len()
            )));
        }
        let ends = roles.iter().filter(|r| **r == TokenRole::End).count();
        if ends != 1 {
            return Err(Error::config(format!(
                "vocabulary must contain exactly one end token, found {ends}"
            )));
        }
        Ok(Self { roles })
    }

    /// Standard tool-world vocabulary: digits `0..=9`, `CALL_CALC`,
    /// `CALL_LOOKUP`, `END_CALL`, `ANSWER`, `END`, `ERROR`, then a separator
    /// and filler tokens up to `size`.
    pub fn standard(size: usize) -> Result<Self> {
        if size < MIN_TOOL_VOCAB {
            return Err(Error::config(format!(
                "tool vocabulary needs at least {MIN_TOOL_VOCAB} tokens, got {size}"
            )));
        }
        let mut roles = vec![TokenRole::Digit; 10];
        roles.extend([
            TokenRole::ToolOpen,
            TokenRole::ToolOpen,
            TokenRole::ToolClose,
            TokenRole::AnswerMarker,
            TokenRole::End,
            TokenRole::ToolResult,
        ]);
        roles.resize(size, TokenRole::Plain);
        Self::new(roles)
    }

    pub fn size(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, token: Token) -> TokenRole {
        self.roles[token]
    }

    pub fn end_token(&self) -> Token {
        self.roles
            .iter()
            .position(|r| *r == TokenRole::End)
            .expect("validated at construction")
    }

    pub fn is_digit(&self, token: Token) -> bool {
        token < self.roles.len() && self.roles[token] == TokenRole::Digit
    }

    pub fn name(&self, token: Token) -> String {
        match token {
            0..=9 => token.to_string(),
            ids::CALL_CALC => "CALL_CALC".into(),
            ids::CALL_LOOKUP => "CALL_LOOKUP".into(),
            ids::END_CALL => "END_CALL".into(),
            ids::ANSWER => "ANSWER".into(),
            ids::END => "END".into(),
            ids::ERROR => "ERROR".into(),
            ids::SEP => "SEP".into(),
            t => format!("F{t}"),
        }
    }
}
