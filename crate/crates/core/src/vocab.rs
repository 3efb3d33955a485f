// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token layout: ids `0..=number_token_max` are the numbers themselves,
//! followed by `+`, `-`, `*`, `/`, `=` in that order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, ForgeError, Result};

/// Arithmetic operators, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
        }
    }

    /// Lowercase name used in file names and JSON keys.
    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
            Operator::Mul => "mul",
            Operator::Div => "div",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_symbol(s: &str) -> Option<Operator> {
        Operator::ALL.into_iter().find(|o| o.symbol() == s || o.name() == s)
    }
}

impl std::fmt::Display for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Bijection between token strings and ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    number_token_max: usize,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn arithmetic(number_token_max: usize) -> Self {
        Self::from_tokens(Self::layout(number_token_max)).expect("arithmetic layout is a bijection")
    }

    fn layout(number_token_max: usize) -> Vec<String> {
        let mut tokens: Vec<String> = (0..=number_token_max).map(|n| n.to_string()).collect();
        tokens.extend(Operator::ALL.iter().map(|o| o.symbol().to_string()));
        tokens.push("=".to_string());
        tokens
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate token '{t}'")));
            }
        }
        let numbers = tokens.iter().take_while(|t| t.parse::<usize>().is_ok()).count();
        if numbers == 0 || tokens.len() != numbers + 5 {
            return Err(invalid("tokenizer must hold numbers followed by 5 symbols"));
        }
        let tok = Self {
            number_token_max: numbers - 1,
            tokens,
            lookup,
        };
        if tok.tokens != Self::layout(tok.number_token_max) {
            return Err(invalid("tokenizer does not follow the arithmetic layout"));
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn number_token_max(&self) -> usize {
        self.number_token_max
    }

    /// Count of numeric tokens.
    pub fn number_count(&self) -> usize {
        self.number_token_max + 1
    }

    pub fn number(&self, n: usize) -> Result<usize> {
        if n > self.number_token_max {
            return Err(invalid(format!(
                "{n} is not a single token (max {})",
                self.number_token_max
            )));
        }
        Ok(n)
    }

    pub fn operator(&self, op: Operator) -> usize {
        self.number_token_max + 1 + op.index()
    }

    pub fn equals(&self) -> usize {
        self.number_token_max + 5
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(ForgeError::UnknownToken(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Tokenizer {}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = ForgeError;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}
