// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";

/// Word-level vocabulary; ids are dense from 0 with `PAD = 0`, `BOS = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from `words` in first-seen order after the specials.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, BOS].into_iter().chain(words) {
            v.insert(w);
        }
        v
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Dataset(format!("token id {id} out of range")))
    }

    /// Space-separated words to ids (no BOS is added).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    /// Ids of the two-digit tokens `00 ..= 99`, in numeric order.
    pub fn year_ids(&self) -> Result<Vec<u32>> {
        (0..100).map(|y| self.id(&format!("{y:02}"))).collect()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.tokens.iter().map(|t| (t.as_str(), self.index[t])).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(json)?;
        let mut tokens = vec![String::new(); map.len()];
        let mut seen = vec![false; map.len()];
        for (t, &id) in &map {
            let slot = id as usize;
            if slot >= tokens.len() || seen[slot] {
                return Err(Error::Format(format!("vocabulary ids are not dense at `{t}`")));
            }
            seen[slot] = true;
            tokens[slot] = t.clone();
        }
        if tokens.first().map(String::as_str) != Some(PAD) || tokens.get(1).map(String::as_str) != Some(BOS) {
            return Err(Error::Format("vocabulary must start with [PAD], [BOS]".into()));
        }
        let index = map.into_iter().collect();
        Ok(Self { tokens, index })
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let v = Vocab::new(tokens.iter().skip(2).map(String::as_str));
        if v.tokens != tokens {
            return Err(serde::de::Error::custom("vocabulary token list is not canonical"));
        }
        Ok(v)
    }
}
