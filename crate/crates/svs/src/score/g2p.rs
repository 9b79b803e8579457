//! Pluggable grapheme-to-phoneme conversion.
//!
//! Lyrics arrive as whitespace-separated syllables; a converter maps each
//! syllable to lexicon symbols. The bundled converter is a small dictionary
//! sufficient for the synthetic corpus and the tests; a full pinyin G2P can
//! be dropped in behind the same trait.

use crate::error::{Result, SvsError};
use std::collections::BTreeMap;

pub trait G2p {
    /// Maps a lyrics line to a flat phoneme symbol sequence.
    fn to_phonemes(&self, text: &str) -> Result<Vec<String>>;
}

/// Dictionary-backed G2P over whitespace-separated syllables.
#[derive(Debug, Clone)]
pub struct LexiconG2p {
    entries: BTreeMap<String, Vec<String>>,
}

impl LexiconG2p {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, syllable: &str, phonemes: &[&str]) {
        self.entries.insert(
            syllable.to_string(),
            phonemes.iter().map(|s| s.to_string()).collect(),
        );
    }

    /// Toy table used by the synthetic corpus.
    pub fn bundled_toy() -> Self {
        let mut g2p = Self::new(BTreeMap::new());
        let table: &[(&str, &[&str])] = &[
            ("a", &["a"]),
            ("o", &["o"]),
            ("e", &["e"]),
            ("yi", &["i"]),
            ("wu", &["u"]),
            ("yu", &["v"]),
            ("ai", &["ai"]),
            ("ei", &["ei"]),
            ("ao", &["ao"]),
            ("ou", &["ou"]),
            ("ba", &["b", "a"]),
            ("ma", &["m", "a"]),
            ("da", &["d", "a"]),
            ("ta", &["t", "a"]),
            ("na", &["n", "a"]),
            ("la", &["l", "a"]),
            ("ha", &["h", "a"]),
            ("mi", &["m", "i"]),
            ("li", &["l", "i"]),
            ("lu", &["l", "u"]),
            ("mo", &["m", "o"]),
            ("me", &["m", "e"]),
            ("hai", &["h", "ai"]),
            ("lai", &["l", "ai"]),
            ("mei", &["m", "ei"]),
            ("hao", &["h", "ao"]),
            ("lou", &["l", "ou"]),
            ("shang", &["sh", "ang"]),
            ("sheng", &["sh", "eng"]),
            ("zhong", &["zh", "ong"]),
            ("ming", &["m", "ing"]),
            ("tian", &["t", "ian"]),
            ("sp", &["sp"]),
        ];
        for (syl, phs) in table {
            g2p.insert(syl, phs);
        }
        g2p
    }

    pub fn syllables(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn lookup(&self, syllable: &str) -> Option<&[String]> {
        self.entries.get(syllable).map(|v| v.as_slice())
    }
}

impl G2p for LexiconG2p {
    fn to_phonemes(&self, text: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for syl in text.split_whitespace() {
            let phs = self
                .entries
                .get(syl)
                .ok_or_else(|| SvsError::other(format!("unmappable grapheme `{syl}`")))?;
            out.extend(phs.iter().cloned());
        }
        Ok(out)
    }
}
