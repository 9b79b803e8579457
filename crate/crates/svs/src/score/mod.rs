//! Symbolic-side data model and corpus ingestion.
//!
//! Covers both corpus shapes: the annotated single-singer corpus
//! (phoneme / note pitch / per-phoneme duration) and the lyrics-only
//! multi-singer corpus (phoneme sequence without timing).
//!
//! Annotation grammar, one utterance per line:
//!
//! ```text
//! utt_id|phonemes(space-sep)|midi-notes(space-sep)|durations-sec(space-sep)
//! ```
//!
//! The last three fields carry one token per phoneme. Durations are
//! per-phoneme; consecutive phonemes with the same note pitch belong to one
//! note, whose duration is the sum of its phonemes' durations. Two distinct
//! consecutive notes at identical pitch would merge under this rule.
//!
//! Corpus manifest, one utterance per line:
//!
//! ```text
//! wav_path<TAB>singer_id<TAB>annotation-or-lyrics
//! ```
//!
//! A payload containing `|` is parsed as an annotation; anything else is
//! treated as whitespace-separated lyrics and converted through the G2P.

pub mod batch;
pub mod g2p;

pub use batch::{build_batch, Batch, BatchContent, PreparedUtterance};
pub use g2p::{G2p, LexiconG2p};

use crate::config::FeatureConfig;
use crate::dsp::FeatureBundle;
use crate::error::{Result, SvsError};
use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

/// Ordered phoneme inventory. Index 0 is reserved for the CTC blank; real
/// phonemes are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeLexicon {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

pub const BLANK_ID: usize = 0;

impl PhonemeLexicon {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains('|') {
                return Err(SvsError::Config(format!("bad phoneme symbol `{s}`")));
            }
            if index.insert(s.clone(), i + 1).is_some() {
                return Err(SvsError::Config(format!("duplicate phoneme `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Vocabulary size excluding the blank.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    /// 1-based id of a phoneme symbol.
    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        if id == BLANK_ID {
            return Some("<blank>");
        }
        self.symbols.get(id - 1).map(|s| s.as_str())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// The bundled 61-symbol inventory: 21 pinyin initials, 36 finals and
    /// 4 markers.
    pub fn bundled() -> Self {
        const SYMBOLS: &[&str] = &[
            "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch",
            "sh", "r", "z", "c", "s", // initials
            "a", "o", "e", "i", "u", "v", "ai", "ei", "ao", "ou", "er", "an", "en", "ang",
            "eng", "ong", "ia", "ie", "iao", "iu", "ian", "in", "iang", "ing", "iong", "ua",
            "uo", "uai", "ui", "uan", "un", "uang", "ueng", "van", "ve", "vn", // finals
            "sp", "ap", "sil", "ng", // markers
        ];
        Self::new(SYMBOLS.iter().map(|s| s.to_string()).collect()).expect("bundled lexicon")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.symbols.join("\n") + "\n")?;
        Ok(())
    }
}

/// Phoneme-level symbolic input for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicalScore {
    pub utt_id: String,
    /// 1-based lexicon ids, `[P]`.
    pub phoneme_ids: Vec<usize>,
    /// MIDI note per phoneme, 0 = rest, `[P]`.
    pub note_pitch_ids: Vec<u8>,
    /// Per-phoneme duration in frames, `[P]`, all positive.
    pub durations_frames: Vec<u32>,
}

impl MusicalScore {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    pub fn total_frames(&self) -> u32 {
        self.durations_frames.iter().sum()
    }

    /// Maximal runs of consecutive phonemes sharing a note pitch; each run is
    /// one note.
    pub fn note_groups(&self) -> Vec<Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.note_pitch_ids[i] != self.note_pitch_ids[start] {
                groups.push(start..i);
                start = i;
            }
        }
        groups
    }

    /// Note duration (frames) each phoneme belongs to, `[P]`.
    pub fn note_duration_per_phoneme(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.len()];
        for g in self.note_groups() {
            let total: u32 = self.durations_frames[g.clone()].iter().sum();
            for i in g {
                out[i] = total;
            }
        }
        out
    }

    /// Absorbs the rounding residual against the audio frame count into the
    /// final phoneme, keeping it positive.
    pub fn align_to_frames(&mut self, t_frames: u32) {
        if self.is_empty() {
            return;
        }
        let total = self.total_frames();
        let last = self.durations_frames.len() - 1;
        let adjusted = self.durations_frames[last] as i64 + t_frames as i64 - total as i64;
        self.durations_frames[last] = adjusted.max(1) as u32;
    }

    /// Re-serializes in the annotation grammar (durations back in seconds).
    pub fn to_annotation_line(&self, lexicon: &PhonemeLexicon, cfg: &FeatureConfig) -> String {
        let phonemes: Vec<&str> = self
            .phoneme_ids
            .iter()
            .map(|&id| lexicon.symbol(id).unwrap_or("?"))
            .collect();
        let notes: Vec<String> = self.note_pitch_ids.iter().map(u8::to_string).collect();
        let secs: Vec<String> = self
            .durations_frames
            .iter()
            .map(|&fr| {
                let s = fr as f64 * cfg.hop_length as f64 / cfg.sample_rate as f64;
                format!("{s:.6}")
            })
            .collect();
        format!(
            "{}|{}|{}|{}",
            self.utt_id,
            phonemes.join(" "),
            notes.join(" "),
            secs.join(" ")
        )
    }
}

/// One corpus item; the content shape selects the training stage it can feed.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub audio_path: PathBuf,
    pub singer_id: String,
    pub content: UtteranceContent,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtteranceContent {
    /// Fine-tuning corpus: full score.
    Score(MusicalScore),
    /// Pre-training corpus: phoneme ids without timing.
    Phonemes(Vec<usize>),
}

fn parse_err(line: usize, field: &str, msg: impl Into<String>) -> SvsError {
    SvsError::Parse {
        line,
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// Converts seconds to frames, round-half-up.
pub fn seconds_to_frames(sec: f64, cfg: &FeatureConfig) -> u32 {
    (sec * cfg.sample_rate as f64 / cfg.hop_length as f64).round() as u32
}

/// Parses one annotation line. `line_no` is used in error messages.
pub fn parse_annotation(
    line: &str,
    line_no: usize,
    lexicon: &PhonemeLexicon,
    cfg: &FeatureConfig,
) -> Result<MusicalScore> {
    let fields: Vec<&str> = line.trim().split('|').collect();
    if fields.len() != 4 {
        return Err(parse_err(
            line_no,
            "line",
            format!("expected 4 |-separated fields, got {}", fields.len()),
        ));
    }
    let utt_id = fields[0].trim();
    if utt_id.is_empty() {
        return Err(parse_err(line_no, "utt_id", "empty utterance id"));
    }
    let phonemes: Vec<&str> = fields[1].split_whitespace().collect();
    let notes: Vec<&str> = fields[2].split_whitespace().collect();
    let durs: Vec<&str> = fields[3].split_whitespace().collect();
    if phonemes.is_empty() {
        return Err(parse_err(line_no, "phonemes", "no phonemes"));
    }
    if notes.len() != phonemes.len() || durs.len() != phonemes.len() {
        return Err(parse_err(
            line_no,
            "line",
            format!(
                "field token counts differ: {} phonemes, {} notes, {} durations",
                phonemes.len(),
                notes.len(),
                durs.len()
            ),
        ));
    }

    let mut phoneme_ids = Vec::with_capacity(phonemes.len());
    for p in &phonemes {
        let id = lexicon
            .id(p)
            .ok_or_else(|| parse_err(line_no, "phonemes", format!("unknown phoneme `{p}`")))?;
        phoneme_ids.push(id);
    }

    let mut note_pitch_ids = Vec::with_capacity(notes.len());
    for n in &notes {
        let v: i64 = n
            .parse()
            .map_err(|_| parse_err(line_no, "notes", format!("bad note `{n}`")))?;
        if !(0..=127).contains(&v) {
            return Err(parse_err(
                line_no,
                "notes",
                format!("note {v} outside [0, 127]"),
            ));
        }
        note_pitch_ids.push(v as u8);
    }

    let mut durations_frames = Vec::with_capacity(durs.len());
    for d in &durs {
        let sec: f64 = d
            .parse()
            .map_err(|_| parse_err(line_no, "durations", format!("bad duration `{d}`")))?;
        if !(sec > 0.0) {
            return Err(parse_err(
                line_no,
                "durations",
                format!("non-positive duration {sec}"),
            ));
        }
        let frames = seconds_to_frames(sec, cfg);
        if frames == 0 {
            return Err(parse_err(
                line_no,
                "durations",
                format!("duration {sec}s rounds to zero frames"),
            ));
        }
        durations_frames.push(frames);
    }

    Ok(MusicalScore {
        utt_id: utt_id.to_string(),
        phoneme_ids,
        note_pitch_ids,
        durations_frames,
    })
}

/// Converts a lyrics line to a phoneme id sequence through a G2P converter.
pub fn lyrics_to_phonemes(
    text: &str,
    lexicon: &PhonemeLexicon,
    g2p: &dyn G2p,
) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(SvsError::other("empty lyrics"));
    }
    let symbols = g2p.to_phonemes(text)?;
    if symbols.is_empty() {
        return Err(SvsError::other("empty lyrics"));
    }
    symbols
        .iter()
        .map(|s| {
            lexicon
                .id(s)
                .ok_or_else(|| SvsError::UnknownPhoneme(s.clone()))
        })
        .collect()
}

/// Loads a corpus manifest. Each utterance becomes score- or phoneme-shaped
/// depending on its payload.
pub fn parse_manifest(
    path: &Path,
    lexicon: &PhonemeLexicon,
    g2p: &dyn G2p,
    cfg: &FeatureConfig,
) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(
                line_no,
                "manifest",
                format!("expected 3 tab-separated columns, got {}", cols.len()),
            ));
        }
        let singer_id = cols[1].trim();
        if singer_id.is_empty() {
            return Err(parse_err(line_no, "singer_id", "empty singer id"));
        }
        let wav = base.join(cols[0].trim());
        let payload = cols[2].trim();
        let content = if payload.contains('|') {
            UtteranceContent::Score(parse_annotation(payload, line_no, lexicon, cfg)?)
        } else {
            UtteranceContent::Phonemes(lyrics_to_phonemes(payload, lexicon, g2p)?)
        };
        out.push(Utterance {
            audio_path: wav,
            singer_id: singer_id.to_string(),
            content,
        });
    }
    Ok(out)
}

/// Pairs an utterance with its extracted features.
pub fn prepare_utterance(utt: Utterance, features: FeatureBundle) -> PreparedUtterance {
    let mut utt = utt;
    if let UtteranceContent::Score(score) = &mut utt.content {
        score.align_to_frames(features.num_frames() as u32);
    }
    PreparedUtterance {
        singer_id: utt.singer_id,
        content: utt.content,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FeatureConfig;
    use proptest::prelude::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn bundled_lexicon_has_61_symbols() {
        let lex = PhonemeLexicon::bundled();
        assert_eq!(lex.size(), 61);
        assert_eq!(lex.id("sh"), Some(17));
        assert_eq!(lex.symbol(0), Some("<blank>"));
        assert_eq!(lex.symbol(lex.id("ang").unwrap()).unwrap(), "ang");
    }

    #[test]
    fn parses_reference_annotation() {
        let lex = PhonemeLexicon::bundled();
        let score = parse_annotation("u1|sh ang|60 60|0.20 0.35", 1, &lex, &cfg()).unwrap();
        assert_eq!(score.len(), 2);
        assert_eq!(score.note_pitch_ids, vec![60, 60]);
        // round(0.20 * 24000 / 256) = 19, round(0.35 * 24000 / 256) = 33
        assert_eq!(score.durations_frames, vec![19, 33]);
        // same pitch => one note of 52 frames
        assert_eq!(score.note_groups(), vec![0..2]);
        assert_eq!(score.note_duration_per_phoneme(), vec![52, 52]);
    }

    #[test]
    fn unknown_phoneme_rejected() {
        let lex = PhonemeLexicon::bundled();
        let err = parse_annotation("u1|qq ang|60 60|0.2 0.2", 7, &lex, &cfg()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown phoneme"), "{msg}");
        assert!(msg.contains("line 7"), "{msg}");
    }

    #[test]
    fn rest_note_accepted() {
        let lex = PhonemeLexicon::bundled();
        let score = parse_annotation("u2|a|0|0.10", 1, &lex, &cfg()).unwrap();
        assert_eq!(score.note_pitch_ids, vec![0]);
    }

    #[test]
    fn malformed_lines_rejected() {
        let lex = PhonemeLexicon::bundled();
        assert!(parse_annotation("u1|a|60", 1, &lex, &cfg()).is_err());
        assert!(parse_annotation("u1|a b|60|0.2 0.2", 1, &lex, &cfg()).is_err());
        assert!(parse_annotation("u1|a|60|-0.5", 1, &lex, &cfg()).is_err());
        assert!(parse_annotation("u1|a|200|0.5", 1, &lex, &cfg()).is_err());
    }

    #[test]
    fn annotation_round_trip_is_loss_free() {
        let lex = PhonemeLexicon::bundled();
        let line = "u3|h ai sh ang|62 62 64 64|0.21 0.33 0.18 0.27";
        let a = parse_annotation(line, 1, &lex, &cfg()).unwrap();
        let b = parse_annotation(&a.to_annotation_line(&lex, &cfg()), 1, &lex, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lyrics_through_toy_g2p() {
        let lex = PhonemeLexicon::bundled();
        let g2p = LexiconG2p::bundled_toy();
        // Hand-built expectation from the toy table.
        let ids = lyrics_to_phonemes("ba ma shang hai", &lex, &g2p).unwrap();
        let expected: Vec<usize> = ["b", "a", "m", "a", "sh", "ang", "h", "ai"]
            .iter()
            .map(|s| lex.id(s).unwrap())
            .collect();
        assert_eq!(ids, expected);
        assert!(!ids.contains(&BLANK_ID));
    }

    #[test]
    fn empty_lyrics_rejected() {
        let lex = PhonemeLexicon::bundled();
        let g2p = LexiconG2p::bundled_toy();
        let err = lyrics_to_phonemes("   ", &lex, &g2p).unwrap_err();
        assert!(err.to_string().contains("empty lyrics"));
    }

    #[test]
    fn single_syllable_maps_to_initial_final_pair() {
        let lex = PhonemeLexicon::bundled();
        let g2p = LexiconG2p::bundled_toy();
        let ids = lyrics_to_phonemes("shang", &lex, &g2p).unwrap();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn align_to_frames_absorbs_residual_in_last_note() {
        let lex = PhonemeLexicon::bundled();
        let mut score = parse_annotation("u1|sh ang|60 60|0.20 0.35", 1, &lex, &cfg()).unwrap();
        score.align_to_frames(54);
        assert_eq!(score.durations_frames, vec![19, 35]);
        assert_eq!(score.total_frames(), 54);
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            n in 1usize..8,
            seed in 0u64..10_000,
        ) {
            let lex = PhonemeLexicon::bundled();
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); state >> 33 };
            let phoneme_ids: Vec<usize> = (0..n).map(|_| (next() % 61 + 1) as usize).collect();
            let note_pitch_ids: Vec<u8> = (0..n).map(|_| (next() % 80 + 30) as u8).collect();
            let durations_frames: Vec<u32> = (0..n).map(|_| (next() % 60 + 5) as u32).collect();
            let score = MusicalScore {
                utt_id: "prop".into(),
                phoneme_ids, note_pitch_ids, durations_frames,
            };
            let line = score.to_annotation_line(&lex, &cfg());
            let back = parse_annotation(&line, 1, &lex, &cfg()).unwrap();
            prop_assert_eq!(score, back);
        }
    }
}
