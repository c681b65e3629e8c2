//! Human-centric word selection and the prompt → token-index mapping.
//!
//! A [`WordSelector`] picks person and action words from the prompt; every
//! subword token whose character span overlaps a selected word contributes
//! its position to the human-centric index set `I_h`.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};
use crate::tensor::normal_matrix;

/// A selected word and its byte span `[start, end)` in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

pub trait WordSelector: Send + Sync {
    fn select(&self, text: &str) -> Vec<WordSpan>;
}

const PERSON_TERMS: &[&str] = &[
    "man", "men", "woman", "women", "person", "people", "persons", "girl", "girls", "boy", "boys",
    "child", "children", "kid", "kids", "lady", "ladies", "guy", "guys", "baby", "toddler",
    "teenager", "adult", "human", "humans", "player", "players", "athlete", "athletes", "dancer",
    "dancers", "skier", "surfer", "runner", "climber", "swimmer", "gymnast", "couple", "family",
    "mother", "father", "son", "daughter", "friends", "student", "students", "worker", "chef",
    "soldier", "doctor", "nurse", "skateboarder", "cyclist", "rider", "model", "actor", "actress",
];

const ACTION_TERMS: &[&str] = &[
    "yoga", "tango", "ballet", "dance", "dances", "run", "runs", "jump", "jumps", "kick", "kicks",
    "sit", "sits", "stand", "stands", "walk", "walks", "squat", "pose", "poses", "stretch",
    "stretches", "karate", "boxing", "tennis", "football", "soccer", "basketball", "baseball",
    "golf", "ski", "surf", "swim", "climb", "hug", "hugs", "wave", "waves", "salute", "pushup",
    "pushups", "handstand", "cartwheel", "split", "splits", "lunge",
];

/// `-ing` words that are not human actions.
const GERUND_STOPLIST: &[&str] = &[
    "doing", "being", "having", "going", "getting", "thing", "things", "something", "nothing",
    "anything", "everything", "morning", "evening", "building", "buildings", "ceiling",
    "clothing", "wedding", "king", "ring", "rings", "spring", "string", "wing", "wings",
    "during", "painting", "lighting", "setting", "background", "ping", "sing", "bring", "sling",
    "swing", "ding", "wring", "outing", "railing", "awning", "frosting", "filling", "icing",
];

/// Lexicon lookup plus an optional `-ing` gerund heuristic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconSelector {
    terms: BTreeSet<String>,
    gerunds: bool,
    stoplist: BTreeSet<String>,
}

impl Default for LexiconSelector {
    fn default() -> Self {
        Self {
            terms: PERSON_TERMS
                .iter()
                .chain(ACTION_TERMS)
                .map(|s| s.to_string())
                .collect(),
            gerunds: true,
            stoplist: GERUND_STOPLIST.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LexiconSelector {
    pub fn from_terms<I, S>(terms: I, gerunds: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            terms: terms
                .into_iter()
                .map(|t| t.as_ref().trim().to_lowercase())
                .filter(|t| !t.is_empty())
                .collect(),
            gerunds,
            stoplist: GERUND_STOPLIST.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Plain-text lexicon: UTF-8, one term per line; blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_file(path: &Path, gerunds: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HcpError::io(path, e))?;
        Ok(Self::from_terms(
            text.lines().filter(|l| !l.trim_start().starts_with('#')),
            gerunds,
        ))
    }

    fn is_human_centric(&self, word: &str) -> bool {
        if self.terms.contains(word) {
            return true;
        }
        self.gerunds
            && word.len() > 5
            && word.ends_with("ing")
            && word.chars().all(|c| c.is_ascii_alphabetic())
            && !self.stoplist.contains(word)
    }
}

impl WordSelector for LexiconSelector {
    fn select(&self, text: &str) -> Vec<WordSpan> {
        words(text)
            .filter(|w| self.is_human_centric(&w.word))
            .collect()
    }
}

/// Lowercased maximal alphanumeric runs with byte spans.
pub fn words(text: &str) -> impl Iterator<Item = WordSpan> + '_ {
    let mut chars = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = chars.peek() {
            if c.is_alphanumeric() {
                break;
            }
            chars.next();
        }
        let (start, _) = *chars.peek()?;
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if !c.is_alphanumeric() {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        Some(WordSpan {
            word: text[start..end].to_lowercase(),
            start,
            end,
        })
    })
}

pub fn extract_human_centric_words(text: &str, selector: &dyn WordSelector) -> Result<Vec<WordSpan>> {
    if text.trim().is_empty() {
        return Err(HcpError::Validation("prompt text is empty".into()));
    }
    Ok(selector.select(text))
}

/// One token of a tokenised prompt. Special and padding tokens carry no span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub span: Option<(usize, usize)>,
}

pub trait Tokenizer: Send + Sync {
    /// Token sequence of exactly [`capacity`](Self::capacity) entries.
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn capacity(&self) -> usize;
    fn vocab_size(&self) -> usize;
}

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// Word-piece style toy tokenizer: `BOS`, words split into pieces of at most
/// `max_piece_len` characters, `EOS`, then padding to capacity. Ids are an
/// FNV-1a hash of the piece.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTokenizer {
    pub capacity: usize,
    pub vocab_size: usize,
    pub max_piece_len: usize,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self {
            capacity: 16,
            vocab_size: 4096,
            max_piece_len: 5,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Tokenizer for ToyTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = vec![Token {
            id: BOS_ID,
            span: None,
        }];
        let room = self.capacity.saturating_sub(1);
        'outer: for w in words(text) {
            let mut piece_start = w.start;
            let chars: Vec<(usize, char)> = text[w.start..w.end].char_indices().collect();
            for chunk in chars.chunks(self.max_piece_len.max(1)) {
                if out.len() >= room {
                    break 'outer;
                }
                let (last_off, last_c) = *chunk.last().expect("non-empty chunk");
                let end = w.start + last_off + last_c.len_utf8();
                let piece = text[piece_start..end].to_lowercase();
                let id = 3 + (fnv1a(&piece) % (self.vocab_size as u64 - 3)) as u32;
                out.push(Token {
                    id,
                    span: Some((piece_start, end)),
                });
                piece_start = end;
            }
        }
        if out.len() < self.capacity {
            out.push(Token {
                id: EOS_ID,
                span: None,
            });
        }
        while out.len() < self.capacity {
            out.push(Token {
                id: PAD_ID,
                span: None,
            });
        }
        out.truncate(self.capacity);
        out
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Indices of every token overlapping a selected word, ascending and
/// deduplicated.
pub fn map_words_to_token_indices(
    tokens: &[Token],
    spans: &[WordSpan],
    text_len: usize,
) -> Result<Vec<usize>> {
    let mut out = BTreeSet::new();
    for span in spans {
        if span.start >= span.end || span.end > text_len {
            return Err(HcpError::Validation(format!(
                "word span {}..{} lies outside the prompt (length {text_len})",
                span.start, span.end
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if let Some((s, e)) = t.span {
                if s < span.end && span.start < e {
                    out.insert(i);
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Frozen toy text encoder: token embedding table plus learned-free
/// sinusoidal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    pub table: Array2<f64>,
    pub positions: Array2<f64>,
}

impl ToyTextEncoder {
    pub fn new(seed: u64, vocab_size: usize, capacity: usize, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = normal_matrix(&mut rng, vocab_size, embed_dim, 1.0);
        let positions = Array2::from_shape_fn((capacity, embed_dim), |(p, j)| {
            let freq = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / embed_dim as f64);
            let a = p as f64 * freq;
            0.1 * if j % 2 == 0 { a.sin() } else { a.cos() }
        });
        Self { table, positions }
    }

    pub fn embed_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        if tokens.len() > self.positions.nrows() {
            return Err(HcpError::shape(
                "text encoder: tokens vs capacity",
                &[tokens.len()],
                &[self.positions.nrows()],
            ));
        }
        let d = self.embed_dim();
        let mut out = Array2::<f64>::zeros((tokens.len(), d));
        for (i, t) in tokens.iter().enumerate() {
            let id = t.id as usize;
            if id >= self.table.nrows() {
                return Err(HcpError::Validation(format!("token id {id} out of vocabulary")));
            }
            let mut row = out.row_mut(i);
            row.assign(&self.table.row(id));
            row += &self.positions.row(i);
        }
        Ok(out)
    }
}

/// Tokenised prompt with its embeddings and human-centric indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub raw_text: String,
    pub tokens: Vec<Token>,
    pub embeddings: Array2<f64>,
    pub human_indices: Vec<usize>,
}

impl PromptBundle {
    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Token indices covering `word` (case-insensitive) in the raw text.
    pub fn indices_for_word(&self, word: &str) -> Result<Vec<usize>> {
        let target = word.to_lowercase();
        let spans: Vec<WordSpan> = words(&self.raw_text).filter(|w| w.word == target).collect();
        if spans.is_empty() {
            return Err(HcpError::Validation(format!(
                "word `{word}` not in prompt; available: {}",
                self.available_words().join(", ")
            )));
        }
        let idx = map_words_to_token_indices(&self.tokens, &spans, self.raw_text.len())?;
        if idx.is_empty() {
            return Err(HcpError::Validation(format!(
                "word `{word}` was truncated out of the token sequence"
            )));
        }
        Ok(idx)
    }

    pub fn available_words(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        words(&self.raw_text)
            .map(|w| w.word)
            .filter(|w| seen.insert(w.clone()))
            .collect()
    }
}

/// Tokenizer, encoder and selector wired together.
pub struct PromptPipeline {
    pub tokenizer: Box<dyn Tokenizer>,
    pub encoder: ToyTextEncoder,
    pub selector: Box<dyn WordSelector>,
}

impl PromptPipeline {
    pub fn toy(seed: u64, capacity: usize, embed_dim: usize) -> Self {
        let tokenizer = ToyTokenizer {
            capacity,
            ..ToyTokenizer::default()
        };
        let encoder = ToyTextEncoder::new(seed, tokenizer.vocab_size, capacity, embed_dim);
        Self {
            tokenizer: Box::new(tokenizer),
            encoder,
            selector: Box::new(LexiconSelector::default()),
        }
    }

    pub fn with_selector(mut self, selector: Box<dyn WordSelector>) -> Self {
        self.selector = selector;
        self
    }

    pub fn capacity(&self) -> usize {
        self.tokenizer.capacity()
    }

    /// Bundle for inference; `I_h` may be empty and the text may be empty
    /// (the unconditional prompt).
    pub fn encode(&self, text: &str) -> Result<PromptBundle> {
        let tokens = self.tokenizer.tokenize(text);
        let embeddings = self.encoder.encode(&tokens)?;
        let spans = self.selector.select(text);
        let human_indices = map_words_to_token_indices(&tokens, &spans, text.len())?;
        Ok(PromptBundle {
            raw_text: text.to_string(),
            tokens,
            embeddings,
            human_indices,
        })
    }

    /// Bundle for a training record: rejects prompts without human-centric
    /// tokens.
    pub fn encode_for_training(&self, text: &str) -> Result<PromptBundle> {
        let spans = extract_human_centric_words(text, self.selector.as_ref())?;
        let bundle = self.encode(text)?;
        if spans.is_empty() || bundle.human_indices.is_empty() {
            return Err(HcpError::Validation(format!(
                "prompt `{text}` has no human-centric tokens"
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words_of(spans: &[WordSpan]) -> Vec<&str> {
        spans.iter().map(|s| s.word.as_str()).collect()
    }

    #[test]
    fn yoga_prompt_selects_woman_and_yoga() {
        let text = "A young woman doing yoga on beach";
        let got = extract_human_centric_words(text, &LexiconSelector::default()).unwrap();
        assert_eq!(words_of(&got), ["woman", "yoga"]);
        assert_eq!(&text[got[0].start..got[0].end], "woman");
        assert_eq!(&text[got[1].start..got[1].end], "yoga");
    }

    #[test]
    fn scenery_prompt_selects_nothing() {
        let got = extract_human_centric_words("a photo of a mountain", &LexiconSelector::default()).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn tango_prompt_golden() {
        let got = extract_human_centric_words("two men dancing tango", &LexiconSelector::default()).unwrap();
        assert_eq!(
            got,
            vec![
                WordSpan { word: "men".into(), start: 4, end: 7 },
                WordSpan { word: "dancing".into(), start: 8, end: 15 },
                WordSpan { word: "tango".into(), start: 16, end: 21 },
            ]
        );
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(extract_human_centric_words("  ", &LexiconSelector::default()).is_err());
    }

    fn tok(span: Option<(usize, usize)>) -> Token {
        Token { id: 9, span }
    }

    #[test]
    fn overlap_rule() {
        let tokens = vec![tok(None), tok(Some((0, 3))), tok(Some((4, 6))), tok(Some((7, 10))), tok(Some((11, 14))), tok(Some((14, 16)))];
        let w = |s, e| WordSpan { word: "x".into(), start: s, end: e };
        assert_eq!(map_words_to_token_indices(&tokens, &[w(7, 10)], 16).unwrap(), vec![3]);
        assert_eq!(map_words_to_token_indices(&tokens, &[w(11, 16)], 16).unwrap(), vec![4, 5]);
        assert_eq!(
            map_words_to_token_indices(&tokens, &[w(11, 16), w(7, 10), w(11, 16)], 16).unwrap(),
            vec![3, 4, 5]
        );
        assert!(map_words_to_token_indices(&tokens, &[w(11, 20)], 16).is_err());
    }

    #[test]
    fn toy_tokenizer_hand_mapped_indices() {
        // [BOS, two, men, danci, ng, tango, EOS, PAD...]
        let t = ToyTokenizer::default();
        let text = "two men dancing tango";
        let tokens = t.tokenize(text);
        assert_eq!(tokens.len(), 16);
        assert_eq!(tokens[0].id, BOS_ID);
        let spans: Vec<_> = tokens.iter().map(|t| t.span).collect();
        assert_eq!(
            &spans[..7],
            &[None, Some((0, 3)), Some((4, 7)), Some((8, 13)), Some((13, 15)), Some((16, 21)), None]
        );
        assert_eq!(tokens[6].id, EOS_ID);
        assert!(tokens[7..].iter().all(|t| t.id == PAD_ID));
        let sel = LexiconSelector::default().select(text);
        assert_eq!(map_words_to_token_indices(&tokens, &sel, text.len()).unwrap(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn tokenizer_truncates_to_capacity() {
        let t = ToyTokenizer { capacity: 4, ..ToyTokenizer::default() };
        let tokens = t.tokenize("one two three four five");
        assert_eq!(tokens.len(), 4);
        assert_eq!(tokens[3].id, EOS_ID);
    }

    #[test]
    fn pipeline_training_rejects_empty_indices() {
        let p = PromptPipeline::toy(1, 16, 8);
        assert!(p.encode_for_training("a photo of a mountain").is_err());
        let b = p.encode_for_training("A young woman doing yoga on beach").unwrap();
        assert_eq!(b.human_indices, vec![3, 5]);
        assert_eq!(b.embeddings.dim(), (16, 8));
        assert_eq!(b.indices_for_word("Yoga").unwrap(), vec![5]);
        let err = b.indices_for_word("cat").unwrap_err().to_string();
        assert!(err.contains("woman") && err.contains("beach"), "{err}");
        // stable mapping
        assert_eq!(p.encode("A young woman doing yoga on beach").unwrap(), b);
    }

    #[test]
    fn lexicon_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "# people\nastronaut\n\nMountain\n").unwrap();
        let sel = LexiconSelector::from_file(&path, false).unwrap();
        assert_eq!(words_of(&sel.select("an astronaut on a mountain, running")), ["astronaut", "mountain"]);
    }
}
