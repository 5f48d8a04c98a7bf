//! Tokenization, prompt construction, sequence packing, token categories and
//! multiple-choice tasks.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const INST: &str = "[INST]";
pub const INST_END: &str = "[/INST]";
pub const UNK: &str = "[UNK]";

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, INST, INST_END, UNK];

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const INST_ID: usize = 3;
pub const INST_END_ID: usize = 4;
pub const UNK_ID: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Char,
    /// Alphanumeric runs are single tokens; every other character stands alone.
    Word,
}

/// Bijective token ↔ id map with the special tokens at ids `0..6`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vocabulary {
    pub mode: TokenizerMode,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn segment(text: &str, mode: TokenizerMode) -> Vec<&str> {
    match mode {
        TokenizerMode::Char => text
            .char_indices()
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
        TokenizerMode::Word => {
            let mut out = Vec::new();
            let mut start: Option<usize> = None;
            for (i, c) in text.char_indices() {
                if c.is_alphanumeric() {
                    start.get_or_insert(i);
                } else {
                    if let Some(s) = start.take() {
                        out.push(&text[s..i]);
                    }
                    out.push(&text[i..i + c.len_utf8()]);
                }
            }
            if let Some(s) = start {
                out.push(&text[s..]);
            }
            out
        }
    }
}

impl Vocabulary {
    /// Build from corpus text; non-special tokens are sorted for stable ids.
    pub fn build(text: &str, mode: TokenizerMode) -> Self {
        let pieces: BTreeSet<&str> = segment(text, mode)
            .into_iter()
            .filter(|p| !SPECIALS.contains(p))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(pieces.into_iter().map(str::to_string))
            .collect();
        Vocabulary::from_tokens(mode, tokens).expect("specials are unique")
    }

    pub fn from_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Format(
                "vocabulary must start with the reserved special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary {
            mode,
            tokens,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Unknown pieces map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        segment(text, self.mode)
            .into_iter()
            .map(|p| {
                if SPECIALS.contains(&p) {
                    UNK_ID
                } else {
                    self.id(p).unwrap_or(UNK_ID)
                }
            })
            .collect()
    }

    /// Special ids render as their bracketed names, so `[UNK]` stays visible.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            mode: TokenizerMode,
            tokens: Vec<String>,
        }
        let raw: Raw =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("vocabulary json: {e}")))?;
        Vocabulary::from_tokens(raw.mode, raw.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&s)
    }

    /// SHA-256 over the mode and token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.mode).as_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenCategory {
    SpecialPunct,
    Content,
    Function,
    NumSymOther,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 4] = [
        TokenCategory::SpecialPunct,
        TokenCategory::Content,
        TokenCategory::Function,
        TokenCategory::NumSymOther,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenCategory::SpecialPunct => "special_punct",
            TokenCategory::Content => "content",
            TokenCategory::Function => "function",
            TokenCategory::NumSymOther => "num_sym_other",
        }
    }
}

fn function_words() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../data/function_words.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Heuristic part-of-speech bucket for a token.
pub fn categorize_token(text: &str, is_special: bool) -> TokenCategory {
    if is_special {
        return TokenCategory::SpecialPunct;
    }
    let t = text.trim();
    if t.is_empty() {
        return TokenCategory::NumSymOther;
    }
    if t.chars()
        .all(|c| c.is_ascii_punctuation() || is_unicode_punct(c))
    {
        return if t.chars().any(is_symbol) {
            TokenCategory::NumSymOther
        } else {
            TokenCategory::SpecialPunct
        };
    }
    if function_words().contains(t.to_lowercase().as_str()) {
        return TokenCategory::Function;
    }
    if t.chars().any(char::is_alphabetic) {
        return TokenCategory::Content;
    }
    TokenCategory::NumSymOther
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '“' | '”' | '‘' | '’' | '—' | '–' | '…' | '«' | '»')
}

/// Symbols that the POS convention files under SYM rather than PUNCT.
fn is_symbol(c: char) -> bool {
    matches!(
        c,
        '$' | '%' | '+' | '<' | '=' | '>' | '^' | '|' | '~' | '#' | '&' | '@' | '*' | '\\'
    )
}

/// Category of every position in a token sequence.
///
/// In character mode a character inherits the category of the word it
/// belongs to, so the `h` in `the` counts as a function-word position.
pub fn categorize_sequence(vocab: &Vocabulary, ids: &[usize]) -> Vec<TokenCategory> {
    let mut out: Vec<TokenCategory> = Vec::with_capacity(ids.len());
    let text = |i: usize| vocab.token(i).unwrap_or(UNK);
    match vocab.mode {
        TokenizerMode::Word => {
            for &i in ids {
                out.push(categorize_token(text(i), vocab.is_special(i)));
            }
        }
        TokenizerMode::Char => {
            let mut p = 0;
            while p < ids.len() {
                let is_word_char =
                    |i: usize| !vocab.is_special(i) && text(i).chars().all(char::is_alphanumeric);
                if is_word_char(ids[p]) {
                    let start = p;
                    while p < ids.len() && is_word_char(ids[p]) {
                        p += 1;
                    }
                    let word: String = ids[start..p].iter().map(|&i| text(i)).collect();
                    let cat = categorize_token(&word, false);
                    out.extend(std::iter::repeat_n(cat, p - start));
                } else {
                    out.push(categorize_token(text(ids[p]), vocab.is_special(ids[p])));
                    p += 1;
                }
            }
        }
    }
    out
}

/// Fixed-length windows cut from a token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub seq_len: usize,
    pub windows: Vec<Vec<usize>>,
    /// `false` where the window holds padding.
    pub real: Vec<Vec<bool>>,
}

impl Packed {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Next-token targets for window `w`; padded positions and the final
    /// position have none.
    pub fn targets(&self, w: usize) -> Vec<Option<usize>> {
        let (win, real) = (&self.windows[w], &self.real[w]);
        (0..win.len())
            .map(|i| (i + 1 < win.len() && real[i] && real[i + 1]).then(|| win[i + 1]))
            .collect()
    }

    pub fn real_tokens(&self) -> usize {
        self.real.iter().flatten().filter(|r| **r).count()
    }
}

/// Contiguous non-overlapping windows; the tail window is padded.
pub fn pack_sequences(stream: &[usize], seq_len: usize) -> Result<Packed> {
    if seq_len < 2 {
        return Err(Error::config(format!(
            "seq_len must be at least 2, got {seq_len}"
        )));
    }
    let mut windows = Vec::new();
    let mut real = Vec::new();
    for chunk in stream.chunks(seq_len) {
        let mut w = chunk.to_vec();
        let mut r = vec![true; chunk.len()];
        w.resize(seq_len, PAD_ID);
        r.resize(seq_len, false);
        windows.push(w);
        real.push(r);
    }
    Ok(Packed {
        seq_len,
        windows,
        real,
    })
}

/// One multiple-choice item; one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCTask {
    #[serde(default)]
    pub sys_prompt: String,
    pub context: String,
    pub continuations: Vec<String>,
    pub gold: usize,
    /// Grouping label for per-task accuracy tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl MCTask {
    pub fn validate(&self) -> Result<()> {
        if self.continuations.is_empty() {
            return Err(Error::data("a task needs at least one continuation"));
        }
        if self.gold >= self.continuations.len() {
            return Err(Error::data(format!(
                "gold index {} out of range for {} continuations",
                self.gold,
                self.continuations.len()
            )));
        }
        Ok(())
    }

    pub fn group(&self) -> &str {
        self.task.as_deref().unwrap_or("tasks")
    }
}

pub fn parse_tasks(text: &str) -> Result<Vec<MCTask>> {
    let mut tasks = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: MCTask = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("task line {}: {e}", n + 1)))?;
        t.validate()
            .map_err(|e| Error::data(format!("task line {}: {e}", n + 1)))?;
        tasks.push(t);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<MCTask>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read tasks {}: {e}", path.display())))?;
    parse_tasks(&text)
}

pub fn write_tasks(path: &Path, tasks: &[MCTask]) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Token ids of a filled prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub ids: Vec<usize>,
    /// Index range of the continuation tokens within `ids`.
    pub continuation: Range<usize>,
}

/// `[BOS] [INST] {sys prompt} [/INST] {context} {continuation} [EOS]`.
///
/// Segments are concatenated as-is; a continuation that should be separated
/// from its context carries its own leading space.
pub fn build_prompt(vocab: &Vocabulary, task: &MCTask, index: usize) -> Result<Prompt> {
    let cont = task.continuations.get(index).ok_or_else(|| {
        Error::data(format!(
            "continuation {index} out of range ({} available)",
            task.continuations.len()
        ))
    })?;
    let mut ids = vec![BOS_ID, INST_ID];
    ids.extend(vocab.tokenize(&task.sys_prompt));
    ids.push(INST_END_ID);
    ids.extend(vocab.tokenize(&task.context));
    let start = ids.len();
    ids.extend(vocab.tokenize(cont));
    let end = ids.len();
    ids.push(EOS_ID);
    Ok(Prompt {
        ids,
        continuation: start..end,
    })
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

impl LanguageModel for crate::backbone::Model {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_lm(tokens, None)
    }
}

/// `exp` of the mean next-token negative log-likelihood over the whole sequence.
pub fn sequence_perplexity(model: &dyn LanguageModel, ids: &[usize]) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::data("perplexity needs at least two tokens"));
    }
    let logits = model.logits(ids)?;
    let mut nll = 0.0;
    for i in 0..ids.len() - 1 {
        let row = logits.row(i);
        let target = *row
            .get(ids[i + 1])
            .ok_or_else(|| Error::data(format!("token {} outside model vocabulary", ids[i + 1])))?;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        nll += lse - target;
    }
    Ok((nll / (ids.len() - 1) as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct McScore {
    pub predicted: usize,
    pub perplexities: Vec<f64>,
}

/// Lowest-perplexity continuation; ties go to the lowest index.
pub fn score_mc_task(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    task: &MCTask,
) -> Result<McScore> {
    task.validate()?;
    let perplexities = (0..task.continuations.len())
        .map(|i| sequence_perplexity(model, &build_prompt(vocab, task, i)?.ids))
        .collect::<Result<Vec<_>>>()?;
    let mut predicted = 0;
    for (i, p) in perplexities.iter().enumerate() {
        if *p < perplexities[predicted] {
            predicted = i;
        }
    }
    Ok(McScore {
        predicted,
        perplexities,
    })
}

const TOY_WORDS: [&str; 32] = [
    "apple", "river", "stone", "cloud", "maple", "tiger", "lemon", "piano", "ocean", "candle",
    "forest", "garden", "silver", "rocket", "pepper", "window", "marble", "violet", "copper",
    "harbor", "meadow", "falcon", "ginger", "saddle", "lantern", "orchid", "timber", "walnut",
    "canyon", "velvet", "bamboo", "glacier",
];

/// Four-way copy tasks: the gold continuation repeats the keyword from the
/// context. Gold positions are balanced across the four slots.
pub fn toy_copy_tasks(n: usize, seed: u64) -> Vec<MCTask> {
    let mut rng = seeded_rng(seed);
    let mut golds: Vec<usize> = (0..n).map(|i| i % 4).collect();
    golds.shuffle(&mut rng);
    golds
        .into_iter()
        .map(|gold| {
            let mut words: Vec<&str> = TOY_WORDS.to_vec();
            words.shuffle(&mut rng);
            let key = words[0];
            let mut conts: Vec<String> = words[1..4].iter().map(|w| format!(" {w}")).collect();
            conts.insert(gold, format!(" {key}"));
            MCTask {
                sys_prompt: String::new(),
                context: format!("key {key}, echo"),
                continuations: conts,
                gold,
                task: Some("copy".into()),
            }
        })
        .collect()
}
