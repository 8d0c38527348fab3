//! Vocabularies, greedy BPE, and character/subword/word alignment.
//!
//! Characters are Unicode scalar values. Whitespace never becomes a
//! character token: word boundaries live only in the alignment maps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Specials occupy the first ids, in this order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl SpecialIds {
    pub const FIXED: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from `tokens`, which must start with the five
    /// specials in order and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Config(format!(
                "vocabulary must begin with {}",
                SPECIALS.join(",")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Config(format!("invalid vocabulary entry at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { entries: tokens, index })
    }

    fn with_specials() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.entries.len());
            self.entries.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::FIXED
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(SpecialIds::FIXED.unk)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// True for non-special entries longer than one character.
    fn is_merged(&self, id: usize) -> bool {
        id >= SPECIALS.len() && self.entries[id].chars().nth(1).is_some()
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.entries.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Trains a greedy byte-pair vocabulary and a character vocabulary.
///
/// Merges never cross word boundaries. Pair frequency ties go to the
/// lexicographically smallest pair. If the corpus runs out of pairs before
/// `num_merges`, training stops early.
pub fn build_vocabs(corpus: &[Vec<String>], num_merges: usize) -> Result<(Vocab, Vocab)> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.iter().flatten() {
        if !w.is_empty() {
            *word_counts.entry(w.as_str()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Config("cannot build vocabularies from an empty corpus".into()));
    }

    let mut chars: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    chars.sort_unstable();
    chars.dedup();

    let mut char_vocab = Vocab::with_specials();
    let mut sub_vocab = Vocab::with_specials();
    for c in &chars {
        char_vocab.push(c.to_string());
        sub_vocab.push(c.to_string());
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| (w.chars().map(String::from).collect(), n))
        .collect();

    for done in 0..num_merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for p in syms.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &pairs {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((pair, n));
            }
        }
        let Some(((left, right), _)) = best else {
            log::warn!("BPE stopped after {done} of {num_merges} merges: no pairs left");
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &left, &right);
        }
        sub_vocab.push(merged);
    }
    Ok((sub_vocab, char_vocab))
}

fn merge_pair(syms: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Segments one word into `(subword id, char count)` pieces.
///
/// Starts from single characters and repeatedly merges the adjacent pair
/// whose concatenation is the earliest-learned merged unit. Characters
/// unknown to the vocabulary become single-character UNK pieces that never
/// merge.
pub fn segment_word(word: &str, vocab: &Vocab) -> Vec<(usize, usize)> {
    // (text, id, char count); id None marks an unmergeable UNK piece.
    let mut syms: Vec<(String, Option<usize>, usize)> = word
        .chars()
        .map(|c| {
            let s = c.to_string();
            let id = vocab.id(&s).filter(|&i| !SpecialIds::FIXED.is_special(i));
            (s, id, 1)
        })
        .collect();
    loop {
        let mut best: Option<usize> = None;
        let mut best_id = usize::MAX;
        for i in 0..syms.len().saturating_sub(1) {
            if syms[i].1.is_none() || syms[i + 1].1.is_none() {
                continue;
            }
            let cat = format!("{}{}", syms[i].0, syms[i + 1].0);
            if let Some(id) = vocab.id(&cat).filter(|&id| vocab.is_merged(id)) {
                if id < best_id {
                    best_id = id;
                    best = Some(i);
                }
            }
        }
        let Some(_) = best else { break };
        let target = vocab.token(best_id).unwrap().to_string();
        let mut out = Vec::with_capacity(syms.len());
        let mut i = 0;
        while i < syms.len() {
            if i + 1 < syms.len()
                && syms[i].1.is_some()
                && syms[i + 1].1.is_some()
                && syms[i].0.len() + syms[i + 1].0.len() == target.len()
                && format!("{}{}", syms[i].0, syms[i + 1].0) == target
            {
                out.push((target.clone(), Some(best_id), syms[i].2 + syms[i + 1].2));
                i += 2;
            } else {
                out.push(syms[i].clone());
                i += 1;
            }
        }
        syms = out;
    }
    syms.into_iter()
        .map(|(_, id, n)| (id.unwrap_or(SpecialIds::FIXED.unk), n))
        .collect()
}

/// One example tokenized at both granularities, with every alignment map.
///
/// Both sequences start with CLS and end with SEP; specials align to each
/// other and to no word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub words: Vec<String>,
    pub subword_ids: Vec<usize>,
    pub char_ids: Vec<usize>,
    pub char_to_subword: Vec<usize>,
    pub char_to_word: Vec<Option<usize>>,
    pub subword_to_word: Vec<Option<usize>>,
    pub first_subword_of_word: Vec<usize>,
    pub first_char_of_word: Vec<usize>,
    /// Half-open character range per subword.
    pub subword_char_span: Vec<(usize, usize)>,
}

impl TokenizedPair {
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.subword_ids.len()
    }

    pub fn num_chars(&self) -> usize {
        self.char_ids.len()
    }

    /// Characters of subword `s` (specials give their marker string).
    pub fn subword_text(&self, s: usize) -> String {
        let (a, b) = self.subword_char_span[s];
        match self.subword_to_word[s] {
            None => String::new(),
            Some(w) => {
                let start = self.first_char_of_word[w];
                self.words[w].chars().skip(a - start).take(b - a).collect()
            }
        }
    }
}

/// Caps on sequence lengths (including CLS/SEP).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthCaps {
    pub max_subwords: usize,
    pub max_chars: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        Self {
            max_subwords: usize::MAX,
            max_chars: usize::MAX,
        }
    }
}

pub fn tokenize_pair(words: &[String], sub_vocab: &Vocab, char_vocab: &Vocab) -> Result<TokenizedPair> {
    tokenize_pair_capped(words, sub_vocab, char_vocab, LengthCaps::default())
}

/// Tokenizes `words`, dropping trailing words so that neither sequence
/// exceeds its cap. Errors if not even the first word fits.
pub fn tokenize_pair_capped(
    words: &[String],
    sub_vocab: &Vocab,
    char_vocab: &Vocab,
    caps: LengthCaps,
) -> Result<TokenizedPair> {
    if words.is_empty() {
        return Err(Error::Input("cannot tokenize an empty word sequence".into()));
    }
    if let Some(i) = words.iter().position(|w| w.is_empty()) {
        return Err(Error::Input(format!("word {i} is empty")));
    }
    let sp = SpecialIds::FIXED;
    let mut p = TokenizedPair {
        words: Vec::new(),
        subword_ids: vec![sp.cls],
        char_ids: vec![sp.cls],
        char_to_subword: vec![0],
        char_to_word: vec![None],
        subword_to_word: vec![None],
        first_subword_of_word: Vec::new(),
        first_char_of_word: Vec::new(),
        subword_char_span: vec![(0, 1)],
    };
    for (w, word) in words.iter().enumerate() {
        let pieces = segment_word(word, sub_vocab);
        let nchars = word.chars().count();
        if p.subword_ids.len() + pieces.len() + 1 > caps.max_subwords || p.char_ids.len() + nchars + 1 > caps.max_chars
        {
            if w == 0 {
                return Err(Error::Input(format!(
                    "first word {word:?} alone exceeds the length caps"
                )));
            }
            log::warn!("truncated example from {} to {} words", words.len(), w);
            break;
        }
        p.first_subword_of_word.push(p.subword_ids.len());
        p.first_char_of_word.push(p.char_ids.len());
        let mut chars = word.chars();
        for (sid, n) in pieces {
            let s = p.subword_ids.len();
            let start = p.char_ids.len();
            p.subword_ids.push(sid);
            p.subword_to_word.push(Some(w));
            for c in chars.by_ref().take(n) {
                let mut buf = [0u8; 4];
                p.char_ids.push(char_vocab.id_or_unk(c.encode_utf8(&mut buf)));
                p.char_to_subword.push(s);
                p.char_to_word.push(Some(w));
            }
            p.subword_char_span.push((start, p.char_ids.len()));
        }
        p.words.push(word.clone());
    }
    let sep_sub = p.subword_ids.len();
    let sep_char = p.char_ids.len();
    p.subword_ids.push(sp.sep);
    p.subword_to_word.push(None);
    p.subword_char_span.push((sep_char, sep_char + 1));
    p.char_ids.push(sp.sep);
    p.char_to_subword.push(sep_sub);
    p.char_to_word.push(None);
    Ok(p)
}

/// Per-character label of the containing subword, for the matching loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharWordLabels {
    pub labels: Vec<usize>,
    pub valid_mask: Vec<bool>,
}

pub fn char_word_labels(pair: &TokenizedPair) -> CharWordLabels {
    let valid_mask: Vec<bool> = pair.char_to_word.iter().map(Option::is_some).collect();
    let labels = pair
        .char_to_subword
        .iter()
        .zip(&valid_mask)
        .map(|(&s, &v)| if v { s } else { 0 })
        .collect();
    CharWordLabels { labels, valid_mask }
}
