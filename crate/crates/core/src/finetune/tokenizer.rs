use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marks the start of a word inside subword units.
pub const WORD_MARK: char = '\u{2581}';
pub const UNK: &str = "<unk>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const BLANK: &str = "<blank>";
const HEADER: &str = "#avssl-tokenizer v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Character,
    Subword,
}

impl TokenizerKind {
    /// Characters for Mandarin, subword units for everything else.
    pub fn for_language(language: &str) -> Self {
        if language == "zh" {
            TokenizerKind::Character
        } else {
            TokenizerKind::Subword
        }
    }
}

/// Ordered token inventory. Ids `0..vocab.len()` are vocabulary tokens,
/// followed by unknown, start, end and finally the CTC blank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    pub language: String,
    pub vocab: Vec<String>,
    /// Subword merges in learning order: `(left, right)` forms
    /// `vocab[alphabet + i]`.
    pub merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut out = vec![WORD_MARK.to_string()];
    out.extend(word.chars().map(|c| c.to_string()));
    out
}

fn check_text(text: &str) -> Result<()> {
    if text.contains(['\t', '\n', '\r']) || text.contains(WORD_MARK) {
        return Err(Error::InvalidArgument(format!("transcript `{text}` contains a reserved character")));
    }
    Ok(())
}

impl Tokenizer {
    fn from_parts(kind: TokenizerKind, language: &str, vocab: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if [UNK, SOS, EOS, BLANK].contains(&t.as_str()) {
                return Err(Error::Config(format!("token `{t}` collides with a special token")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Tokenizer { kind, language: language.to_string(), vocab, merges, index })
    }

    pub fn unk(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn sos(&self) -> u32 {
        self.vocab.len() as u32 + 1
    }

    pub fn eos(&self) -> u32 {
        self.vocab.len() as u32 + 2
    }

    pub fn blank(&self) -> u32 {
        self.vocab.len() as u32 + 3
    }

    /// Decoder output classes: vocabulary plus unknown, start and end.
    pub fn decoder_vocab_size(&self) -> usize {
        self.vocab.len() + 3
    }

    /// Ids a decoder may emit before the end token.
    pub fn emittable(&self) -> Vec<u32> {
        (0..=self.unk()).collect()
    }

    pub fn token(&self, id: u32) -> &str {
        let n = self.vocab.len() as u32;
        match id {
            i if i < n => &self.vocab[i as usize],
            i if i == n => UNK,
            i if i == n + 1 => SOS,
            i if i == n + 2 => EOS,
            _ => BLANK,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.kind {
            TokenizerKind::Character => text
                .chars()
                .map(|c| self.index.get(c.to_string().as_str()).copied().unwrap_or(self.unk()))
                .collect(),
            TokenizerKind::Subword => {
                let ranks: HashMap<(&str, &str), usize> = self
                    .merges
                    .iter()
                    .enumerate()
                    .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
                    .collect();
                let mut ids = Vec::new();
                for w in words(text) {
                    let mut syms = word_symbols(w);
                    loop {
                        let best = syms
                            .windows(2)
                            .enumerate()
                            .filter_map(|(i, p)| ranks.get(&(p[0].as_str(), p[1].as_str())).map(|r| (*r, i)))
                            .min();
                        let Some((_, i)) = best else { break };
                        let merged = format!("{}{}", syms[i], syms[i + 1]);
                        syms.splice(i..i + 2, [merged]);
                    }
                    ids.extend(syms.iter().map(|s| self.index.get(s).copied().unwrap_or(self.unk())));
                }
                ids
            }
        }
    }

    /// Inverse of [`Tokenizer::encode`]. Special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let n = self.vocab.len() as u32;
        let pieces = ids.iter().filter(|&&i| i < n || i == n).map(|&i| self.token(i));
        match self.kind {
            TokenizerKind::Character => pieces.collect(),
            TokenizerKind::Subword => {
                let joined: String = pieces.collect();
                joined.replace(WORD_MARK, " ").trim_start().to_string()
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let kind = match self.kind {
            TokenizerKind::Character => "character",
            TokenizerKind::Subword => "subword",
        };
        let mut out = format!(
            "{HEADER}\tkind={kind}\tlanguage={}\tspecials={UNK},{SOS},{EOS},{BLANK}\n",
            self.language
        );
        let alphabet = self.vocab.len() - self.merges.len();
        for (i, t) in self.vocab.iter().enumerate() {
            if i < alphabet {
                out.push_str(t);
            } else {
                let (l, r) = &self.merges[i - alphabet];
                out.push_str(&format!("{t}\t{l}\t{r}"));
            }
            out.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.first() != Some(&HEADER) {
            return Err(Error::Config(format!("`{}` is not a tokenizer file", path.display())));
        }
        let get = |k: &str| {
            fields
                .iter()
                .find_map(|f| f.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Config(format!("tokenizer header lacks `{k}`")))
        };
        let kind = match get("kind")? {
            "character" => TokenizerKind::Character,
            "subword" => TokenizerKind::Subword,
            other => return Err(Error::Config(format!("unknown tokenizer kind `{other}`"))),
        };
        let language = get("language")?;
        let mut vocab = Vec::new();
        let mut merges = Vec::new();
        let body: Vec<&str> = lines.collect();
        // The file ends with a newline, which leaves one empty trailing entry.
        let body = match body.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &body[..],
        };
        for line in body {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                [t] => {
                    if !merges.is_empty() {
                        return Err(Error::Config("base token after merged tokens".into()));
                    }
                    vocab.push(t.to_string());
                }
                [t, l, r] => {
                    if format!("{l}{r}") != *t {
                        return Err(Error::Config(format!("merge `{l}` + `{r}` does not form `{t}`")));
                    }
                    vocab.push(t.to_string());
                    merges.push((l.to_string(), r.to_string()));
                }
                _ => return Err(Error::Config(format!("malformed tokenizer line `{line}`"))),
            }
        }
        Tokenizer::from_parts(kind, language, vocab, merges)
    }
}

/// Builds a tokenizer from training transcripts. Character inventories are
/// the sorted set of characters. Subword inventories start from the
/// characters plus the word marker and add byte-pair merges, most frequent
/// pair first, until `vocab_size` units exist or no pair is left.
pub fn build_tokenizer(
    transcripts: &[String],
    language: &str,
    kind: TokenizerKind,
    vocab_size: usize,
) -> Result<Tokenizer> {
    if transcripts.iter().all(|t| t.trim().is_empty()) {
        return Err(Error::InvalidArgument("cannot build a tokenizer from an empty corpus".into()));
    }
    for t in transcripts {
        check_text(t)?;
    }
    match kind {
        TokenizerKind::Character => {
            let chars: BTreeSet<char> = transcripts.iter().flat_map(|t| t.chars()).collect();
            Tokenizer::from_parts(kind, language, chars.into_iter().map(String::from).collect(), Vec::new())
        }
        TokenizerKind::Subword => {
            let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
            for t in transcripts {
                for w in words(t) {
                    *counts.entry(word_symbols(w)).or_default() += 1;
                }
            }
            let alphabet: BTreeSet<String> = counts.keys().flatten().cloned().collect();
            if vocab_size < alphabet.len() {
                return Err(Error::Config(format!(
                    "vocabulary of {vocab_size} cannot cover {} base symbols",
                    alphabet.len()
                )));
            }
            let mut vocab: Vec<String> = alphabet.into_iter().collect();
            let mut merges = Vec::new();
            let mut corpus: Vec<(Vec<String>, usize)> = counts.into_iter().collect();
            while vocab.len() < vocab_size {
                let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
                for (syms, n) in &corpus {
                    for p in syms.windows(2) {
                        *pairs.entry((p[0].clone(), p[1].clone())).or_default() += n;
                    }
                }
                // Highest count wins; the BTreeMap order breaks ties.
                let Some(((l, r), _)) = pairs.into_iter().fold(None, |best: Option<((String, String), usize)>, cur| {
                    match &best {
                        Some((_, n)) if *n >= cur.1 => best,
                        _ => Some(cur),
                    }
                }) else {
                    break;
                };
                let merged = format!("{l}{r}");
                for (syms, _) in corpus.iter_mut() {
                    let mut i = 0;
                    while i + 1 < syms.len() {
                        if syms[i] == l && syms[i + 1] == r {
                            syms.splice(i..i + 2, [merged.clone()]);
                        }
                        i += 1;
                    }
                }
                if !vocab.contains(&merged) {
                    vocab.push(merged);
                    merges.push((l, r));
                }
            }
            Tokenizer::from_parts(kind, language, vocab, merges)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        ["ka lo mi", "mi mi ka", "lo ka ka lo", "su ra"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn character_inventory_is_sorted_unique() {
        let t = build_tokenizer(&["ab".into(), "ba".into()], "xx", TokenizerKind::Character, 1000).unwrap();
        assert_eq!(t.vocab, vec!["a", "b"]);
        assert_eq!((t.unk(), t.sos(), t.eos(), t.blank()), (2, 3, 4, 5));
        assert_eq!(t.decode(&t.encode("abba")), "abba");
        assert_eq!(TokenizerKind::for_language("zh"), TokenizerKind::Character);
        assert_eq!(TokenizerKind::for_language("pt"), TokenizerKind::Subword);
    }

    #[test]
    fn subword_round_trip_and_size() {
        let c = corpus();
        let big = build_tokenizer(&c, "xx", TokenizerKind::Subword, 1000).unwrap();
        for t in &c {
            assert_eq!(&big.decode(&big.encode(t)), t);
        }
        // Every word became a single unit once merges ran out.
        assert_eq!(big.encode("ka lo").len(), 2);
        let small = build_tokenizer(&c, "xx", TokenizerKind::Subword, 12).unwrap();
        assert_eq!(small.vocab.len(), 12);
        for t in &c {
            assert_eq!(&small.decode(&small.encode(t)), t);
        }
        assert!(build_tokenizer(&c, "xx", TokenizerKind::Subword, 3).is_err());
    }

    #[test]
    fn unknown_symbols_map_to_unk() {
        let t = build_tokenizer(&corpus(), "xx", TokenizerKind::Subword, 1000).unwrap();
        assert!(t.encode("zz").contains(&t.unk()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_tokenizer(&[], "xx", TokenizerKind::Character, 10).is_err());
        assert!(build_tokenizer(&["  ".into()], "xx", TokenizerKind::Subword, 10).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [TokenizerKind::Character, TokenizerKind::Subword] {
            let t = build_tokenizer(&corpus(), "es", kind, 20).unwrap();
            let p = dir.path().join("tok.txt");
            t.save(&p).unwrap();
            assert_eq!(Tokenizer::load(&p).unwrap(), t);
        }
    }
}
