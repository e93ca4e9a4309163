//! Caption tokenization, word-embedding tables and fixed-length embedded
//! caption sequences.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

pub const DEFAULT_EMBED_DIM: usize = 300;
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("text configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Lowercases and splits on every non-alphanumeric character, so punctuation
/// never survives as a token.
pub fn tokenize_en(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Pluggable word segmenter: string in, token list out.
pub trait WordSegmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<String>;
}

/// Splits on whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceSegmenter;

impl WordSegmenter for WhitespaceSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// One token per character.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharSegmenter;

impl WordSegmenter for CharSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    }
}

/// Splits on a fixed delimiter character, e.g. pre-segmented `a/b/c` text.
#[derive(Debug, Clone, Copy)]
pub struct DelimiterSegmenter(pub char);

impl WordSegmenter for DelimiterSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        text.split(self.0).map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
    }
}

/// Dictionary-based Chinese segmentation.
#[cfg(feature = "jieba")]
pub struct JiebaSegmenter {
    jieba: jieba_rs::Jieba,
}

#[cfg(feature = "jieba")]
impl JiebaSegmenter {
    pub fn new() -> Self {
        Self { jieba: jieba_rs::Jieba::new() }
    }

    /// Adds domain words to the dictionary so they are kept whole.
    pub fn with_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut s = Self::new();
        for w in words {
            s.jieba.add_word(w, None, None);
        }
        s
    }
}

#[cfg(feature = "jieba")]
impl Default for JiebaSegmenter {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(feature = "jieba")]
impl WordSegmenter for JiebaSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        self.jieba.cut(text, true).into_iter().map(|t| t.word.to_string()).collect()
    }
}

/// Segments Chinese text and drops punctuation and whitespace tokens (any
/// token without a letter or digit).
pub fn segment_zh(text: &str, segmenter: Option<&dyn WordSegmenter>) -> Result<Vec<String>, TextError> {
    let seg = segmenter.ok_or_else(|| TextError::Config("no word segmenter registered for Chinese text".into()))?;
    Ok(seg
        .segment(text)
        .into_iter()
        .map(|t| t.trim().to_string())
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect())
}

/// Read-only token → vector map. Vectors are stored contiguously as `f32`
/// in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    language: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` entries; later duplicates are
    /// ignored.
    pub fn from_entries<I, S>(dim: usize, language: &str, entries: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut t = Self::empty(dim, language);
        for (tok, v) in entries {
            let tok = tok.into();
            if v.len() != dim {
                return Err(TextError::Config(format!("vector for {tok:?} has {} values, expected {dim}", v.len())));
            }
            t.insert(tok, &v);
        }
        Ok(t)
    }

    fn empty(dim: usize, language: &str) -> Self {
        Self { dim, language: language.to_string(), tokens: Vec::new(), index: HashMap::new(), vectors: Vec::new() }
    }

    fn insert(&mut self, token: String, v: &[f32]) {
        if self.index.contains_key(&token) {
            return;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.vectors.extend_from_slice(v);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vector(i))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Token at insertion position `i`.
    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// All vectors, row-major in insertion order.
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Parses the whitespace-delimited text format: one token followed by
    /// `dim` floats per line. A leading `count dim` header line is skipped;
    /// blank lines are ignored.
    pub fn parse(text: &str, dim: usize, language: &str, source: &str) -> Result<Self, TextError> {
        if dim == 0 {
            return Err(TextError::Config("embedding dim must be positive".into()));
        }
        let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
        let skip_header = lines.first().is_some_and(|(_, l)| is_header(l, dim));
        let body = if skip_header { &lines[1..] } else { &lines[..] };
        let parsed = exec::map_slice(body, |&(no, line)| parse_line(line, dim).map_err(|m| (no, m)));
        let mut t = Self::empty(dim, language);
        for p in parsed {
            match p {
                Ok(Some((tok, v))) => t.insert(tok.to_string(), &v),
                Ok(None) => {}
                Err((line, message)) => return Err(TextError::Parse { path: source.to_string(), line, message }),
            }
        }
        Ok(t)
    }
}

fn is_header(line: &str, dim: usize) -> bool {
    let f: Vec<&str> = line.split_whitespace().collect();
    f.len() == 2 && f[0].parse::<usize>().is_ok() && f[1].parse::<usize>() == Ok(dim)
}

fn parse_line(line: &str, dim: usize) -> Result<Option<(&str, Vec<f32>)>, String> {
    let mut fields = line.split_whitespace();
    let Some(tok) = fields.next() else { return Ok(None) };
    let v = fields
        .map(|f| f.parse::<f32>().map_err(|_| format!("cannot parse {f:?} as a number")))
        .collect::<Result<Vec<f32>, String>>()?;
    if v.len() != dim {
        return Err(format!("token {tok:?} has {} values, expected {dim}", v.len()));
    }
    Ok(Some((tok, v)))
}

/// Loads an embedding table file.
pub fn load_embedding_table(path: &Path, dim: usize, language: &str) -> Result<EmbeddingTable, TextError> {
    let io = |source| TextError::Io { path: path.display().to_string(), source };
    let mut text = String::new();
    std::fs::File::open(path).map_err(io)?.read_to_string(&mut text).map_err(io)?;
    EmbeddingTable::parse(&text, dim, language, &path.display().to_string())
}

/// A caption as a fixed-length sequence of embedding rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedCaption {
    /// Surface units behind the real rows (after any character split).
    pub tokens: Vec<String>,
    pub dim: usize,
    /// `max_len × dim`, zero beyond the last real row.
    pub vectors: Vec<f32>,
    /// `max_len` entries, true for real rows.
    pub mask: Vec<bool>,
}

impl EmbeddedCaption {
    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

fn lookup<'a>(tables: &[&'a EmbeddingTable], token: &str) -> Option<&'a [f32]> {
    tables.iter().find_map(|t| t.get(token))
}

/// Embeds `tokens` using the first table in `tables` that knows each token.
/// Unknown tokens are split into characters when at least one character is
/// known (unknown characters become zero rows); otherwise they become one
/// zero row. The result is truncated to the head or zero-padded to `max_len`.
pub fn embed_tokens_chain(tokens: &[String], tables: &[&EmbeddingTable], max_len: usize) -> Result<EmbeddedCaption, TextError> {
    if max_len == 0 {
        return Err(TextError::Config("max_len must be positive".into()));
    }
    let dim = tables.first().map(|t| t.dim()).ok_or_else(|| TextError::Config("no embedding table".into()))?;
    if tables.iter().any(|t| t.dim() != dim) {
        return Err(TextError::Config("embedding tables disagree on dim".into()));
    }
    let zero = vec![0.0f32; dim];
    let mut units: Vec<(String, Vec<f32>)> = Vec::new();
    for tok in tokens {
        if units.len() >= max_len {
            break;
        }
        if let Some(v) = lookup(tables, tok) {
            units.push((tok.clone(), v.to_vec()));
            continue;
        }
        let chars: Vec<String> = tok.chars().map(String::from).collect();
        if chars.len() > 1 && chars.iter().any(|c| lookup(tables, c).is_some()) {
            for c in chars {
                let v = lookup(tables, &c).map_or_else(|| zero.clone(), <[f32]>::to_vec);
                units.push((c, v));
            }
        } else {
            units.push((tok.clone(), zero.clone()));
        }
    }
    units.truncate(max_len);
    let mut vectors = vec![0.0f32; max_len * dim];
    let mut mask = vec![false; max_len];
    for (i, (_, v)) in units.iter().enumerate() {
        vectors[i * dim..(i + 1) * dim].copy_from_slice(v);
        mask[i] = true;
    }
    Ok(EmbeddedCaption { tokens: units.into_iter().map(|(t, _)| t).collect(), dim, vectors, mask })
}

pub fn embed_tokens(tokens: &[String], table: &EmbeddingTable, max_len: usize) -> Result<EmbeddedCaption, TextError> {
    embed_tokens_chain(tokens, &[table], max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            "zh",
            [("城市", vec![1.0, 2.0]), ("新", vec![3.0, 4.0]), ("冠", vec![5.0, 6.0]), ("city", vec![0.5, -0.5])],
        )
        .unwrap()
    }

    #[test]
    fn english_tokenization() {
        assert_eq!(
            tokenize_en("health officials here in new york city"),
            s(&["health", "officials", "here", "in", "new", "york", "city"])
        );
        assert!(tokenize_en("").is_empty());
        assert_eq!(tokenize_en("COVID-19, rising!"), s(&["covid", "19", "rising"]));
    }

    #[test]
    fn chinese_punctuation_is_dropped() {
        let out = segment_zh("城市，新冠。好！", Some(&CharSegmenter)).unwrap();
        assert!(!out.iter().any(|t| t == "，" || t == "。" || t == "！"));
        assert_eq!(out.len(), 5);
        assert!(segment_zh("", Some(&CharSegmenter)).unwrap().is_empty());
    }

    #[test]
    fn stub_segmenter_oracle() {
        assert_eq!(segment_zh("城市/新冠", Some(&DelimiterSegmenter('/'))).unwrap(), s(&["城市", "新冠"]));
    }

    #[test]
    fn missing_segmenter_is_config_error() {
        assert!(matches!(segment_zh("城市", None), Err(TextError::Config(_))));
    }

    #[cfg(feature = "jieba")]
    #[test]
    fn jieba_keeps_added_words() {
        let seg = JiebaSegmenter::with_words(["奥运火炬"]);
        let out = segment_zh("奥运火炬，传递", Some(&seg)).unwrap();
        assert!(out.contains(&"奥运火炬".to_string()));
        assert!(!out.iter().any(|t| t == "，"));
    }

    #[test]
    fn fallback_chain() {
        let t = table();
        let e = embed_tokens(&s(&["城市", "新冠", "火箭", "city"]), &t, 6).unwrap();
        assert_eq!(e.tokens, s(&["城市", "新", "冠", "火箭", "city"]));
        assert_eq!(e.row(0), &[1.0, 2.0]);
        assert_eq!(e.row(1), &[3.0, 4.0]);
        assert_eq!(e.row(2), &[5.0, 6.0]);
        assert_eq!(e.row(3), &[0.0, 0.0]);
        assert_eq!(e.row(4), &[0.5, -0.5]);
        assert_eq!(e.mask, vec![true, true, true, true, true, false]);
        assert_eq!(e.row(5), &[0.0, 0.0]);
    }

    #[test]
    fn partially_known_characters_split_with_zero_rows() {
        let e = embed_tokens(&s(&["新药"]), &table(), 4).unwrap();
        assert_eq!(e.tokens, s(&["新", "药"]));
        assert_eq!(e.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn chain_prefers_first_table() {
        let zh = EmbeddingTable::from_entries(2, "zh", [("a", vec![1.0, 1.0])]).unwrap();
        let en = EmbeddingTable::from_entries(2, "en", [("a", vec![9.0, 9.0]), ("b", vec![2.0, 2.0])]).unwrap();
        let e = embed_tokens_chain(&s(&["a", "b"]), &[&zh, &en], 2).unwrap();
        assert_eq!(e.row(0), &[1.0, 1.0]);
        assert_eq!(e.row(1), &[2.0, 2.0]);
    }

    #[test]
    fn truncation_keeps_head() {
        let e = embed_tokens(&s(&["city", "城市", "city"]), &table(), 2).unwrap();
        assert_eq!(e.tokens, s(&["city", "城市"]));
        assert!(e.mask.iter().all(|&m| m));
    }

    #[test]
    fn parse_table_file_format() {
        let t = EmbeddingTable::parse("the 0.1 0.2 0.3\ncat 1 2 3\n", 3, "en", "mem").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("cat").unwrap(), &[1.0, 2.0, 3.0]);
        let header = EmbeddingTable::parse("2 3\nthe 0.1 0.2 0.3\nthe 9 9 9\n", 3, "en", "mem").unwrap();
        assert_eq!(header.len(), 1);
        assert_eq!(header.get("the").unwrap(), &[0.1, 0.2, 0.3]);
        match EmbeddingTable::parse("ok 1 2 3\na 1 2\n", 3, "en", "mem") {
            Err(TextError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stored_vector_is_bit_identical() {
        let t = EmbeddingTable::parse("x 0.1 -3.3e-7\n", 2, "en", "mem").unwrap();
        let e = embed_tokens(&s(&["x"]), &t, 1).unwrap();
        assert_eq!(e.row(0), t.get("x").unwrap());
    }

    proptest! {
        #[test]
        fn shape_and_padding_invariants(
            toks in proptest::collection::vec("[a-z新冠城市]{1,3}", 0..30),
            max_len in 1usize..25,
        ) {
            let e = embed_tokens(&toks, &table(), max_len).unwrap();
            prop_assert_eq!(e.vectors.len(), max_len * 2);
            prop_assert_eq!(e.mask.len(), max_len);
            let real = e.real_len();
            prop_assert!(e.mask[..real].iter().all(|&m| m));
            prop_assert!(e.vectors[real * 2..].iter().all(|&v| v == 0.0));
            prop_assert_eq!(e.tokens.len(), real);
        }
    }
}
