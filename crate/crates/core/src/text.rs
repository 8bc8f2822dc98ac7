//! Global-local textual features.
//!
//! The target noun phrase is read off a dependency parse supplied by an
//! external parser: take the root word (or, when the root is a verb, its
//! first noun child), then the noun chunk that contains it. Expressions with
//! no such chunk fall back to the whole sentence.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::model::{check_unit_weight, fuse, EmbeddingVector, Expression};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseToken {
    pub i: usize,
    pub text: String,
    pub pos: String,
    pub head: usize,
    pub dep: String,
}

impl ParseToken {
    pub fn is_noun(&self) -> bool {
        matches!(self.pos.as_str(), "NOUN" | "PROPN")
    }

    pub fn is_verb(&self) -> bool {
        matches!(self.pos.as_str(), "VERB" | "AUX")
    }
}

/// Tokenized expression with dependency heads and noun-chunk spans.
///
/// Chunk spans are `[start, end)` token ranges. The JSON layout is
/// `{"tokens":[{"i","text","pos","head","dep"}],"chunks":[[start,end]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    pub tokens: Vec<ParseToken>,
    pub chunks: Vec<[usize; 2]>,
}

impl ParseTree {
    /// Checks indices, the single root, acyclic heads, and chunk bounds.
    /// Returns the root index.
    pub fn validate(&self) -> Result<usize> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::MalformedParse("no tokens".into()));
        }
        for (pos, tok) in self.tokens.iter().enumerate() {
            if tok.i != pos {
                return Err(Error::MalformedParse(format!(
                    "token at position {pos} has index {}",
                    tok.i
                )));
            }
            if tok.head >= n {
                return Err(Error::MalformedParse(format!(
                    "token {pos} has head {} out of range",
                    tok.head
                )));
            }
        }
        let roots: Vec<usize> = self
            .tokens
            .iter()
            .filter(|t| t.head == t.i)
            .map(|t| t.i)
            .collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::MalformedParse("no root token".into())),
            _ => return Err(Error::MalformedParse(format!("multiple roots {roots:?}"))),
        };
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while cur != root {
                cur = self.tokens[cur].head;
                steps += 1;
                if steps > n {
                    return Err(Error::MalformedParse(format!("cycle through token {start}")));
                }
            }
        }
        let mut spans: Vec<[usize; 2]> = self.chunks.clone();
        spans.sort_unstable();
        for [s, e] in &spans {
            if s >= e || *e > n {
                return Err(Error::MalformedParse(format!("chunk [{s}, {e}) out of bounds")));
            }
        }
        for pair in spans.windows(2) {
            if pair[1][0] < pair[0][1] {
                return Err(Error::MalformedParse(format!(
                    "chunks {:?} and {:?} overlap",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(root)
    }

    pub fn children(&self, head: usize) -> impl Iterator<Item = &ParseToken> {
        self.tokens.iter().filter(move |t| t.head == head && t.i != head)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedParse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhrase {
    pub text: String,
    /// Token range `[start, end)`; the whole token range for sentence fallback.
    pub span: (usize, usize),
    pub is_whole_sentence: bool,
}

/// Byte ranges of each token in `text`, found by scanning left to right.
fn align_tokens(tokens: &[ParseToken], text: &str) -> Option<Vec<(usize, usize)>> {
    let mut cursor = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let at = cursor + text[cursor..].find(tok.text.as_str())?;
        out.push((at, at + tok.text.len()));
        cursor = at + tok.text.len();
    }
    Some(out)
}

fn span_text(p: &ParseTree, original: &str, start: usize, end: usize) -> String {
    match align_tokens(&p.tokens, original) {
        Some(offsets) => original[offsets[start].0..offsets[end - 1].1].to_string(),
        None => p.tokens[start..end]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Selects the target noun phrase of `original` from its parse.
pub fn extract_target_np(p: &ParseTree, original: &Expression) -> Result<NounPhrase> {
    let root = p.validate()?;
    let mut anchor = root;
    if p.tokens[root].is_verb() {
        if let Some(noun) = p.children(root).filter(|t| t.is_noun()).map(|t| t.i).min() {
            anchor = noun;
        }
    }
    let chunk = p.chunks.iter().find(|[s, e]| (*s..*e).contains(&anchor));
    let whole = |p: &ParseTree| NounPhrase {
        text: original.text().to_string(),
        span: (0, p.tokens.len()),
        is_whole_sentence: true,
    };
    Ok(match chunk {
        None => whole(p),
        Some(&[s, e]) => {
            let text = span_text(p, original.text(), s, e);
            if text == original.text() {
                whole(p)
            } else {
                NounPhrase {
                    text,
                    span: (s, e),
                    is_whole_sentence: false,
                }
            }
        }
    })
}

pub fn global_text_feature(enc: &dyn TextEncoder, expr: &Expression) -> Result<EmbeddingVector> {
    enc.encode_text(expr.text())
}

pub fn local_text_feature(enc: &dyn TextEncoder, np: &NounPhrase) -> Result<EmbeddingVector> {
    enc.encode_text(&np.text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub fused: EmbeddingVector,
    pub global: EmbeddingVector,
    pub local: EmbeddingVector,
    pub noun_phrase: NounPhrase,
}

/// Blends sentence and noun-phrase features with weight `beta`. When the noun
/// phrase is the whole sentence the result is the sentence feature itself.
pub fn global_local_text_feature(
    enc: &dyn TextEncoder,
    expr: &Expression,
    parse: &ParseTree,
    beta: f64,
) -> Result<TextFeatures> {
    let np = extract_target_np(parse, expr)?;
    text_features_for(enc, expr, np, beta)
}

/// Same as [`global_local_text_feature`] with the noun phrase already chosen.
pub fn text_features_for(
    enc: &dyn TextEncoder,
    expr: &Expression,
    np: NounPhrase,
    beta: f64,
) -> Result<TextFeatures> {
    check_unit_weight(beta)?;
    let global = global_text_feature(enc, expr)?;
    if np.is_whole_sentence {
        return Ok(TextFeatures {
            fused: global.clone(),
            local: global.clone(),
            global,
            noun_phrase: np,
        });
    }
    let local = local_text_feature(enc, &np)?;
    let fused = fuse(&global, &local, beta)?;
    Ok(TextFeatures {
        fused,
        global,
        local,
        noun_phrase: np,
    })
}

/// The whole-sentence noun phrase, used when no parse is available.
pub fn whole_sentence(expr: &Expression) -> NounPhrase {
    NounPhrase {
        text: expr.text().to_string(),
        span: (0, 0),
        is_whole_sentence: true,
    }
}

/// Parses keyed by expression text: `{"parses": {"<expression>": ParseTree}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseFile {
    pub parses: IndexMap<String, ParseTree>,
}

impl ParseFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ParseFile = serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        for (expr, tree) in &file.parses {
            tree.validate()
                .map_err(|e| Error::schema(path, format!("parse for {expr:?}: {e}")))?;
        }
        Ok(file)
    }
}
