//! Minimal LaTeX structural parsing.
//!
//! The tokenizer is lossless: concatenating every token's lexeme gives back
//! the input exactly. On top of it sit macro-definition extraction, document
//! body extraction and the sanitizer that prepares student text for the
//! grader.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    ControlSequence,
    GroupOpen,
    GroupClose,
    Comment,
    Text,
    MathShift,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct TokenStream<'a> {
    source: &'a str,
    tokens: Vec<Token>,
}

impl<'a> TokenStream<'a> {
    pub fn source(&self) -> &'a str {
        self.source
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn lexeme(&self, index: usize) -> &'a str {
        &self.source[self.tokens[index].span.clone()]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(kind, lexeme)` pairs in source order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenKind, &'a str)> + '_ {
        self.tokens
            .iter()
            .map(move |t| (t.kind, &self.source[t.span.clone()]))
    }
}

/// Decodes raw file bytes, replacing invalid UTF-8. The flag is true when a
/// replacement happened.
pub fn decode_source(bytes: &[u8]) -> (String, bool) {
    match String::from_utf8_lossy(bytes) {
        std::borrow::Cow::Borrowed(s) => (s.to_string(), false),
        std::borrow::Cow::Owned(s) => (s, true),
    }
}

fn is_special(b: u8) -> bool {
    matches!(b, b'\\' | b'{' | b'}' | b'$' | b'%')
}

/// Splits `source` into tokens. Total: malformed input degrades to text.
pub fn tokenize(source: &str) -> TokenStream<'_> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let kind = match bytes[i] {
            b'\\' => {
                i += 1;
                if i >= bytes.len() {
                    TokenKind::Text
                } else if bytes[i].is_ascii_alphabetic() {
                    while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                        i += 1;
                    }
                    TokenKind::ControlSequence
                } else {
                    let ch = source[i..].chars().next().expect("in bounds");
                    i += ch.len_utf8();
                    TokenKind::ControlSequence
                }
            }
            b'{' => {
                i += 1;
                TokenKind::GroupOpen
            }
            b'}' => {
                i += 1;
                TokenKind::GroupClose
            }
            b'$' => {
                i += 1;
                TokenKind::MathShift
            }
            b'%' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                TokenKind::Comment
            }
            _ => {
                while i < bytes.len() && !is_special(bytes[i]) {
                    i += 1;
                }
                TokenKind::Text
            }
        };
        tokens.push(Token { kind, span: start..i });
    }
    TokenStream { source, tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroKind {
    Newcommand,
    Renewcommand,
    Def,
    DeclareMathOperator,
    Providecommand,
}

impl MacroKind {
    fn from_control(name: &str) -> Option<Self> {
        Some(match name {
            "newcommand" => MacroKind::Newcommand,
            "renewcommand" => MacroKind::Renewcommand,
            "def" => MacroKind::Def,
            "DeclareMathOperator" => MacroKind::DeclareMathOperator,
            "providecommand" => MacroKind::Providecommand,
            _ => return None,
        })
    }

    pub fn control_name(self) -> &'static str {
        match self {
            MacroKind::Newcommand => "newcommand",
            MacroKind::Renewcommand => "renewcommand",
            MacroKind::Def => "def",
            MacroKind::DeclareMathOperator => "DeclareMathOperator",
            MacroKind::Providecommand => "providecommand",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroDef {
    pub kind: MacroKind,
    /// Control-sequence name without the backslash.
    pub name: String,
    pub arity: u8,
    pub has_default: bool,
    pub raw_text: String,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TexParseError {
    #[error("unterminated group starting at byte {offset}")]
    UnterminatedGroup { offset: usize },
    #[error("malformed \\{control} definition at byte {offset}")]
    MalformedDefinition { control: String, offset: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroExtraction {
    pub macros: Vec<MacroDef>,
    pub errors: Vec<TexParseError>,
}

impl MacroExtraction {
    /// The definitions joined one per line, as handed to the grader.
    pub fn macro_block(&self) -> String {
        self.macros
            .iter()
            .map(|m| m.raw_text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Finds every definition made at brace depth 0, in source order.
pub fn extract_macros(stream: &TokenStream<'_>) -> MacroExtraction {
    let src = stream.source();
    let mut out = MacroExtraction::default();
    let mut depth = 0usize;
    let mut resume_at = 0usize;
    for (idx, tok) in stream.tokens().iter().enumerate() {
        if tok.span.start < resume_at {
            continue;
        }
        match tok.kind {
            TokenKind::GroupOpen => depth += 1,
            TokenKind::GroupClose => depth = depth.saturating_sub(1),
            TokenKind::ControlSequence if depth == 0 => {
                let Some(kind) = MacroKind::from_control(&stream.lexeme(idx)[1..]) else {
                    continue;
                };
                match parse_definition(src, kind, tok.span.start, tok.span.end) {
                    Ok(def) => {
                        resume_at = def.span.1;
                        out.macros.push(def);
                    }
                    Err(e) => out.errors.push(e),
                }
            }
            _ => {}
        }
    }
    out
}

fn parse_definition(
    src: &str,
    kind: MacroKind,
    start: usize,
    after_cs: usize,
) -> Result<MacroDef, TexParseError> {
    let malformed = || TexParseError::MalformedDefinition {
        control: kind.control_name().to_string(),
        offset: start,
    };
    let b = src.as_bytes();
    let mut p = skip_blank(src, after_cs);

    if kind != MacroKind::Def && b.get(p) == Some(&b'*') {
        p = skip_blank(src, p + 1);
    }

    // name: `{\name}` or `\name`
    let name;
    if b.get(p) == Some(&b'{') {
        let inner = skip_blank(src, p + 1);
        let (n, after) = read_control_name(src, inner).ok_or_else(malformed)?;
        let close = skip_blank(src, after);
        if b.get(close) != Some(&b'}') {
            return Err(malformed());
        }
        name = n;
        p = close + 1;
    } else {
        let (n, after) = read_control_name(src, p).ok_or_else(malformed)?;
        name = n;
        p = after;
    }

    let mut arity = 0u8;
    let mut has_default = false;
    match kind {
        MacroKind::Def => {
            // parameter text runs up to the body's opening brace
            let mut q = p;
            while q < b.len() && b[q] != b'{' {
                if b[q] == b'#' {
                    if let Some(d) = b.get(q + 1).filter(|c| c.is_ascii_digit()) {
                        arity = arity.max(d - b'0');
                    }
                }
                if b[q] == b'\\' {
                    q += 1;
                }
                q += 1;
            }
            p = q;
        }
        MacroKind::DeclareMathOperator => {
            p = skip_blank(src, p);
        }
        _ => {
            p = skip_blank(src, p);
            if b.get(p) == Some(&b'[') {
                let end = read_bracket(src, p).ok_or(TexParseError::UnterminatedGroup { offset: p })?;
                arity = src[p + 1..end - 1].trim().parse().map_err(|_| malformed())?;
                p = skip_blank(src, end);
                if b.get(p) == Some(&b'[') {
                    let end =
                        read_bracket(src, p).ok_or(TexParseError::UnterminatedGroup { offset: p })?;
                    has_default = true;
                    p = skip_blank(src, end);
                }
            }
        }
    }

    if b.get(p) != Some(&b'{') {
        return Err(malformed());
    }
    let end = read_group(src, p).ok_or(TexParseError::UnterminatedGroup { offset: p })?;
    Ok(MacroDef {
        kind,
        name,
        arity,
        has_default,
        raw_text: src[start..end].to_string(),
        span: (start, end),
    })
}

/// Skips whitespace and comments.
fn skip_blank(src: &str, mut p: usize) -> usize {
    let b = src.as_bytes();
    while p < b.len() {
        match b[p] {
            b' ' | b'\t' | b'\r' | b'\n' => p += 1,
            b'%' => {
                while p < b.len() && b[p] != b'\n' {
                    p += 1;
                }
            }
            _ => break,
        }
    }
    p
}

fn read_control_name(src: &str, p: usize) -> Option<(String, usize)> {
    let b = src.as_bytes();
    if b.get(p) != Some(&b'\\') {
        return None;
    }
    let mut q = p + 1;
    while q < b.len() && b[q].is_ascii_alphabetic() {
        q += 1;
    }
    if q == p + 1 {
        let ch = src.get(q..)?.chars().next()?;
        q += ch.len_utf8();
    }
    Some((src[p + 1..q].to_string(), q))
}

/// Returns the byte just past the brace matching the `{` at `p`.
fn read_group(src: &str, p: usize) -> Option<usize> {
    let b = src.as_bytes();
    let mut depth = 0usize;
    let mut q = p;
    while q < b.len() {
        match b[q] {
            b'\\' => q += 1,
            b'%' => {
                while q < b.len() && b[q] != b'\n' {
                    q += 1;
                }
                continue;
            }
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(q + 1);
                }
            }
            _ => {}
        }
        q += 1;
    }
    None
}

/// Returns the byte just past the `]` closing the `[` at `p`.
fn read_bracket(src: &str, p: usize) -> Option<usize> {
    let b = src.as_bytes();
    let mut depth = 0usize;
    let mut q = p + 1;
    while q < b.len() {
        match b[q] {
            b'\\' => q += 1,
            b'{' => depth += 1,
            b'}' => depth = depth.saturating_sub(1),
            b']' if depth == 0 => return Some(q + 1),
            _ => {}
        }
        q += 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentBody {
    pub text: String,
    pub span: (usize, usize),
    /// Set when either document marker was missing and the whole source was
    /// used instead.
    pub missing_document_env: bool,
}

/// Slices the source between the first `\begin{document}` and the last
/// `\end{document}`.
pub fn extract_body(stream: &TokenStream<'_>) -> DocumentBody {
    let src = stream.source();
    let markers = environment_markers(stream, "document");
    let begin = markers
        .iter()
        .find(|m| m.is_begin)
        .map(|m| m.span.end);
    let end = markers
        .iter()
        .rev()
        .find(|m| !m.is_begin)
        .map(|m| m.span.start);
    match (begin, end) {
        (Some(b), Some(e)) if b <= e => DocumentBody {
            text: src[b..e].to_string(),
            span: (b, e),
            missing_document_env: false,
        },
        _ => DocumentBody {
            text: src.to_string(),
            span: (0, src.len()),
            missing_document_env: true,
        },
    }
}

struct EnvMarker {
    is_begin: bool,
    span: Range<usize>,
}

fn environment_markers(stream: &TokenStream<'_>, env: &str) -> Vec<EnvMarker> {
    let toks = stream.tokens();
    let mut out = Vec::new();
    for i in 0..toks.len() {
        if toks[i].kind != TokenKind::ControlSequence {
            continue;
        }
        let is_begin = match stream.lexeme(i) {
            "\\begin" => true,
            "\\end" => false,
            _ => continue,
        };
        let mut j = i + 1;
        while j < toks.len() && toks[j].kind == TokenKind::Text && stream.lexeme(j).trim().is_empty()
        {
            j += 1;
        }
        if j + 2 < toks.len()
            && toks[j].kind == TokenKind::GroupOpen
            && toks[j + 1].kind == TokenKind::Text
            && stream.lexeme(j + 1).trim() == env
            && toks[j + 2].kind == TokenKind::GroupClose
        {
            out.push(EnvMarker {
                is_begin,
                span: toks[i].span.start..toks[j + 2].span.end,
            });
        }
    }
    out
}

/// Phrases that look like attempts to steer the grader. Matched
/// case-insensitively with whitespace runs collapsed.
pub const INJECTION_BLOCKLIST: &[&str] = &[
    "ignore previous",
    "ignore all prior",
    "system prompt",
    "you are the grader",
    "award full credit",
    "give full marks",
];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeReport {
    pub suspicious: bool,
    pub blocklist_hits: Vec<String>,
    pub comments_removed: usize,
    pub control_chars_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sanitized {
    pub macro_block: String,
    pub body: String,
    pub report: SanitizeReport,
}

/// Prepares macro block and body for the grader.
///
/// Comments and C0 control characters (other than newline and tab) are
/// removed. Injection-shaped phrases are reported, never deleted.
pub fn sanitize_for_llm(macro_block: &str, body: &str) -> Sanitized {
    let mut report = SanitizeReport::default();
    let macro_block = sanitize_text(macro_block, &mut report);
    let body = sanitize_text(body, &mut report);
    report.suspicious = !report.blocklist_hits.is_empty();
    Sanitized {
        macro_block,
        body,
        report,
    }
}

/// Sanitizes one piece of text, accumulating findings into `report`.
pub fn sanitize_text(text: &str, report: &mut SanitizeReport) -> String {
    for hit in blocklist_hits(text) {
        if !report.blocklist_hits.contains(&hit) {
            report.blocklist_hits.push(hit);
        }
    }
    report.suspicious = !report.blocklist_hits.is_empty();

    let mut stripped = String::with_capacity(text.len());
    for ch in text.chars() {
        if (ch as u32) < 0x20 && ch != '\n' && ch != '\t' {
            report.control_chars_removed += 1;
        } else {
            stripped.push(ch);
        }
    }

    let stream = tokenize(&stripped);
    let mut out = String::with_capacity(stripped.len());
    for (kind, lexeme) in stream.iter() {
        if kind == TokenKind::Comment {
            report.comments_removed += 1;
        } else {
            out.push_str(lexeme);
        }
    }
    // Removing a comment can join a phrase that was split across it.
    for hit in blocklist_hits(&out) {
        if !report.blocklist_hits.contains(&hit) {
            report.blocklist_hits.push(hit);
            report.suspicious = true;
        }
    }
    out
}

fn blocklist_hits(text: &str) -> Vec<String> {
    let normalized = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    INJECTION_BLOCKLIST
        .iter()
        .filter(|p| normalized.contains(*p))
        .map(|p| p.to_string())
        .collect()
}

/// A delimiter derived from the content it fences, so student text cannot
/// predict or forge it, while reruns stay byte-identical.
pub fn untrusted_fence(salt: &str, text: &str) -> String {
    let mut counter = 0u32;
    loop {
        let mut h = Sha256::new();
        h.update(salt.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.update(counter.to_le_bytes());
        let fence = format!("UNTRUSTED-{}", &hex::encode(h.finalize())[..16]);
        if !text.contains(&fence) {
            return fence;
        }
        counter += 1;
    }
}

/// Wraps student text between matching fence lines.
pub fn fence_untrusted(salt: &str, text: &str) -> String {
    let fence = untrusted_fence(salt, text);
    format!("<<<{fence}\n{text}\n{fence}>>>")
}
