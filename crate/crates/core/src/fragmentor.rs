//! Loop discovery, timing instrumentation and its exact reversal.
//!
//! Instrumentation layout for a loop with id N (every inserted fragment is a
//! unique exact substring, so `strip` is pure textual removal):
//!
//! ```c
//! {__parsweep_loop_start(N);
//! /*PARSWEEP_LOOP N*/
//! for (i = 0; i < n; i++) {/*PARSWEEP_BODY_BEGIN N*/ a[i] = 0; /*PARSWEEP_BODY_END N*/}
//! __parsweep_loop_stop(N);}
//! ```
//!
//! The outer braces make the instrumented loop a single compound statement, so
//! it stays legal wherever the original loop was legal. Backends place their
//! `#pragma` on the line between the marker comment and the loop header. A
//! timing runtime preamble is inserted at the top of the first unit (and an
//! extern declaration block into every other unit that contains loops), both
//! delimited by sentinel comments.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::{self, Tok, Token};
use crate::source::{line_of, LoopId, SourceUnit, Span};

pub const MARKER_SCHEME: &str = "parsweep-marker-v1";

const RT_BEGIN_DEFINE: &str = "/*PARSWEEP_RT_BEGIN parsweep-marker-v1 define*/";
const RT_BEGIN_EXTERN: &str = "/*PARSWEEP_RT_BEGIN parsweep-marker-v1 extern*/";
const RT_BEGIN_ANY: &str = "/*PARSWEEP_RT_BEGIN ";
const RT_END: &str = "/*PARSWEEP_RT_END*/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    For,
    While,
    DoWhile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopShape {
    Canonical,
    NonCanonical,
}

/// Parsed pieces of a canonical `for` header:
/// `for (var = init; var cmp bound; var += stride)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalHeader {
    pub var: String,
    pub init_expr: String,
    pub init_const: Option<i64>,
    pub cmp: String,
    pub bound_expr: String,
    pub bound_const: Option<i64>,
    pub stride: i64,
    pub decl_in_init: bool,
    /// Iteration count when init and bound are integer literals.
    pub trip_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub id: LoopId,
    pub unit: String,
    pub kind: LoopKind,
    pub shape: LoopShape,
    pub depth: u32,
    pub parent_id: Option<LoopId>,
    /// 1-based line of the loop header in the scanned text.
    pub line: u32,
    /// `for (...)` header (or the `do` keyword for do-while loops).
    pub header_span: Span,
    /// Brace interior for braced bodies, the single statement otherwise.
    pub body_span: Span,
    /// Full statement extent, including a do-while's trailing `;`.
    pub span: Span,
    pub body_braced: bool,
    pub canonical: Option<CanonicalHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentedSource {
    pub units: Vec<SourceUnit>,
    /// Loop records with spans into the ORIGINAL (pre-instrumentation) units.
    pub loops: Vec<LoopRecord>,
    pub marker_scheme: String,
    pub max_id: u32,
}

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error("{unit}:{line}: unbalanced delimiter `{delim}` at byte {offset}")]
    UnbalancedDelimiters {
        unit: String,
        offset: usize,
        line: u32,
        delim: char,
    },
    #[error("{unit}:{line}: cannot parse loop construct at byte {offset}: {detail}")]
    MalformedLoop {
        unit: String,
        offset: usize,
        line: u32,
        detail: String,
    },
    #[error(
        "{unit}: source already contains the reserved marker token at byte {offset}; \
         rename the conflicting identifier or comment"
    )]
    MarkerCollision { unit: String, offset: usize },
    #[error("{unit}: instrumentation not recognized: {detail}")]
    UnknownMarkerScheme { unit: String, detail: String },
    #[error("{unit}: marker for loop {id} is missing or was edited")]
    MissingMarker { unit: String, id: LoopId },
}

pub fn marker_comment(id: LoopId) -> String {
    format!("/*PARSWEEP_LOOP {id}*/")
}

pub(crate) fn wrap_open_str(id: LoopId) -> String {
    format!("{{__parsweep_loop_start({id});\n/*PARSWEEP_LOOP {id}*/\n")
}

pub(crate) fn wrap_close_str(id: LoopId) -> String {
    format!("\n__parsweep_loop_stop({id});}}")
}

fn body_open_str(id: LoopId) -> String {
    format!("{{/*PARSWEEP_BODY_BEGIN {id}*/")
}

fn body_close_str(id: LoopId) -> String {
    format!("/*PARSWEEP_BODY_END {id}*/}}")
}

/// Byte ranges of runtime preamble blocks (sentinel comment through the
/// newline after the end sentinel).
pub(crate) fn rt_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(RT_BEGIN_ANY) {
        let start = from + rel;
        let Some(end_rel) = text[start..].find(RT_END) else {
            break;
        };
        let mut end = start + end_rel + RT_END.len();
        if text.as_bytes().get(end) == Some(&b'\n') {
            end += 1;
        }
        out.push((start, end));
        from = end;
    }
    out
}

// ---------------------------------------------------------------------------
// Scanning
// ---------------------------------------------------------------------------

struct RawLoop {
    kind: LoopKind,
    header_span: Span,
    body_span: Span,
    span: Span,
    body_braced: bool,
}

struct Scanner<'a> {
    bytes: Vec<u8>,
    text: &'a str,
    unit: &'a str,
    consumed_whiles: HashSet<usize>,
}

impl<'a> Scanner<'a> {
    fn new(unit: &'a str, text: &'a str) -> Result<Self, FragmentError> {
        let mut bytes = lexer::mask(text).bytes;
        // Previously inserted runtime preambles contain a loop of their own;
        // blank them so rescans of instrumented text skip them.
        for (start, end) in rt_ranges(text) {
            for b in &mut bytes[start..end] {
                if *b != b'\n' {
                    *b = b' ';
                }
            }
        }
        if let Err((offset, delim)) = lexer::check_balanced(&bytes) {
            return Err(FragmentError::UnbalancedDelimiters {
                unit: unit.to_string(),
                offset,
                line: line_of(text, offset),
                delim,
            });
        }
        Ok(Scanner {
            bytes,
            text,
            unit,
            consumed_whiles: HashSet::new(),
        })
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> FragmentError {
        FragmentError::MalformedLoop {
            unit: self.unit.to_string(),
            offset,
            line: line_of(self.text, offset),
            detail: detail.into(),
        }
    }

    fn expect_byte(&self, pos: usize, b: u8, what: &str) -> Result<(), FragmentError> {
        if self.bytes.get(pos) != Some(&b) {
            return Err(self.err(pos.min(self.bytes.len()), format!("expected `{what}`")));
        }
        Ok(())
    }

    fn scan(&mut self) -> Result<Vec<RawLoop>, FragmentError> {
        let mut keywords: Vec<(usize, LoopKind)> = Vec::new();
        for pos in lexer::word_positions(&self.bytes, "for") {
            keywords.push((pos, LoopKind::For));
        }
        for pos in lexer::word_positions(&self.bytes, "while") {
            keywords.push((pos, LoopKind::While));
        }
        for pos in lexer::word_positions(&self.bytes, "do") {
            keywords.push((pos, LoopKind::DoWhile));
        }
        keywords.sort_unstable_by_key(|&(pos, _)| pos);

        let mut out = Vec::new();
        for (pos, kind) in keywords {
            if kind == LoopKind::While && self.consumed_whiles.contains(&pos) {
                continue;
            }
            out.push(self.parse_loop(pos, kind)?);
        }
        Ok(out)
    }

    fn parse_loop(&mut self, pos: usize, kind: LoopKind) -> Result<RawLoop, FragmentError> {
        match kind {
            LoopKind::For | LoopKind::While => {
                let kw_len = if kind == LoopKind::For { 3 } else { 5 };
                let lparen = lexer::skip_ws(&self.bytes, pos + kw_len);
                self.expect_byte(lparen, b'(', "(")?;
                let rparen = lexer::match_delim(&self.bytes, lparen)
                    .ok_or_else(|| self.err(lparen, "unterminated loop header"))?;
                let header_span = Span::new(pos, rparen + 1);
                let (body_span, body_braced, end) = self.parse_body(rparen + 1)?;
                Ok(RawLoop {
                    kind,
                    header_span,
                    body_span,
                    span: Span::new(pos, end),
                    body_braced,
                })
            }
            LoopKind::DoWhile => {
                let (body_span, body_braced, body_end) = self.parse_body(pos + 2)?;
                let wpos = lexer::skip_ws(&self.bytes, body_end);
                if !lexer::word_at(&self.bytes, wpos, "while") {
                    return Err(self.err(wpos, "expected `while` after do-loop body"));
                }
                self.consumed_whiles.insert(wpos);
                let lparen = lexer::skip_ws(&self.bytes, wpos + 5);
                self.expect_byte(lparen, b'(', "(")?;
                let rparen = lexer::match_delim(&self.bytes, lparen)
                    .ok_or_else(|| self.err(lparen, "unterminated do-while condition"))?;
                let semi = lexer::skip_ws(&self.bytes, rparen + 1);
                self.expect_byte(semi, b';', ";")?;
                Ok(RawLoop {
                    kind,
                    header_span: Span::new(pos, pos + 2),
                    body_span,
                    span: Span::new(pos, semi + 1),
                    body_braced,
                })
            }
        }
    }

    /// Parse a loop body starting after the header. Returns (body span,
    /// braced, end of the body statement).
    fn parse_body(&mut self, after: usize) -> Result<(Span, bool, usize), FragmentError> {
        let start = lexer::skip_ws(&self.bytes, after);
        if start >= self.bytes.len() {
            return Err(self.err(self.bytes.len(), "loop body missing"));
        }
        if self.bytes[start] == b'{' {
            let close = lexer::match_delim(&self.bytes, start)
                .ok_or_else(|| self.err(start, "unterminated loop body"))?;
            Ok((Span::new(start + 1, close), true, close + 1))
        } else {
            let end = self.parse_statement(start)?;
            Ok((Span::new(start, end), false, end))
        }
    }

    /// End offset (exclusive) of the statement starting at `pos`.
    fn parse_statement(&mut self, pos: usize) -> Result<usize, FragmentError> {
        let pos = lexer::skip_ws(&self.bytes, pos);
        if pos >= self.bytes.len() {
            return Err(self.err(self.bytes.len(), "unexpected end of input in statement"));
        }
        match self.bytes[pos] {
            b'{' => {
                let close = lexer::match_delim(&self.bytes, pos)
                    .ok_or_else(|| self.err(pos, "unterminated block"))?;
                return Ok(close + 1);
            }
            b';' => return Ok(pos + 1),
            _ => {}
        }
        if lexer::word_at(&self.bytes, pos, "if") {
            let lparen = lexer::skip_ws(&self.bytes, pos + 2);
            self.expect_byte(lparen, b'(', "(")?;
            let rparen = lexer::match_delim(&self.bytes, lparen)
                .ok_or_else(|| self.err(lparen, "unterminated if condition"))?;
            let then_end = self.parse_statement(rparen + 1)?;
            let next = lexer::skip_ws(&self.bytes, then_end);
            if lexer::word_at(&self.bytes, next, "else") {
                return self.parse_statement(next + 4);
            }
            return Ok(then_end);
        }
        if lexer::word_at(&self.bytes, pos, "switch") {
            let lparen = lexer::skip_ws(&self.bytes, pos + 6);
            self.expect_byte(lparen, b'(', "(")?;
            let rparen = lexer::match_delim(&self.bytes, lparen)
                .ok_or_else(|| self.err(lparen, "unterminated switch head"))?;
            return self.parse_statement(rparen + 1);
        }
        for (kw, kind) in [
            ("for", LoopKind::For),
            ("while", LoopKind::While),
            ("do", LoopKind::DoWhile),
        ] {
            if lexer::word_at(&self.bytes, pos, kw) {
                return Ok(self.parse_loop(pos, kind)?.span.end);
            }
        }
        if lexer::word_at(&self.bytes, pos, "case") {
            let colon = self
                .scan_to(pos, b':')
                .ok_or_else(|| self.err(pos, "unterminated case label"))?;
            return self.parse_statement(colon + 1);
        }
        if lexer::word_at(&self.bytes, pos, "default") {
            let colon = lexer::skip_ws(&self.bytes, pos + 7);
            self.expect_byte(colon, b':', ":")?;
            return self.parse_statement(colon + 1);
        }
        // Plain label: identifier directly followed by `:`.
        if lexer::is_ident_start(self.bytes[pos]) {
            let mut j = pos;
            while j < self.bytes.len() && lexer::is_ident_byte(self.bytes[j]) {
                j += 1;
            }
            let after = lexer::skip_ws(&self.bytes, j);
            if self.bytes.get(after) == Some(&b':')
                && self.bytes.get(after + 1) != Some(&b':')
                && !lexer::word_at(&self.bytes, pos, "default")
            {
                return self.parse_statement(after + 1);
            }
        }
        // Expression or declaration statement: runs to `;` at delimiter depth 0.
        self.scan_to(pos, b';')
            .map(|i| i + 1)
            .ok_or_else(|| self.err(pos, "statement missing `;`"))
    }

    /// Next `target` byte at delimiter depth 0, scanning from `pos`.
    fn scan_to(&self, pos: usize, target: u8) -> Option<usize> {
        let mut depth = 0usize;
        let mut i = pos;
        while i < self.bytes.len() {
            let b = self.bytes[i];
            match b {
                b'(' | b'[' | b'{' => depth += 1,
                b')' | b']' | b'}' => depth = depth.saturating_sub(1),
                _ if b == target && depth == 0 => return Some(i),
                _ => {}
            }
            i += 1;
        }
        None
    }
}

const INT_TYPE_WORDS: &[&str] = &[
    "const", "register", "volatile", "signed", "unsigned", "short", "long", "int", "char",
    "size_t", "ptrdiff_t", "ssize_t", "int8_t", "int16_t", "int32_t", "int64_t", "uint8_t",
    "uint16_t", "uint32_t", "uint64_t",
];

const ASSIGNING_PUNCT: &[&str] = &[
    "=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", "++", "--",
];

fn parse_int_literal(text: &str) -> Option<i64> {
    let t = text
        .trim()
        .trim_end_matches(|c: char| matches!(c, 'u' | 'U' | 'l' | 'L'));
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, t),
    };
    let value = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        t.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

/// Split `tokens` into segments at top-level occurrences of punct `sep`.
fn split_top_level<'t, 'a>(tokens: &'t [Token<'a>], sep: &str) -> Vec<&'t [Token<'a>]> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut seg_start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        match tok.tok {
            Tok::Punct("(") | Tok::Punct("[") | Tok::Punct("{") => depth += 1,
            Tok::Punct(")") | Tok::Punct("]") | Tok::Punct("}") => depth -= 1,
            Tok::Punct(p) if p == sep && depth == 0 => {
                out.push(&tokens[seg_start..i]);
                seg_start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&tokens[seg_start..]);
    out
}

fn has_top_level_comma(tokens: &[Token]) -> bool {
    split_top_level(tokens, ",").len() > 1
}

fn text_between(text: &str, tokens: &[Token], span_end: usize) -> String {
    if tokens.is_empty() {
        return String::new();
    }
    let start = tokens[0].pos;
    text[start..span_end].trim().to_string()
}

/// Try to parse a canonical `for` header interior (between the parens).
fn parse_canonical(text: &str, masked: &[u8], interior: Span) -> Option<CanonicalHeader> {
    let tokens = lexer::tokenize(masked, text, interior.start, interior.end);
    let segments = split_top_level(&tokens, ";");
    if segments.len() != 3 {
        return None;
    }
    let (init, cond, incr) = (segments[0], segments[1], segments[2]);
    if init.is_empty() || cond.is_empty() || incr.is_empty() {
        return None;
    }
    if has_top_level_comma(init) || has_top_level_comma(cond) || has_top_level_comma(incr) {
        return None;
    }

    // init: [type words] var = expr
    let eq_idx = init.iter().position(|t| t.is_punct("="))?;
    if eq_idx == 0 || eq_idx + 1 >= init.len() {
        return None;
    }
    let var = init[eq_idx - 1].ident()?.to_string();
    for tok in &init[..eq_idx - 1] {
        let word = tok.ident()?;
        if !INT_TYPE_WORDS.contains(&word) {
            return None;
        }
    }
    let decl_in_init = eq_idx > 1;
    let init_toks = &init[eq_idx + 1..];
    let init_end = cond[0].pos;
    let init_expr = text_between(text, init_toks, init_end)
        .trim_end_matches(';')
        .trim()
        .to_string();
    let init_const = const_of(init_toks);

    // cond: var cmp bound
    if cond.len() < 3 {
        return None;
    }
    if cond[0].ident()? != var {
        return None;
    }
    let cmp = match cond[1].tok {
        Tok::Punct(p @ ("<" | "<=" | ">" | ">=")) => p.to_string(),
        _ => return None,
    };
    let bound_toks = &cond[2..];
    for (i, tok) in bound_toks.iter().enumerate() {
        match tok.tok {
            Tok::Ident(name) => {
                if name == var {
                    return None;
                }
                // A call in the bound is not provably loop-invariant.
                if matches!(bound_toks.get(i + 1), Some(t) if t.is_punct("(")) {
                    return None;
                }
            }
            Tok::Punct(p) => {
                if ASSIGNING_PUNCT.contains(&p) {
                    return None;
                }
            }
            Tok::Num(_) => {}
        }
    }
    let bound_expr = text_between(text, bound_toks, incr[0].pos)
        .trim_end_matches(';')
        .trim()
        .to_string();
    let bound_const = const_of(bound_toks);

    // incr: ++/--/+=/-=/i = i +- k forms
    let stride = parse_stride(incr, &var)?;
    if stride == 0 {
        return None;
    }
    let ascending = matches!(cmp.as_str(), "<" | "<=");
    if ascending != (stride > 0) {
        return None;
    }

    let trip_count = match (init_const, bound_const) {
        (Some(a), Some(b)) => trip_count_of(a, b, &cmp, stride),
        _ => None,
    };

    Some(CanonicalHeader {
        var,
        init_expr,
        init_const,
        cmp,
        bound_expr,
        bound_const,
        stride,
        decl_in_init,
        trip_count,
    })
}

fn const_of(tokens: &[Token]) -> Option<i64> {
    match tokens {
        [t] => match t.tok {
            Tok::Num(n) => parse_int_literal(n),
            _ => None,
        },
        [m, t] if m.is_punct("-") => match t.tok {
            Tok::Num(n) => parse_int_literal(n).map(|v| -v),
            _ => None,
        },
        _ => None,
    }
}

fn parse_stride(incr: &[Token], var: &str) -> Option<i64> {
    let ident_is = |t: &Token, name: &str| t.ident() == Some(name);
    let num = |t: &Token| match t.tok {
        Tok::Num(n) => parse_int_literal(n),
        _ => None,
    };
    match incr {
        [a, b] if ident_is(a, var) && b.is_punct("++") => Some(1),
        [a, b] if a.is_punct("++") && ident_is(b, var) => Some(1),
        [a, b] if ident_is(a, var) && b.is_punct("--") => Some(-1),
        [a, b] if a.is_punct("--") && ident_is(b, var) => Some(-1),
        [a, op, n] if ident_is(a, var) && op.is_punct("+=") => num(n),
        [a, op, n] if ident_is(a, var) && op.is_punct("-=") => num(n).map(|v| -v),
        [a, op, m, n] if ident_is(a, var) && op.is_punct("+=") && m.is_punct("-") => {
            num(n).map(|v| -v)
        }
        [a, op, m, n] if ident_is(a, var) && op.is_punct("-=") && m.is_punct("-") => num(n),
        [a, eq, b, op, n]
            if ident_is(a, var) && eq.is_punct("=") && ident_is(b, var) && op.is_punct("+") =>
        {
            num(n)
        }
        [a, eq, b, op, n]
            if ident_is(a, var) && eq.is_punct("=") && ident_is(b, var) && op.is_punct("-") =>
        {
            num(n).map(|v| -v)
        }
        [a, eq, n, op, b]
            if ident_is(a, var) && eq.is_punct("=") && op.is_punct("+") && ident_is(b, var) =>
        {
            num(n)
        }
        _ => None,
    }
}

fn trip_count_of(init: i64, bound: i64, cmp: &str, stride: i64) -> Option<u64> {
    let (a, b, s) = (init as i128, bound as i128, stride as i128);
    let distance = match cmp {
        "<" => b - a,
        "<=" => b - a + 1,
        ">" => a - b,
        ">=" => a - b + 1,
        _ => return None,
    };
    if distance <= 0 {
        return Some(0);
    }
    let step = s.abs();
    let trips = (distance + step - 1) / step;
    u64::try_from(trips).ok()
}

/// Scan a single unit. IDs are unit-local, starting at 1; `annotate` renumbers
/// across units. Runs on pristine and on instrumented text alike (runtime
/// preamble blocks are skipped).
pub fn scan_loops(unit: &SourceUnit) -> Result<Vec<LoopRecord>, FragmentError> {
    scan_loops_based(unit, 0)
}

fn scan_loops_based(unit: &SourceUnit, id_base: u32) -> Result<Vec<LoopRecord>, FragmentError> {
    let mut scanner = Scanner::new(&unit.path, &unit.content)?;
    let raw = scanner.scan()?;

    let mut records: Vec<LoopRecord> = Vec::with_capacity(raw.len());
    let mut stack: Vec<usize> = Vec::new();
    for (i, r) in raw.iter().enumerate() {
        while let Some(&top) = stack.last() {
            if records[top].body_span.contains(&r.span) {
                break;
            }
            stack.pop();
        }
        let parent_id = stack.last().map(|&top| records[top].id);
        let depth = stack.len() as u32;
        let canonical = if r.kind == LoopKind::For {
            let lparen = (r.header_span.start + 3..r.header_span.end)
                .find(|&p| scanner.bytes[p] == b'(');
            lparen.and_then(|lp| {
                parse_canonical(
                    &unit.content,
                    &scanner.bytes,
                    Span::new(lp + 1, r.header_span.end - 1),
                )
            })
        } else {
            None
        };
        let shape = if canonical.is_some() {
            LoopShape::Canonical
        } else {
            LoopShape::NonCanonical
        };
        records.push(LoopRecord {
            id: LoopId(id_base + i as u32 + 1),
            unit: unit.path.clone(),
            kind: r.kind,
            shape,
            depth,
            parent_id,
            line: line_of(&unit.content, r.span.start),
            header_span: r.header_span,
            body_span: r.body_span,
            span: r.span,
            body_braced: r.body_braced,
            canonical,
        });
        stack.push(i);
    }
    Ok(records)
}

/// Byte spans of `switch` statements in `text` (statement keyword through the
/// controlled body). Best-effort: malformed text yields an empty list.
pub(crate) fn switch_spans(text: &str) -> Vec<Span> {
    let Ok(mut scanner) = Scanner::new("<fragment>", text) else {
        return Vec::new();
    };
    let positions = lexer::word_positions(&scanner.bytes, "switch");
    let mut spans = Vec::new();
    for pos in positions {
        let lparen = lexer::skip_ws(&scanner.bytes, pos + 6);
        if scanner.bytes.get(lparen) != Some(&b'(') {
            continue;
        }
        let Some(rparen) = lexer::match_delim(&scanner.bytes, lparen) else {
            continue;
        };
        if let Ok(end) = scanner.parse_statement(rparen + 1) {
            spans.push(Span::new(pos, end));
        }
    }
    spans
}

// ---------------------------------------------------------------------------
// Annotation
// ---------------------------------------------------------------------------

enum EditKind {
    Preamble,
    BodyClose { depth: u32 },
    WrapClose { depth: u32 },
    BodyOpen { depth: u32 },
    WrapOpen { depth: u32 },
}

struct Edit {
    offset: usize,
    kind: EditKind,
    text: String,
}

impl Edit {
    /// Ordering for edits at equal offsets: preamble, then closes (deepest
    /// first, body-close before wrap-close of the same loop), then opens
    /// (shallowest first, body-open of the outer loop before wrap-open of an
    /// inner one).
    fn key(&self) -> (usize, i8, i64, i8) {
        let (class, depth, sub) = match self.kind {
            EditKind::Preamble => (-1, 0, 0),
            EditKind::BodyClose { depth } => (0, -(depth as i64), 0),
            EditKind::WrapClose { depth } => (0, -(depth as i64), 1),
            EditKind::BodyOpen { depth } => (1, depth as i64, 0),
            EditKind::WrapOpen { depth } => (1, depth as i64, 1),
        };
        (self.offset, class, depth, sub)
    }
}

fn apply_edits(text: &str, mut edits: Vec<Edit>) -> String {
    edits.sort_by_key(|e| e.key());
    let mut out = String::with_capacity(text.len() + edits.iter().map(|e| e.text.len()).sum::<usize>());
    let mut cursor = 0;
    for edit in edits {
        out.push_str(&text[cursor..edit.offset]);
        out.push_str(&edit.text);
        cursor = edit.offset;
    }
    out.push_str(&text[cursor..]);
    out
}

const RUNTIME_DEFINE_TEMPLATE: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#ifdef _OPENMP
#include <omp.h>
static double __parsweep_now(void) { return omp_get_wtime(); }
#else
#include <time.h>
static int omp_in_parallel(void) { return 0; }
static double __parsweep_now(void) {
    struct timespec __parsweep_ts;
    clock_gettime(CLOCK_MONOTONIC, &__parsweep_ts);
    return (double)__parsweep_ts.tv_sec + 1e-9 * (double)__parsweep_ts.tv_nsec;
}
#endif
static double __parsweep_acc[@N@];
static unsigned long long __parsweep_hits[@N@];
static double __parsweep_t0[@N@];
static int __parsweep_depth[@N@];
static int __parsweep_atexit_done = 0;
static void __parsweep_dump(void) {
    const char *__parsweep_path = getenv("PARSWEEP_TIMING_FILE");
    FILE *__parsweep_f;
    int __parsweep_i;
    if (!__parsweep_path || !__parsweep_path[0]) __parsweep_path = "./parsweep_timing.txt";
    __parsweep_f = fopen(__parsweep_path, "w");
    if (!__parsweep_f) return;
    for (__parsweep_i = 0; __parsweep_i < @N@; __parsweep_i++)
        if (__parsweep_hits[__parsweep_i])
            fprintf(__parsweep_f, "LOOP %d %.9f\n", __parsweep_i, __parsweep_acc[__parsweep_i]);
    fclose(__parsweep_f);
}
void __parsweep_loop_start(int __parsweep_id) {
    if (omp_in_parallel()) return;
    if (!__parsweep_atexit_done) { __parsweep_atexit_done = 1; atexit(__parsweep_dump); }
    if (__parsweep_depth[__parsweep_id]++ == 0) __parsweep_t0[__parsweep_id] = __parsweep_now();
}
void __parsweep_loop_stop(int __parsweep_id) {
    if (omp_in_parallel()) return;
    if (__parsweep_depth[__parsweep_id] > 0 && --__parsweep_depth[__parsweep_id] == 0) {
        __parsweep_acc[__parsweep_id] += __parsweep_now() - __parsweep_t0[__parsweep_id];
        __parsweep_hits[__parsweep_id]++;
    }
}
"#;

fn runtime_define_block(max_id: u32) -> String {
    let n = (max_id + 1).to_string();
    format!(
        "{RT_BEGIN_DEFINE}{}{RT_END}\n",
        RUNTIME_DEFINE_TEMPLATE.replace("@N@", &n)
    )
}

fn runtime_extern_block() -> String {
    format!(
        "{RT_BEGIN_EXTERN}\nvoid __parsweep_loop_start(int __parsweep_id);\nvoid __parsweep_loop_stop(int __parsweep_id);\n{RT_END}\n"
    )
}

/// Instrument every unit. Loop ids are assigned across units in the given
/// order; the first unit receives the timing runtime definition block and
/// every other loop-bearing unit an extern declaration block.
pub fn annotate(sources: &[SourceUnit]) -> Result<InstrumentedSource, FragmentError> {
    for unit in sources {
        for token in ["PARSWEEP", "__parsweep"] {
            if let Some(offset) = unit.content.find(token) {
                return Err(FragmentError::MarkerCollision {
                    unit: unit.path.clone(),
                    offset,
                });
            }
        }
    }

    let mut all_records: Vec<LoopRecord> = Vec::new();
    let mut per_unit: Vec<Vec<LoopRecord>> = Vec::new();
    for unit in sources {
        let records = scan_loops_based(unit, all_records.len() as u32)?;
        all_records.extend(records.iter().cloned());
        per_unit.push(records);
    }
    let max_id = all_records.len() as u32;

    let mut units_out = Vec::with_capacity(sources.len());
    for (idx, unit) in sources.iter().enumerate() {
        let records = &per_unit[idx];
        let mut edits: Vec<Edit> = Vec::new();
        if idx == 0 {
            edits.push(Edit {
                offset: 0,
                kind: EditKind::Preamble,
                text: runtime_define_block(max_id),
            });
        } else if !records.is_empty() {
            edits.push(Edit {
                offset: 0,
                kind: EditKind::Preamble,
                text: runtime_extern_block(),
            });
        }
        for rec in records {
            edits.push(Edit {
                offset: rec.span.start,
                kind: EditKind::WrapOpen { depth: rec.depth },
                text: wrap_open_str(rec.id),
            });
            edits.push(Edit {
                offset: rec.span.end,
                kind: EditKind::WrapClose { depth: rec.depth },
                text: wrap_close_str(rec.id),
            });
            if !rec.body_braced {
                edits.push(Edit {
                    offset: rec.body_span.start,
                    kind: EditKind::BodyOpen { depth: rec.depth },
                    text: body_open_str(rec.id),
                });
                edits.push(Edit {
                    offset: rec.body_span.end,
                    kind: EditKind::BodyClose { depth: rec.depth },
                    text: body_close_str(rec.id),
                });
            }
        }
        units_out.push(SourceUnit::new(
            unit.path.clone(),
            apply_edits(&unit.content, edits),
        ));
    }

    Ok(InstrumentedSource {
        units: units_out,
        loops: all_records,
        marker_scheme: MARKER_SCHEME.to_string(),
        max_id,
    })
}

// ---------------------------------------------------------------------------
// Stripping
// ---------------------------------------------------------------------------

fn remove_exact(
    text: &mut String,
    needle: &str,
    unit: &str,
    id: LoopId,
) -> Result<(), FragmentError> {
    match text.find(needle) {
        Some(pos) => {
            text.replace_range(pos..pos + needle.len(), "");
            Ok(())
        }
        None => Err(FragmentError::MissingMarker {
            unit: unit.to_string(),
            id,
        }),
    }
}

fn remove_rt_block(text: &mut String, begin: &str, unit: &str) -> Result<(), FragmentError> {
    let start = text
        .find(begin)
        .ok_or_else(|| FragmentError::UnknownMarkerScheme {
            unit: unit.to_string(),
            detail: "timing runtime preamble not found".to_string(),
        })?;
    let end_rel = text[start..]
        .find(RT_END)
        .ok_or_else(|| FragmentError::UnknownMarkerScheme {
            unit: unit.to_string(),
            detail: "timing runtime preamble is not terminated".to_string(),
        })?;
    let mut end = start + end_rel + RT_END.len();
    if text.as_bytes().get(end) == Some(&b'\n') {
        end += 1;
    }
    text.replace_range(start..end, "");
    Ok(())
}

/// Exact reversal of `annotate`: removes every inserted fragment and verifies
/// nothing instrumentation-related is left behind.
pub fn strip(instrumented: &InstrumentedSource) -> Result<Vec<SourceUnit>, FragmentError> {
    if instrumented.marker_scheme != MARKER_SCHEME {
        return Err(FragmentError::UnknownMarkerScheme {
            unit: String::new(),
            detail: format!("unsupported marker scheme `{}`", instrumented.marker_scheme),
        });
    }
    let mut out = Vec::with_capacity(instrumented.units.len());
    for (idx, unit) in instrumented.units.iter().enumerate() {
        let mut text = unit.content.clone();
        let unit_loops: Vec<&LoopRecord> = instrumented
            .loops
            .iter()
            .filter(|r| r.unit == unit.path)
            .collect();
        if idx == 0 {
            remove_rt_block(&mut text, RT_BEGIN_DEFINE, &unit.path)?;
        } else if !unit_loops.is_empty() {
            remove_rt_block(&mut text, RT_BEGIN_EXTERN, &unit.path)?;
        }
        for rec in &unit_loops {
            remove_exact(&mut text, &wrap_open_str(rec.id), &unit.path, rec.id)?;
            remove_exact(&mut text, &wrap_close_str(rec.id), &unit.path, rec.id)?;
            if !rec.body_braced {
                remove_exact(&mut text, &body_open_str(rec.id), &unit.path, rec.id)?;
                remove_exact(&mut text, &body_close_str(rec.id), &unit.path, rec.id)?;
            }
        }
        for token in ["PARSWEEP", "__parsweep"] {
            if text.contains(token) {
                return Err(FragmentError::UnknownMarkerScheme {
                    unit: unit.path.clone(),
                    detail: format!("leftover `{token}` content after strip"),
                });
            }
        }
        out.push(SourceUnit::new(unit.path.clone(), text));
    }
    Ok(out)
}

/// Best-effort strip for text a backend may have reshaped: removes runtime
/// preambles, every PARSWEEP comment (whole line when alone on it) and every
/// timer call, keeping pragmas and everything else.
pub fn strip_lenient_text(text: &str) -> String {
    let mut out = text.to_string();
    while let Some(&(start, end)) = rt_ranges(&out).first() {
        out.replace_range(start..end, "");
    }
    // Timer calls: drop the call text, keep the wrap braces.
    for prefix in ["__parsweep_loop_start(", "__parsweep_loop_stop("] {
        while let Some(pos) = out.find(prefix) {
            let Some(close) = out[pos..].find(");") else {
                break;
            };
            out.replace_range(pos..pos + close + 2, "");
        }
    }
    // PARSWEEP comments; if alone on a line, remove the line.
    while let Some(pos) = out.find("/*PARSWEEP") {
        let Some(close) = out[pos..].find("*/") else {
            break;
        };
        let mut start = pos;
        let mut end = pos + close + 2;
        let line_start = out[..pos].rfind('\n').map(|i| i + 1).unwrap_or(0);
        let line_end = out[end..]
            .find('\n')
            .map(|i| end + i + 1)
            .unwrap_or(out.len());
        let before_blank = out[line_start..pos].trim().is_empty();
        let content_end = if line_end > end && out.as_bytes()[line_end - 1] == b'\n' {
            line_end - 1
        } else {
            line_end
        };
        let after_blank = out[end..content_end].trim().is_empty();
        if before_blank && after_blank {
            start = line_start;
            end = line_end;
        }
        out.replace_range(start..end, "");
    }
    out
}
