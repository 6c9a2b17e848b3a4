//! Conservative dependence analysis for canonical loops.
//!
//! The recognized subset: canonical `for` headers, array accesses with affine
//! subscripts, scalar assignments, calls to a small pure-math whitelist.
//! Everything else rejects the loop with a recorded reason. The test for a
//! written array is deliberately strict: every access (read or write) must
//! use one identical affine subscript vector, and at least one dimension must
//! be `c*i + k` with a nonzero constant coefficient on the parallelized
//! induction variable and no other varying symbol in that dimension. That is
//! stronger than plain subscript equality; equality alone would admit
//! loop-carried cases like `a[i+j]` under a varying inner `j`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::fragmentor::{self, LoopRecord, LoopShape};
use crate::lexer::{self, Tok, Token};
use crate::source::{LoopId, SourceUnit, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Parallelizable,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    FunctionCall,
    NonCanonical,
    LoopCarriedDependence,
    PointerAccess,
    ControlEscape,
    Io,
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopAnalysis {
    pub loop_id: LoopId,
    pub classification: Classification,
    pub reject_reason: Option<RejectReason>,
    pub private_vars: Vec<String>,
    /// (operator, variable) pairs, rendered as `reduction(op:var)`.
    pub reduction_clauses: Vec<(char, String)>,
    pub notes: Vec<String>,
}

impl LoopAnalysis {
    fn rejected(loop_id: LoopId, reason: RejectReason, note: impl Into<String>) -> Self {
        LoopAnalysis {
            loop_id,
            classification: Classification::Rejected,
            reject_reason: Some(reason),
            private_vars: Vec::new(),
            reduction_clauses: Vec::new(),
            notes: vec![note.into()],
        }
    }

    pub fn is_parallelizable(&self) -> bool {
        self.classification == Classification::Parallelizable
    }
}

pub const MATH_WHITELIST: &[&str] = &["sqrt", "fabs", "sin", "cos", "exp", "log", "pow"];

const IO_CALLS: &[&str] = &[
    "printf", "fprintf", "sprintf", "snprintf", "vprintf", "scanf", "fscanf", "sscanf", "puts",
    "fputs", "gets", "fgets", "putchar", "getchar", "putc", "getc", "fgetc", "fputc", "fopen",
    "fclose", "fread", "fwrite", "fseek", "ftell", "rewind", "perror", "fflush", "remove",
    "rename",
];

const KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "size_t", "ptrdiff_t", "ssize_t", "int8_t",
    "int16_t", "int32_t", "int64_t", "uint8_t", "uint16_t", "uint32_t", "uint64_t", "_Bool",
];

const TYPE_STARTERS: &[&str] = &[
    "char", "const", "double", "float", "int", "long", "register", "short", "signed", "unsigned",
    "volatile", "size_t", "ptrdiff_t", "ssize_t", "int8_t", "int16_t", "int32_t", "int64_t",
    "uint8_t", "uint16_t", "uint32_t", "uint64_t", "_Bool", "static",
];

const CONTROL_WORDS: &[&str] = &["if", "else", "for", "while", "do", "switch", "case", "default"];

/// Affine form: Σ coeff·symbol + constant.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Affine {
    terms: BTreeMap<String, i64>,
    konst: i64,
}

impl Affine {
    fn constant(v: i64) -> Self {
        Affine {
            terms: BTreeMap::new(),
            konst: v,
        }
    }

    fn symbol(name: &str) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(name.to_string(), 1);
        Affine { terms, konst: 0 }
    }

    fn add(mut self, other: &Affine, sign: i64) -> Self {
        for (name, coeff) in &other.terms {
            let entry = self.terms.entry(name.clone()).or_insert(0);
            *entry += coeff * sign;
            if *entry == 0 {
                self.terms.remove(name);
            }
        }
        self.konst += other.konst * sign;
        self
    }

    fn scale(mut self, factor: i64) -> Self {
        self.terms.retain(|_, coeff| {
            *coeff *= factor;
            *coeff != 0
        });
        self.konst *= factor;
        self
    }

    fn as_constant(&self) -> Option<i64> {
        self.terms.is_empty().then_some(self.konst)
    }
}

/// Recursive-descent affine parser over a subscript token slice. `None`
/// means "not provably affine".
struct AffineParser<'t, 'a> {
    toks: &'t [Token<'a>],
    pos: usize,
}

impl<'t, 'a> AffineParser<'t, 'a> {
    fn parse(toks: &'t [Token<'a>]) -> Option<Affine> {
        let mut p = AffineParser { toks, pos: 0 };
        let expr = p.expr()?;
        (p.pos == toks.len()).then_some(expr)
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.toks.get(self.pos)
    }

    fn expr(&mut self) -> Option<Affine> {
        let mut acc = self.term()?;
        while let Some(tok) = self.peek() {
            match tok.tok {
                Tok::Punct("+") => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.add(&rhs, 1);
                }
                Tok::Punct("-") => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.add(&rhs, -1);
                }
                _ => break,
            }
        }
        Some(acc)
    }

    fn term(&mut self) -> Option<Affine> {
        let mut acc = self.factor()?;
        while let Some(tok) = self.peek() {
            if !tok.is_punct("*") {
                break;
            }
            self.pos += 1;
            let rhs = self.factor()?;
            acc = match (acc.as_constant(), rhs.as_constant()) {
                (Some(c), _) => rhs.scale(c),
                (_, Some(c)) => acc.scale(c),
                _ => return None,
            };
        }
        Some(acc)
    }

    fn factor(&mut self) -> Option<Affine> {
        let tok = *self.peek()?;
        match tok.tok {
            Tok::Num(text) => {
                self.pos += 1;
                Some(Affine::constant(parse_subscript_literal(text)?))
            }
            Tok::Ident(name) => {
                if KEYWORDS.contains(&name) {
                    return None;
                }
                // A nested call or subscript makes the whole dimension opaque.
                if matches!(self.toks.get(self.pos + 1), Some(t) if t.is_punct("(") || t.is_punct("["))
                {
                    return None;
                }
                self.pos += 1;
                Some(Affine::symbol(name))
            }
            Tok::Punct("(") => {
                self.pos += 1;
                let inner = self.expr()?;
                if !matches!(self.peek(), Some(t) if t.is_punct(")")) {
                    return None;
                }
                self.pos += 1;
                Some(inner)
            }
            Tok::Punct("-") => {
                self.pos += 1;
                Some(self.factor()?.scale(-1))
            }
            Tok::Punct("+") => {
                self.pos += 1;
                self.factor()
            }
            _ => None,
        }
    }
}

fn parse_subscript_literal(text: &str) -> Option<i64> {
    let t = text.trim_end_matches(|c: char| matches!(c, 'u' | 'U' | 'l' | 'L'));
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return i64::from_str_radix(hex, 16).ok();
    }
    t.parse::<i64>().ok()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Access {
    Read,
    Write,
    ReadWrite,
}

impl Access {
    fn writes(self) -> bool {
        !matches!(self, Access::Read)
    }
}

#[derive(Debug)]
struct ArrayAccess {
    dims: Vec<Option<Affine>>,
    access: Access,
}

#[derive(Debug)]
struct ScalarAccess {
    pos: usize,
    access: Access,
    /// Plain `name = rhs` with rhs free of `name`.
    whole_write: bool,
    /// Write at brace depth 0, outside nested constructs, with no control
    /// keyword earlier in its statement.
    unconditional_top_level: bool,
    reduction_op: Option<char>,
}

struct BodyFacts {
    arrays: BTreeMap<String, Vec<ArrayAccess>>,
    scalars: BTreeMap<String, Vec<ScalarAccess>>,
    declared_in_body: HashSet<String>,
    flags: Vec<(RejectReason, String)>,
}

/// Token index ranges of all `[...]` groups directly following token `i`.
fn bracket_groups(toks: &[Token], mut i: usize) -> (Vec<(usize, usize)>, usize) {
    let mut groups = Vec::new();
    while matches!(toks.get(i), Some(t) if t.is_punct("[")) {
        let mut depth = 0usize;
        let start = i;
        loop {
            match toks.get(i) {
                Some(t) if t.is_punct("[") => depth += 1,
                Some(t) if t.is_punct("]") => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                Some(_) => {}
                None => return (groups, i),
            }
            i += 1;
        }
        groups.push((start + 1, i));
        i += 1;
    }
    (groups, i)
}

/// Skip a `.member` chain, returning the index after it.
fn skip_member_chain(toks: &[Token], mut i: usize) -> usize {
    while matches!(toks.get(i), Some(t) if t.is_punct("."))
        && matches!(toks.get(i + 1), Some(t) if t.ident().is_some())
    {
        i += 2;
    }
    i
}

fn access_kind(toks: &[Token], after: usize, before: usize) -> Access {
    if before > 0 {
        if let Some(prev) = toks.get(before - 1) {
            if prev.is_punct("++") || prev.is_punct("--") {
                return Access::ReadWrite;
            }
        }
    }
    match toks.get(after).map(|t| t.tok) {
        Some(Tok::Punct("=")) => Access::Write,
        Some(Tok::Punct(
            "+=" | "-=" | "*=" | "/=" | "%=" | "&=" | "|=" | "^=" | "<<=" | ">>=" | "++" | "--",
        )) => Access::ReadWrite,
        _ => Access::Read,
    }
}

fn scan_body(body: &str, inner_spans: &[Span], switch_spans: &[Span]) -> BodyFacts {
    let masked = lexer::mask(body).bytes;
    let toks = lexer::tokenize(&masked, body, 0, body.len());
    let n = toks.len();

    let mut facts = BodyFacts {
        arrays: BTreeMap::new(),
        scalars: BTreeMap::new(),
        declared_in_body: HashSet::new(),
        flags: Vec::new(),
    };

    // Brace depth at each token.
    let mut depth_at = vec![0i32; n];
    let mut depth = 0i32;
    for (i, tok) in toks.iter().enumerate() {
        if tok.is_punct("}") {
            depth -= 1;
        }
        depth_at[i] = depth;
        if tok.is_punct("{") {
            depth += 1;
        }
    }

    let inside = |pos: usize, spans: &[Span]| spans.iter().any(|s| s.start <= pos && pos < s.end);

    // Statement context: does any control keyword precede token `w` within
    // its statement at the same depth?
    let conditional_context = |w: usize| -> bool {
        if depth_at[w] != 0 || inside(toks[w].pos, inner_spans) || inside(toks[w].pos, switch_spans)
        {
            return true;
        }
        let mut i = w;
        while i > 0 {
            i -= 1;
            if depth_at[i] != 0 {
                continue;
            }
            match toks[i].tok {
                Tok::Punct(";" | "{" | "}") => break,
                Tok::Punct("?" | ":") => return true,
                Tok::Ident(word) if CONTROL_WORDS.contains(&word) => return true,
                _ => {}
            }
        }
        false
    };

    // Tokens to `;` at relative delimiter depth 0, starting at `i`.
    let rest_of_statement = |mut i: usize| -> (usize, usize) {
        let start = i;
        let mut d = 0i32;
        while i < n {
            match toks[i].tok {
                Tok::Punct("(" | "[" | "{") => d += 1,
                Tok::Punct(")" | "]" | "}") => {
                    if d == 0 {
                        break;
                    }
                    d -= 1;
                }
                Tok::Punct(";") if d == 0 => break,
                _ => {}
            }
            i += 1;
        }
        (start, i)
    };

    let contains_ident = |range: (usize, usize), name: &str| -> bool {
        toks[range.0..range.1]
            .iter()
            .any(|t| t.ident() == Some(name))
    };

    let mut reduction_marks: HashMap<usize, char> = HashMap::new();

    let mut i = 0;
    while i < n {
        let tok = toks[i];
        match tok.tok {
            Tok::Ident(name) => {
                let next = toks.get(i + 1);
                if KEYWORDS.contains(&name) {
                    match name {
                        "goto" | "return" => facts.flags.push((
                            RejectReason::ControlEscape,
                            format!("`{name}` escapes the loop"),
                        )),
                        "break" => {
                            if !inside(tok.pos, inner_spans) && !inside(tok.pos, switch_spans) {
                                facts.flags.push((
                                    RejectReason::ControlEscape,
                                    "`break` leaves the analyzed loop".to_string(),
                                ));
                            }
                        }
                        _ => {}
                    }
                    i += 1;
                    continue;
                }
                if matches!(next, Some(t) if t.is_punct("(")) {
                    if name.starts_with("__parsweep") || MATH_WHITELIST.contains(&name) {
                        // instrumentation or whitelisted pure math
                    } else if IO_CALLS.contains(&name) {
                        facts
                            .flags
                            .push((RejectReason::Io, format!("I/O call `{name}`")));
                    } else {
                        facts.flags.push((
                            RejectReason::FunctionCall,
                            format!("call to `{name}` outside the math whitelist"),
                        ));
                    }
                    i += 1;
                    continue;
                }
                if matches!(next, Some(t) if t.is_punct("[")) {
                    let (groups, after_brackets) = bracket_groups(&toks, i + 1);
                    let after_members = skip_member_chain(&toks, after_brackets);
                    let access = access_kind(&toks, after_members, i);
                    let dims = groups
                        .iter()
                        .map(|&(a, b)| AffineParser::parse(&toks[a..b]))
                        .collect();
                    facts
                        .arrays
                        .entry(name.to_string())
                        .or_default()
                        .push(ArrayAccess { dims, access });
                    // Do not skip the subscript tokens: identifiers inside
                    // them are scalar reads and are scanned in their turn.
                    i += 1;
                    continue;
                }
                // Declaration mention: a type word directly precedes.
                let declared = i > 0
                    && matches!(toks[i - 1].tok, Tok::Ident(w) if TYPE_STARTERS.contains(&w));
                if declared {
                    facts.declared_in_body.insert(name.to_string());
                }
                if matches!(next, Some(t) if t.is_punct(".")) {
                    // Field-insensitive: treat `s.x = ...` as a write to `s`.
                    let after_members = skip_member_chain(&toks, i + 1);
                    let access = access_kind(&toks, after_members, i);
                    facts
                        .scalars
                        .entry(name.to_string())
                        .or_default()
                        .push(ScalarAccess {
                            pos: tok.pos,
                            access,
                            whole_write: false,
                            unconditional_top_level: false,
                            reduction_op: None,
                        });
                    i += 1;
                    continue;
                }
                if declared && matches!(next, Some(t) if t.is_punct(";") || t.is_punct(",")) {
                    // `int t;` mention, not an access.
                    i += 1;
                    continue;
                }
                let access = access_kind(&toks, i + 1, i);
                let mut whole_write = false;
                let mut reduction_op = reduction_marks.remove(&i);
                if access == Access::Write {
                    // name = rhs;
                    let rhs = rest_of_statement(i + 2);
                    if !contains_ident(rhs, name) {
                        whole_write = true;
                    } else if reduction_op.is_none() {
                        // name = name ⊕ rest, rest free of name.
                        let op = toks.get(i + 3).and_then(|t| match t.tok {
                            Tok::Punct("+") => Some('+'),
                            Tok::Punct("*") => Some('*'),
                            _ => None,
                        });
                        if let (Some(op), Some(second)) = (op, toks.get(i + 2)) {
                            if second.ident() == Some(name) {
                                let rest = rest_of_statement(i + 4);
                                let rest_ok = !contains_ident(rest, name)
                                    && (op == '+' || mult_chain_only(&toks[rest.0..rest.1]));
                                if rest_ok {
                                    reduction_op = Some(op);
                                    reduction_marks.insert(i + 2, op);
                                }
                            }
                        }
                    }
                }
                if access == Access::ReadWrite && reduction_op.is_none() {
                    // name ⊕= rest, rest free of name.
                    if let Some(op) = toks.get(i + 1).and_then(|t| match t.tok {
                        Tok::Punct("+=") => Some('+'),
                        Tok::Punct("*=") => Some('*'),
                        _ => None,
                    }) {
                        let rest = rest_of_statement(i + 2);
                        if !contains_ident(rest, name) {
                            reduction_op = Some(op);
                        }
                    }
                }
                let unconditional = access == Access::Write && !conditional_context(i);
                facts
                    .scalars
                    .entry(name.to_string())
                    .or_default()
                    .push(ScalarAccess {
                        pos: tok.pos,
                        access,
                        whole_write,
                        unconditional_top_level: unconditional,
                        reduction_op,
                    });
                i += 1;
            }
            Tok::Punct("->") => {
                facts.flags.push((
                    RejectReason::PointerAccess,
                    "pointer member access `->`".to_string(),
                ));
                i += 1;
            }
            Tok::Punct(p @ ("*" | "&")) => {
                let unary = match i.checked_sub(1).and_then(|j| toks.get(j)) {
                    None => true,
                    Some(prev) => match prev.tok {
                        Tok::Ident(w) => KEYWORDS.contains(&w) && !TYPE_STARTERS.contains(&w),
                        Tok::Num(_) => false,
                        Tok::Punct(")" | "]" | "++" | "--") => false,
                        Tok::Punct(_) => true,
                    },
                };
                if unary {
                    facts.flags.push((
                        RejectReason::PointerAccess,
                        format!("unary `{p}` (pointer dereference or address-of)"),
                    ));
                }
                i += 1;
            }
            _ => {
                i += 1;
            }
        }
    }

    facts
}

/// For `s = s * rest`, `rest` must be a pure multiplicative chain: a
/// top-level `+`/`-` would change grouping.
fn mult_chain_only(toks: &[Token]) -> bool {
    let mut depth = 0i32;
    for tok in toks {
        match tok.tok {
            Tok::Punct("(" | "[") => depth += 1,
            Tok::Punct(")" | "]") => depth -= 1,
            Tok::Punct("+" | "-") if depth == 0 => return false,
            _ => {}
        }
    }
    true
}

/// Analyze one canonical loop. `body_text` is the slice described by
/// `loop_record.body_span` (instrumented text is fine: timer calls and marker
/// comments are recognized and ignored). `options` are the backend flags of
/// the combination; unknown flags are ignored.
pub fn analyze_loop(loop_record: &LoopRecord, body_text: &str, options: &[String]) -> LoopAnalysis {
    let _ = options;
    let id = loop_record.id;
    if loop_record.shape != LoopShape::Canonical {
        return LoopAnalysis::rejected(id, RejectReason::NonCanonical, "non-canonical header");
    }
    let header = loop_record
        .canonical
        .as_ref()
        .expect("canonical shape implies parsed header");
    let var = header.var.clone();

    // Nested structure inside the body.
    let inner = match fragmentor::scan_loops(&SourceUnit::new("<body>", body_text)) {
        Ok(records) => records,
        Err(err) => {
            return LoopAnalysis::rejected(
                id,
                RejectReason::NonCanonical,
                format!("unsupported construct: {err}"),
            )
        }
    };
    let inner_spans: Vec<Span> = inner.iter().map(|r| r.span).collect();
    let switch_spans = fragmentor::switch_spans(body_text);

    let facts = scan_body(body_text, &inner_spans, &switch_spans);

    // Non-loop rejections, by fixed priority.
    for reason in [
        RejectReason::ControlEscape,
        RejectReason::Io,
        RejectReason::FunctionCall,
        RejectReason::PointerAccess,
    ] {
        if let Some((_, note)) = facts.flags.iter().find(|(r, _)| *r == reason) {
            return LoopAnalysis::rejected(id, reason, note.clone());
        }
    }

    // Writes to the analyzed induction variable inside the body make the
    // iteration space dynamic.
    if let Some(accesses) = facts.scalars.get(&var) {
        if accesses.iter().any(|a| a.access.writes()) {
            return LoopAnalysis::rejected(
                id,
                RejectReason::NonCanonical,
                format!("body writes induction variable `{var}`"),
            );
        }
    }

    // Inner canonical loop bookkeeping: which scalar is some inner loop's
    // induction variable, and is its first access that loop's own init?
    let mut inner_var_records: HashMap<String, Vec<&LoopRecord>> = HashMap::new();
    for rec in &inner {
        if let Some(hdr) = &rec.canonical {
            inner_var_records.entry(hdr.var.clone()).or_default().push(rec);
        }
    }

    let mut private_vars: BTreeSet<String> = BTreeSet::new();
    let mut reductions: BTreeMap<String, char> = BTreeMap::new();
    let mut notes: Vec<String> = Vec::new();

    // Scalars written in the body (needed for subscript certification).
    let mut varying: BTreeSet<String> = BTreeSet::new();
    varying.insert(var.clone());
    for (name, accesses) in &facts.scalars {
        if accesses.iter().any(|a| a.access.writes()) {
            varying.insert(name.clone());
        }
    }
    for name in inner_var_records.keys() {
        varying.insert(name.clone());
    }

    for (name, accesses) in &facts.scalars {
        if name == &var {
            continue;
        }
        let written = accesses.iter().any(|a| a.access.writes());
        if !written {
            continue;
        }
        let first = accesses
            .iter()
            .min_by_key(|a| a.pos)
            .expect("written scalar has accesses");

        // Declared inside the body and written at its declaration: fresh
        // storage every iteration, no clause needed, no dependence possible.
        if facts.declared_in_body.contains(name) && first.access == Access::Write {
            notes.push(format!("`{name}` is block-scoped, no clause needed"));
            continue;
        }

        // Reduction: every access sits in a reduction statement of one
        // operator.
        let ops: BTreeSet<Option<char>> = accesses.iter().map(|a| a.reduction_op).collect();
        if let [Some(op)] = ops.iter().copied().collect::<Vec<_>>()[..] {
            reductions.insert(name.clone(), op);
            continue;
        }

        // Privatizable: first textual access is an unconditional top-level
        // whole write, or the init write of an inner canonical for.
        let first_is_whole_top =
            first.access == Access::Write && first.whole_write && first.unconditional_top_level;
        let first_is_inner_init = inner_var_records.get(name).is_some_and(|records| {
            records
                .iter()
                .any(|rec| rec.header_span.start <= first.pos && first.pos < rec.header_span.end)
        });
        if first_is_whole_top || first_is_inner_init {
            private_vars.insert(name.clone());
            continue;
        }

        return LoopAnalysis::rejected(
            id,
            RejectReason::LoopCarriedDependence,
            format!("scalar `{name}` is written but neither reduction nor privatizable"),
        );
    }

    // Array dependence test.
    for (name, accesses) in &facts.arrays {
        let written = accesses.iter().any(|a| a.access.writes());
        if !written {
            continue;
        }
        let mut vectors: Vec<&Vec<Option<Affine>>> = accesses.iter().map(|a| &a.dims).collect();
        vectors.dedup();
        if vectors
            .iter()
            .any(|dims| dims.iter().any(|d| d.is_none()))
        {
            return LoopAnalysis::rejected(
                id,
                RejectReason::LoopCarriedDependence,
                format!("array `{name}` has a non-affine subscript"),
            );
        }
        let first = &accesses[0].dims;
        if accesses.iter().any(|a| &a.dims != first) {
            return LoopAnalysis::rejected(
                id,
                RejectReason::LoopCarriedDependence,
                format!("array `{name}` is accessed through differing subscripts"),
            );
        }
        let certified = first.iter().any(|dim| {
            let affine = dim.as_ref().expect("checked affine above");
            let coeff = affine.terms.get(&var).copied().unwrap_or(0);
            coeff != 0
                && affine
                    .terms
                    .keys()
                    .all(|sym| sym == &var || !varying.contains(sym))
        });
        if !certified {
            return LoopAnalysis::rejected(
                id,
                RejectReason::LoopCarriedDependence,
                format!(
                    "array `{name}`: no subscript dimension isolates `{var}` with a nonzero \
                     constant coefficient"
                ),
            );
        }
    }

    // Reduction variables must not leak into any subscript (would have made
    // them non-reduction accesses already, but subscript reads are scalar
    // reads and are caught here).
    for name in reductions.keys() {
        let all_in_reduction = facts.scalars[name]
            .iter()
            .all(|a| a.reduction_op.is_some());
        if !all_in_reduction {
            return LoopAnalysis::rejected(
                id,
                RejectReason::LoopCarriedDependence,
                format!("`{name}` is used outside its reduction statements"),
            );
        }
    }

    LoopAnalysis {
        loop_id: id,
        classification: Classification::Parallelizable,
        reject_reason: None,
        private_vars: private_vars.into_iter().collect(),
        reduction_clauses: reductions.into_iter().map(|(n, op)| (op, n)).collect(),
        notes,
    }
}
