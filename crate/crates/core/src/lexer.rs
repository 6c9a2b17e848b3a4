//! Masking lexer. Blanks out comments, string and character literals and
//! preprocessor lines so that structural scans over the result only ever see
//! real code tokens and delimiters. Newlines survive masking so byte offsets
//! and line numbers stay aligned with the original text.
//!
//! This is deliberately not a C parser: macros are not expanded and
//! preprocessor conditionals are not evaluated. A block comment opened inside
//! a preprocessor line and closed on a later line is the one known blind spot.

/// Masked view of a source text: same length, masked bytes become `b' '`.
pub struct Masked {
    pub bytes: Vec<u8>,
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Normal,
    LineComment,
    BlockComment,
    Str,
    Char,
    Preproc,
}

pub fn mask(content: &str) -> Masked {
    let src = content.as_bytes();
    let mut out = vec![0u8; src.len()];
    let mut state = State::Normal;
    // True until a non-whitespace byte is seen on the current line; a `#` in
    // that position starts a preprocessor line.
    let mut line_leading = true;
    let mut i = 0;

    while i < src.len() {
        let b = src[i];
        let next = src.get(i + 1).copied();
        match state {
            State::Normal => match b {
                b'/' if next == Some(b'*') => {
                    state = State::BlockComment;
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    i += 2;
                    continue;
                }
                b'/' if next == Some(b'/') => {
                    state = State::LineComment;
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    i += 2;
                    continue;
                }
                b'"' => {
                    state = State::Str;
                    out[i] = b' ';
                }
                b'\'' => {
                    state = State::Char;
                    out[i] = b' ';
                }
                b'#' if line_leading => {
                    state = State::Preproc;
                    out[i] = b' ';
                }
                _ => out[i] = b,
            },
            State::LineComment => {
                if b == b'\n' {
                    // Backslash continuation extends a line comment.
                    let continued = prev_code_byte(src, i) == Some(b'\\');
                    out[i] = b'\n';
                    if !continued {
                        state = State::Normal;
                    }
                    line_leading = true;
                    i += 1;
                    continue;
                }
                out[i] = b' ';
            }
            State::BlockComment => {
                if b == b'*' && next == Some(b'/') {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    state = State::Normal;
                    i += 2;
                    continue;
                }
                out[i] = if b == b'\n' { b'\n' } else { b' ' };
            }
            State::Str | State::Char => {
                let quote = if state == State::Str { b'"' } else { b'\'' };
                if b == b'\\' && next.is_some() {
                    out[i] = b' ';
                    out[i + 1] = if next == Some(b'\n') { b'\n' } else { b' ' };
                    i += 2;
                    continue;
                }
                if b == quote {
                    out[i] = b' ';
                    state = State::Normal;
                } else if b == b'\n' {
                    // Unterminated literal; recover at end of line.
                    out[i] = b'\n';
                    state = State::Normal;
                    line_leading = true;
                    i += 1;
                    continue;
                } else {
                    out[i] = b' ';
                }
            }
            State::Preproc => {
                if b == b'\n' {
                    let continued = prev_code_byte(src, i) == Some(b'\\');
                    out[i] = b'\n';
                    if !continued {
                        state = State::Normal;
                    }
                    line_leading = true;
                    i += 1;
                    continue;
                }
                out[i] = b' ';
            }
        }
        if b == b'\n' {
            line_leading = true;
        } else if !b.is_ascii_whitespace() {
            line_leading = false;
        }
        i += 1;
    }

    Masked { bytes: out }
}

/// Last byte before `i` that is not a carriage return or space (so that a
/// trailing `\` still continues a line ending in `\   \r\n` does not, which
/// matches compiler behavior for `\` directly before the newline only).
fn prev_code_byte(src: &[u8], i: usize) -> Option<u8> {
    if i == 0 {
        return None;
    }
    let b = src[i - 1];
    if b == b'\r' && i >= 2 {
        return Some(src[i - 2]);
    }
    Some(b)
}

pub fn is_ident_start(b: u8) -> bool {
    b == b'_' || b.is_ascii_alphabetic() || b >= 0x80
}

pub fn is_ident_byte(b: u8) -> bool {
    b == b'_' || b.is_ascii_alphanumeric() || b >= 0x80
}

/// Skip spaces, tabs, newlines and carriage returns.
pub fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

/// Whether `pos` starts the whole word `word` in `bytes`.
pub fn word_at(bytes: &[u8], pos: usize, word: &str) -> bool {
    let w = word.as_bytes();
    if pos + w.len() > bytes.len() || &bytes[pos..pos + w.len()] != w {
        return false;
    }
    let before_ok = pos == 0 || !is_ident_byte(bytes[pos - 1]);
    let after_ok = pos + w.len() == bytes.len() || !is_ident_byte(bytes[pos + w.len()]);
    before_ok && after_ok
}

/// All positions where `word` occurs as a whole word.
pub fn word_positions(bytes: &[u8], word: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let w = word.as_bytes();
    if w.is_empty() || bytes.len() < w.len() {
        return out;
    }
    for pos in 0..=bytes.len() - w.len() {
        if bytes[pos] == w[0] && word_at(bytes, pos, word) {
            out.push(pos);
        }
    }
    out
}

/// Position of the delimiter matching the opener at `open`, tracking nesting
/// of the same delimiter kind only. Returns `None` when unbalanced.
pub fn match_delim(bytes: &[u8], open: usize) -> Option<usize> {
    let (o, c) = match bytes[open] {
        b'(' => (b'(', b')'),
        b'[' => (b'[', b']'),
        b'{' => (b'{', b'}'),
        _ => return None,
    };
    let mut depth = 0usize;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if b == o {
            depth += 1;
        } else if b == c {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

/// Check that `(`/`[`/`{` all pair up. On failure returns the byte offset and
/// the offending delimiter.
pub fn check_balanced(bytes: &[u8]) -> Result<(), (usize, char)> {
    let mut stack: Vec<(usize, u8)> = Vec::new();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'(' | b'[' | b'{' => stack.push((i, b)),
            b')' | b']' | b'}' => {
                let expected = match b {
                    b')' => b'(',
                    b']' => b'[',
                    _ => b'{',
                };
                match stack.pop() {
                    Some((_, open)) if open == expected => {}
                    _ => return Err((i, b as char)),
                }
            }
            _ => {}
        }
    }
    if let Some(&(i, b)) = stack.last() {
        return Err((i, b as char));
    }
    Ok(())
}

/// A token over masked bytes. Slices borrow from the original text, which is
/// byte-identical to the masked view wherever tokens survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tok<'a> {
    Ident(&'a str),
    Num(&'a str),
    Punct(&'a str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub tok: Tok<'a>,
    pub pos: usize,
}

impl<'a> Token<'a> {
    pub fn ident(&self) -> Option<&'a str> {
        match self.tok {
            Tok::Ident(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_punct(&self, p: &str) -> bool {
        matches!(self.tok, Tok::Punct(s) if s == p)
    }
}

const PUNCT3: &[&str] = &["<<=", ">>=", "..."];
const PUNCT2: &[&str] = &[
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=",
    "%=", "&=", "^=", "|=",
];

/// Tokenize a masked region `[start, end)`. `original` must be the text the
/// mask was derived from.
pub fn tokenize<'a>(masked: &[u8], original: &'a str, start: usize, end: usize) -> Vec<Token<'a>> {
    let mut out = Vec::new();
    let mut i = start;
    while i < end {
        let b = masked[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if is_ident_start(b) {
            let mut j = i + 1;
            while j < end && is_ident_byte(masked[j]) {
                j += 1;
            }
            out.push(Token {
                tok: Tok::Ident(&original[i..j]),
                pos: i,
            });
            i = j;
            continue;
        }
        if b.is_ascii_digit() || (b == b'.' && i + 1 < end && masked[i + 1].is_ascii_digit()) {
            // pp-number: digits, ident bytes, '.', and exponent signs.
            let mut j = i + 1;
            while j < end {
                let c = masked[j];
                if is_ident_byte(c) || c == b'.' {
                    j += 1;
                } else if (c == b'+' || c == b'-')
                    && matches!(masked[j - 1], b'e' | b'E' | b'p' | b'P')
                {
                    j += 1;
                } else {
                    break;
                }
            }
            out.push(Token {
                tok: Tok::Num(&original[i..j]),
                pos: i,
            });
            i = j;
            continue;
        }
        let rest = end - i;
        let mut matched = false;
        if rest >= 3 {
            let s = &original[i..i + 3];
            if PUNCT3.contains(&s) {
                out.push(Token {
                    tok: Tok::Punct(s),
                    pos: i,
                });
                i += 3;
                matched = true;
            }
        }
        if !matched && rest >= 2 {
            let s = &original[i..i + 2];
            if PUNCT2.contains(&s) {
                out.push(Token {
                    tok: Tok::Punct(s),
                    pos: i,
                });
                i += 2;
                matched = true;
            }
        }
        if !matched {
            out.push(Token {
                tok: Tok::Punct(&original[i..i + 1]),
                pos: i,
            });
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masked_str(src: &str) -> String {
        String::from_utf8(mask(src).bytes).unwrap()
    }

    #[test]
    fn masks_comments_strings_and_preproc() {
        let src = "#include <stdio.h>\nint x = 1; /* for */ // while\nchar *s = \"do {\";\n";
        let m = masked_str(src);
        assert_eq!(m.len(), src.len());
        assert!(!m.contains("for"));
        assert!(!m.contains("while"));
        assert!(!m.contains("do {"));
        assert!(!m.contains("include"));
        assert!(m.contains("int x = 1;"));
        assert_eq!(m.matches('\n').count(), src.matches('\n').count());
    }

    #[test]
    fn keeps_newlines_inside_block_comments() {
        let src = "a /* one\ntwo\nthree */ b";
        let m = masked_str(src);
        assert_eq!(m.matches('\n').count(), 2);
        assert!(m.contains('a') && m.contains('b'));
        assert!(!m.contains("two"));
    }

    #[test]
    fn masks_preproc_continuation_lines() {
        let src = "#define LOOP(n) \\\n  for (i = 0; i < n; i++)\nint y;\n";
        let m = masked_str(src);
        assert!(!m.contains("for"));
        assert!(m.contains("int y;"));
    }

    #[test]
    fn escaped_quotes_do_not_end_literals() {
        let src = r#"x = "a\"for\""; y = '\'';"#;
        let m = masked_str(src);
        assert!(!m.contains("for"));
        assert!(m.contains("x ="));
        assert!(m.contains("y ="));
    }

    #[test]
    fn word_positions_respect_boundaries() {
        let src = "forward for (fortran) for";
        let m = mask(src);
        let hits = word_positions(&m.bytes, "for");
        assert_eq!(hits, vec![8, 22]);
    }

    #[test]
    fn match_delim_nests() {
        let src = "(a(b)c[d])e";
        let m = mask(src);
        assert_eq!(match_delim(&m.bytes, 0), Some(9));
        assert_eq!(match_delim(&m.bytes, 2), Some(4));
    }

    #[test]
    fn check_balanced_reports_offender() {
        let m = mask("int f() { if (x) { }");
        let err = check_balanced(&m.bytes).unwrap_err();
        assert_eq!(err, (8, '{'));
        assert!(check_balanced(&mask("f(a[1]) { }").bytes).is_ok());
    }

    #[test]
    fn tokenizer_applies_maximal_munch() {
        let src = "i<<=2; a->b; x<=y; n!=m";
        let m = mask(src);
        let toks = tokenize(&m.bytes, src, 0, src.len());
        let puncts: Vec<&str> = toks
            .iter()
            .filter_map(|t| match t.tok {
                Tok::Punct(p) => Some(p),
                _ => None,
            })
            .collect();
        assert!(puncts.contains(&"<<="));
        assert!(puncts.contains(&"->"));
        assert!(puncts.contains(&"<="));
        assert!(puncts.contains(&"!="));
    }

    #[test]
    fn tokenizer_reads_numbers_and_idents() {
        let src = "a1 = 0x1fULL + 1.5e-3;";
        let m = mask(src);
        let toks = tokenize(&m.bytes, src, 0, src.len());
        assert_eq!(toks[0].tok, Tok::Ident("a1"));
        assert_eq!(toks[2].tok, Tok::Num("0x1fULL"));
        assert_eq!(toks[4].tok, Tok::Num("1.5e-3"));
    }
}
