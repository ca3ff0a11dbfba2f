//! Checker for a C statement subset, structured like a classic front end: the
//! whole input is tokenized first, then parsed statement by statement. Syntax
//! errors are reported and the parser resynchronises on the next `;` or `}`.

use super::{Stop, Verdict, MAX_DEPTH};
use crate::trace::Tracer;

#[derive(Clone, Copy)]
#[repr(u32)]
enum Loc {
    Entry = 1,
    LexWs,
    LexNewline,
    LexIdent,
    LexIdentChar,
    LexKeyword,
    LexNumber,
    LexDigit,
    LexHex,
    LexString,
    LexStringChar,
    LexCharLit,
    LexLineComment,
    LexBlockComment,
    LexCommentChar,
    LexPreproc,
    LexPunct,
    LexPunct2,
    LexInvalid,
    LexUnterminated,
    Stmt,
    StmtEmpty,
    Block,
    BlockEnd,
    If,
    Else,
    While,
    For,
    ForClause,
    Do,
    Return,
    Jump,
    Decl,
    DeclPointer,
    DeclArray,
    DeclInit,
    DeclList,
    FuncDef,
    Param,
    ExprStmt,
    Assign,
    Ternary,
    Binary,
    Unary,
    Postfix,
    Call,
    Arg,
    Index,
    Member,
    Sizeof,
    Ident,
    Number,
    Str,
    Char,
    Paren,
    ErrExpect,
    ErrPrimary,
    ErrDepth,
    ErrStray,
    Recover,
    RecoverSkip,
    Accept,
    Reject,
    Fault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tok<'a> {
    Ident(&'a [u8]),
    Keyword(&'a [u8]),
    Number,
    Str,
    Char,
    Punct(&'a [u8]),
}

const KEYWORDS: &[&[u8]] = &[
    b"if", b"else", b"while", b"for", b"do", b"return", b"break", b"continue", b"int", b"char",
    b"void", b"long", b"short", b"unsigned", b"signed", b"const", b"static", b"struct", b"sizeof",
];

const TYPE_WORDS: &[&[u8]] = &[
    b"int", b"char", b"void", b"long", b"short", b"unsigned", b"signed", b"const", b"static", b"struct",
];

const PUNCT2: &[&[u8]] = &[
    b"==", b"!=", b"<=", b">=", b"&&", b"||", b"++", b"--", b"->", b"+=", b"-=", b"*=", b"/=", b"<<", b">>",
];

const PUNCT1: &[u8] = b"(){}[];,=+-*/%<>!&|^~?:.";

/// Tokenizes the whole input; returns the tokens and the number of lexical errors.
fn lex<'a>(src: &'a [u8], t: &mut Tracer) -> (Vec<Tok<'a>>, usize) {
    let hit = |t: &mut Tracer, l: Loc| t.hit(l as u32);
    let mut toks = Vec::new();
    let mut errors = 0;
    let mut i = 0;
    let mut line_start = true;
    while i < src.len() {
        let c = src[i];
        match c {
            b'\n' => {
                hit(t, Loc::LexNewline);
                line_start = true;
                i += 1;
                continue;
            }
            b' ' | b'\t' | b'\r' | 0x0b | 0x0c => {
                hit(t, Loc::LexWs);
                i += 1;
                continue;
            }
            b'#' if line_start => {
                hit(t, Loc::LexPreproc);
                while i < src.len() && src[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            _ => {}
        }
        line_start = false;
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < src.len() && (src[i].is_ascii_alphanumeric() || src[i] == b'_') {
                hit(t, Loc::LexIdentChar);
                i += 1;
            }
            let word = &src[start..i];
            if KEYWORDS.contains(&word) {
                hit(t, Loc::LexKeyword);
                toks.push(Tok::Keyword(word));
            } else {
                hit(t, Loc::LexIdent);
                toks.push(Tok::Ident(word));
            }
        } else if c.is_ascii_digit() {
            hit(t, Loc::LexNumber);
            if c == b'0' && matches!(src.get(i + 1), Some(b'x' | b'X')) {
                hit(t, Loc::LexHex);
                i += 2;
                while i < src.len() && src[i].is_ascii_hexdigit() {
                    hit(t, Loc::LexDigit);
                    i += 1;
                }
            } else {
                while i < src.len() && src[i].is_ascii_digit() {
                    hit(t, Loc::LexDigit);
                    i += 1;
                }
            }
            toks.push(Tok::Number);
        } else if c == b'"' || c == b'\'' {
            hit(t, if c == b'"' { Loc::LexString } else { Loc::LexCharLit });
            i += 1;
            let mut closed = false;
            while i < src.len() && src[i] != b'\n' {
                if src[i] == b'\\' {
                    i += 2;
                    continue;
                }
                if src[i] == c {
                    closed = true;
                    i += 1;
                    break;
                }
                hit(t, Loc::LexStringChar);
                i += 1;
            }
            if closed {
                toks.push(if c == b'"' { Tok::Str } else { Tok::Char });
            } else {
                hit(t, Loc::LexUnterminated);
                errors += 1;
            }
        } else if src[i..].starts_with(b"//") {
            hit(t, Loc::LexLineComment);
            while i < src.len() && src[i] != b'\n' {
                i += 1;
            }
        } else if src[i..].starts_with(b"/*") {
            hit(t, Loc::LexBlockComment);
            i += 2;
            loop {
                if i >= src.len() {
                    hit(t, Loc::LexUnterminated);
                    errors += 1;
                    break;
                }
                if src[i..].starts_with(b"*/") {
                    i += 2;
                    break;
                }
                hit(t, Loc::LexCommentChar);
                i += 1;
            }
        } else if let Some(p) = PUNCT2.iter().find(|p| src[i..].starts_with(p)) {
            hit(t, Loc::LexPunct2);
            toks.push(Tok::Punct(p));
            i += 2;
        } else if PUNCT1.contains(&c) {
            hit(t, Loc::LexPunct);
            toks.push(Tok::Punct(&src[i..i + 1]));
            i += 1;
        } else {
            hit(t, Loc::LexInvalid);
            errors += 1;
            i += 1;
        }
    }
    (toks, errors)
}

struct Parser<'a, 't> {
    toks: Vec<Tok<'a>>,
    pos: usize,
    depth: usize,
    t: &'t mut Tracer,
}

type PResult<T> = Result<T, Stop>;

const BINARY_LEVELS: &[&[&[u8]]] = &[
    &[b"||"],
    &[b"&&"],
    &[b"|"],
    &[b"^"],
    &[b"&"],
    &[b"==", b"!="],
    &[b"<", b">", b"<=", b">="],
    &[b"<<", b">>"],
    &[b"+", b"-"],
    &[b"*", b"/", b"%"],
];

impl<'a> Parser<'a, '_> {
    fn hit(&mut self, l: Loc) {
        self.t.hit(l as u32);
    }

    fn peek(&self) -> Option<Tok<'a>> {
        self.toks.get(self.pos).copied()
    }

    fn peek_at(&self, off: usize) -> Option<Tok<'a>> {
        self.toks.get(self.pos + off).copied()
    }

    fn is_punct(&self, p: &[u8]) -> bool {
        matches!(self.peek(), Some(Tok::Punct(q)) if q == p)
    }

    fn eat_punct(&mut self, p: &[u8]) -> bool {
        if self.is_punct(p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn is_keyword(&self, k: &[u8]) -> bool {
        matches!(self.peek(), Some(Tok::Keyword(w)) if w == k)
    }

    fn expect(&mut self, p: &[u8], why: &'static str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.hit(Loc::ErrExpect);
            Err(Stop::Syntax(why))
        }
    }

    fn enter(&mut self) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            self.hit(Loc::ErrDepth);
            return Err(Stop::Syntax("nesting too deep"));
        }
        Ok(())
    }

    fn leave(&mut self) {
        self.depth -= 1;
    }

    /// Skips to just after the next `;`, or up to (not including) the next `}`.
    fn recover(&mut self) {
        self.hit(Loc::Recover);
        while let Some(tok) = self.peek() {
            match tok {
                Tok::Punct(b";") => {
                    self.pos += 1;
                    return;
                }
                Tok::Punct(b"}") => return,
                _ => {
                    self.hit(Loc::RecoverSkip);
                    self.pos += 1;
                }
            }
        }
    }

    /// Parses statements until `}` (when `in_block`) or end of input; returns the error count.
    fn statements(&mut self, in_block: bool) -> PResult<usize> {
        let mut errors = 0;
        loop {
            match self.peek() {
                None => return Ok(errors),
                Some(Tok::Punct(b"}")) if in_block => return Ok(errors),
                Some(Tok::Punct(b"}")) => {
                    self.hit(Loc::ErrStray);
                    errors += 1;
                    self.pos += 1;
                }
                Some(_) => {
                    let depth = self.depth;
                    match self.statement() {
                        Ok(e) => errors += e,
                        Err(Stop::Syntax(_)) => {
                            self.depth = depth;
                            errors += 1;
                            self.recover();
                        }
                        Err(fault) => return Err(fault),
                    }
                }
            }
        }
    }

    fn statement(&mut self) -> PResult<usize> {
        self.hit(Loc::Stmt);
        self.enter()?;
        let errors = self.statement_inner()?;
        self.leave();
        Ok(errors)
    }

    fn statement_inner(&mut self) -> PResult<usize> {
        match self.peek() {
            Some(Tok::Punct(b";")) => {
                self.hit(Loc::StmtEmpty);
                self.pos += 1;
                Ok(0)
            }
            Some(Tok::Punct(b"{")) => self.block(),
            Some(Tok::Punct(b"(")) if self.peek_at(1) == Some(Tok::Punct(b")")) => {
                self.hit(Loc::Fault);
                Err(Stop::Fault("empty expression node dereferenced"))
            }
            Some(Tok::Keyword(w)) => match w {
                b"if" => {
                    self.hit(Loc::If);
                    self.pos += 1;
                    self.paren_expr()?;
                    let mut errors = self.statement()?;
                    if self.is_keyword(b"else") {
                        self.hit(Loc::Else);
                        self.pos += 1;
                        errors += self.statement()?;
                    }
                    Ok(errors)
                }
                b"while" => {
                    self.hit(Loc::While);
                    self.pos += 1;
                    self.paren_expr()?;
                    self.statement()
                }
                b"do" => {
                    self.hit(Loc::Do);
                    self.pos += 1;
                    let errors = self.statement()?;
                    if !self.is_keyword(b"while") {
                        self.hit(Loc::ErrExpect);
                        return Err(Stop::Syntax("expected 'while'"));
                    }
                    self.pos += 1;
                    self.paren_expr()?;
                    self.expect(b";", "expected ';' after do-while")?;
                    Ok(errors)
                }
                b"for" => {
                    self.hit(Loc::For);
                    self.pos += 1;
                    self.expect(b"(", "expected '(' after for")?;
                    for (i, end) in [&b";"[..], b";", b")"].into_iter().enumerate() {
                        if !self.is_punct(end) {
                            self.hit(Loc::ForClause);
                            if i == 0 && self.is_type_start() {
                                self.declaration_tail()?;
                                continue;
                            }
                            self.expr()?;
                        }
                        self.expect(end, "malformed for clause")?;
                    }
                    self.statement()
                }
                b"return" => {
                    self.hit(Loc::Return);
                    self.pos += 1;
                    if !self.is_punct(b";") {
                        self.expr()?;
                    }
                    self.expect(b";", "expected ';' after return")?;
                    Ok(0)
                }
                b"break" | b"continue" => {
                    self.hit(Loc::Jump);
                    self.pos += 1;
                    self.expect(b";", "expected ';'")?;
                    Ok(0)
                }
                _ if self.is_type_start() => self.declaration(),
                _ => self.expression_statement(),
            },
            _ => self.expression_statement(),
        }
    }

    fn block(&mut self) -> PResult<usize> {
        self.hit(Loc::Block);
        self.pos += 1;
        let errors = self.statements(true)?;
        if self.eat_punct(b"}") {
            self.hit(Loc::BlockEnd);
            Ok(errors)
        } else {
            self.hit(Loc::ErrExpect);
            Err(Stop::Syntax("unclosed block"))
        }
    }

    fn is_type_start(&self) -> bool {
        matches!(self.peek(), Some(Tok::Keyword(w)) if TYPE_WORDS.contains(&w))
    }

    fn type_words(&mut self) {
        while let Some(Tok::Keyword(w)) = self.peek() {
            if !TYPE_WORDS.contains(&w) {
                break;
            }
            self.pos += 1;
            if w == b"struct" {
                if let Some(Tok::Ident(_)) = self.peek() {
                    self.pos += 1;
                }
            }
        }
    }

    fn declarator(&mut self) -> PResult<()> {
        while self.eat_punct(b"*") {
            self.hit(Loc::DeclPointer);
        }
        match self.peek() {
            Some(Tok::Ident(_)) => {
                self.pos += 1;
            }
            _ => {
                self.hit(Loc::ErrExpect);
                return Err(Stop::Syntax("expected declarator name"));
            }
        }
        while self.eat_punct(b"[") {
            self.hit(Loc::DeclArray);
            if !self.is_punct(b"]") {
                self.expr()?;
            }
            self.expect(b"]", "expected ']'")?;
        }
        Ok(())
    }

    /// Type words and init-declarators up to and including `;`.
    fn declaration_tail(&mut self) -> PResult<()> {
        self.hit(Loc::Decl);
        self.type_words();
        loop {
            self.declarator()?;
            if self.eat_punct(b"=") {
                self.hit(Loc::DeclInit);
                self.assignment()?;
            }
            if self.eat_punct(b",") {
                self.hit(Loc::DeclList);
                continue;
            }
            return self.expect(b";", "expected ';' after declaration");
        }
    }

    fn declaration(&mut self) -> PResult<usize> {
        let start = self.pos;
        self.type_words();
        while self.eat_punct(b"*") {
            self.hit(Loc::DeclPointer);
        }
        if matches!(self.peek(), Some(Tok::Ident(_))) && self.peek_at(1) == Some(Tok::Punct(b"(")) {
            self.hit(Loc::FuncDef);
            self.pos += 2;
            if !self.is_punct(b")") {
                loop {
                    self.hit(Loc::Param);
                    if !self.is_type_start() {
                        self.hit(Loc::ErrExpect);
                        return Err(Stop::Syntax("expected parameter type"));
                    }
                    self.type_words();
                    if !self.is_punct(b",") && !self.is_punct(b")") {
                        self.declarator()?;
                    }
                    if !self.eat_punct(b",") {
                        break;
                    }
                }
            }
            self.expect(b")", "expected ')' after parameters")?;
            if self.eat_punct(b";") {
                return Ok(0);
            }
            if !self.is_punct(b"{") {
                self.hit(Loc::ErrExpect);
                return Err(Stop::Syntax("expected function body"));
            }
            return self.block();
        }
        self.pos = start;
        self.declaration_tail()?;
        Ok(0)
    }

    fn expression_statement(&mut self) -> PResult<usize> {
        self.hit(Loc::ExprStmt);
        self.expr()?;
        self.expect(b";", "expected ';' after expression")?;
        Ok(0)
    }

    fn paren_expr(&mut self) -> PResult<()> {
        self.expect(b"(", "expected '('")?;
        self.expr()?;
        self.expect(b")", "expected ')'")
    }

    fn expr(&mut self) -> PResult<()> {
        self.assignment()?;
        while self.eat_punct(b",") {
            self.assignment()?;
        }
        Ok(())
    }

    fn assignment(&mut self) -> PResult<()> {
        self.enter()?;
        self.conditional()?;
        if let Some(Tok::Punct(p)) = self.peek() {
            if matches!(p, b"=" | b"+=" | b"-=" | b"*=" | b"/=") {
                self.hit(Loc::Assign);
                self.pos += 1;
                self.assignment()?;
            }
        }
        self.leave();
        Ok(())
    }

    fn conditional(&mut self) -> PResult<()> {
        self.binary(0)?;
        if self.eat_punct(b"?") {
            self.hit(Loc::Ternary);
            self.expr()?;
            self.expect(b":", "expected ':' in conditional")?;
            self.conditional()?;
        }
        Ok(())
    }

    fn binary(&mut self, level: usize) -> PResult<()> {
        if level == BINARY_LEVELS.len() {
            return self.unary();
        }
        self.binary(level + 1)?;
        while let Some(Tok::Punct(p)) = self.peek() {
            if !BINARY_LEVELS[level].contains(&p) {
                break;
            }
            self.hit(Loc::Binary);
            self.pos += 1;
            self.binary(level + 1)?;
        }
        Ok(())
    }

    fn unary(&mut self) -> PResult<()> {
        self.enter()?;
        match self.peek() {
            Some(Tok::Punct(b"-" | b"+" | b"!" | b"~" | b"*" | b"&" | b"++" | b"--")) => {
                self.hit(Loc::Unary);
                self.pos += 1;
                self.unary()?;
            }
            Some(Tok::Keyword(b"sizeof")) => {
                self.hit(Loc::Sizeof);
                self.pos += 1;
                if self.is_punct(b"(") && matches!(self.peek_at(1), Some(Tok::Keyword(w)) if TYPE_WORDS.contains(&w)) {
                    self.pos += 1;
                    self.type_words();
                    while self.eat_punct(b"*") {}
                    self.expect(b")", "expected ')' after type")?;
                } else {
                    self.unary()?;
                }
            }
            _ => self.postfix()?,
        }
        self.leave();
        Ok(())
    }

    fn postfix(&mut self) -> PResult<()> {
        self.primary()?;
        loop {
            match self.peek() {
                Some(Tok::Punct(b"(")) => {
                    self.hit(Loc::Call);
                    self.pos += 1;
                    if !self.is_punct(b")") {
                        loop {
                            self.hit(Loc::Arg);
                            self.assignment()?;
                            if !self.eat_punct(b",") {
                                break;
                            }
                        }
                    }
                    self.expect(b")", "expected ')' after arguments")?;
                }
                Some(Tok::Punct(b"[")) => {
                    self.hit(Loc::Index);
                    self.pos += 1;
                    self.expr()?;
                    self.expect(b"]", "expected ']'")?;
                }
                Some(Tok::Punct(b"." | b"->")) => {
                    self.hit(Loc::Member);
                    self.pos += 1;
                    if !matches!(self.peek(), Some(Tok::Ident(_))) {
                        self.hit(Loc::ErrExpect);
                        return Err(Stop::Syntax("expected member name"));
                    }
                    self.pos += 1;
                }
                Some(Tok::Punct(b"++" | b"--")) => {
                    self.hit(Loc::Postfix);
                    self.pos += 1;
                }
                _ => return Ok(()),
            }
        }
    }

    fn primary(&mut self) -> PResult<()> {
        match self.peek() {
            Some(Tok::Ident(_)) => self.hit(Loc::Ident),
            Some(Tok::Number) => self.hit(Loc::Number),
            Some(Tok::Str) => self.hit(Loc::Str),
            Some(Tok::Char) => self.hit(Loc::Char),
            Some(Tok::Punct(b"(")) => {
                self.hit(Loc::Paren);
                self.pos += 1;
                self.expr()?;
                return self.expect(b")", "expected ')'");
            }
            _ => {
                self.hit(Loc::ErrPrimary);
                return Err(Stop::Syntax("expected expression"));
            }
        }
        self.pos += 1;
        Ok(())
    }
}

pub(super) fn run(input: &[u8], t: &mut Tracer) -> Verdict {
    t.hit(Loc::Entry as u32);
    let (toks, lex_errors) = lex(input, t);
    let mut p = Parser {
        toks,
        pos: 0,
        depth: 0,
        t,
    };
    match p.statements(false) {
        Err(Stop::Fault(why)) => Verdict::Fault(why),
        Err(Stop::Syntax(why)) => {
            p.hit(Loc::Reject);
            Verdict::Reject(why.to_string())
        }
        Ok(parse_errors) => {
            let errors = lex_errors + parse_errors;
            if errors == 0 && !input.is_empty() {
                p.hit(Loc::Accept);
                Verdict::Accept
            } else {
                p.hit(Loc::Reject);
                Verdict::Reject(format!("{lex_errors} lexical and {parse_errors} syntax errors"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(input: &[u8]) -> &'static str {
        let mut t = Tracer::new(1024).unwrap();
        match run(input, &mut t) {
            Verdict::Accept => "accept",
            Verdict::Reject(_) => "reject",
            Verdict::Fault(_) => "fault",
        }
    }

    #[test]
    fn accepts_valid_programs() {
        for src in [
            &b"x = 1;"[..],
            b"#include <stdio.h>\nint main(void) { int a[3], *p = &a[0]; for (int i = 0; i < 3; i++) { p[i] = i * 2; } return 0; }",
            b"/* c */ if (a == b) f(a, \"s\", 'c'); else { do { x--; } while (x > 0); } // tail",
            b"struct s *q; q->next = sizeof(int) + sizeof q; y = a ? b : c;",
            b";;",
        ] {
            assert_eq!(verdict(src), "accept", "{}", String::from_utf8_lossy(src));
        }
    }

    #[test]
    fn rejects_and_recovers() {
        for src in [
            &b""[..],
            b"x = ;",
            b"int ;",
            b"{ x = 1;",
            b"}",
            b"@",
            b"\"open",
            b"/* open",
            b"(;",
        ] {
            assert_eq!(verdict(src), "reject", "{}", String::from_utf8_lossy(src));
        }
    }

    #[test]
    fn fault_after_recovery() {
        assert_eq!(verdict(b"();"), "fault");
        assert_eq!(verdict(b"garbage here; ( ) ;"), "fault");
        assert_eq!(verdict(b"{ x = 1; ();}"), "fault");
        assert_eq!(verdict(b"f();"), "accept");
        assert_eq!(verdict(b"(x);"), "accept");
        assert_eq!(verdict(b"() x;"), "fault");
        assert_eq!(verdict(b"x = ();"), "reject");
    }

    #[test]
    fn deep_nesting_is_bounded() {
        let src = vec![b'('; 400];
        assert_eq!(verdict(&src), "reject");
        let src = vec![b'{'; 400];
        assert_eq!(verdict(&src), "reject");
    }
}
