//! JSON Lines validator: every non-blank line must hold exactly one JSON value.
//! A malformed line is reported and skipped, and validation resumes on the
//! next line.

use super::{Stop, Verdict, MAX_DEPTH};
use crate::trace::Tracer;

#[derive(Clone, Copy)]
#[repr(u32)]
enum Loc {
    Entry = 1,
    LineStart,
    BlankLine,
    Ws,
    Dispatch,
    ObjOpen,
    ObjEmpty,
    ObjKey,
    ObjColon,
    ObjComma,
    ObjClose,
    ObjBadKey,
    ObjBadSep,
    ArrOpen,
    ArrEmpty,
    ArrComma,
    ArrClose,
    ArrBadSep,
    StrOpen,
    StrChar,
    StrEscape,
    StrEscUnicode,
    StrHexDigit,
    StrClose,
    StrControl,
    StrBadEscape,
    StrUnterminated,
    NumMinus,
    NumZero,
    NumInt,
    NumDigit,
    NumFrac,
    NumFracDigit,
    NumExp,
    NumExpSign,
    NumExpDigit,
    NumBad,
    LitTrue,
    LitFalse,
    LitNull,
    LitBad,
    Unexpected,
    TooDeep,
    Trailing,
    LineOk,
    LineErr,
    SkipRest,
    NoDocument,
    Accept,
    Reject,
    Fault,
}

#[derive(PartialEq, Eq)]
enum Kind {
    Object,
    Array,
    Str,
    Number,
    Bool,
    Null,
}

struct Parser<'a, 't> {
    src: &'a [u8],
    pos: usize,
    t: &'t mut Tracer,
}

type PResult<T> = Result<T, Stop>;

impl Parser<'_, '_> {
    fn hit(&mut self, l: Loc) {
        self.t.hit(l as u32);
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn at_line_end(&self) -> bool {
        matches!(self.peek(), None | Some(b'\n'))
    }

    fn skip_ws(&mut self) {
        while let Some(b' ' | b'\t' | b'\r') = self.peek() {
            self.hit(Loc::Ws);
            self.pos += 1;
        }
    }

    fn expect_literal(&mut self, word: &[u8], loc: Loc) -> PResult<()> {
        self.hit(loc);
        if self.src[self.pos..].starts_with(word) {
            self.pos += word.len();
            Ok(())
        } else {
            self.hit(Loc::LitBad);
            Err(Stop::Syntax("invalid literal"))
        }
    }

    fn value(&mut self, depth: usize) -> PResult<Kind> {
        if depth > MAX_DEPTH {
            self.hit(Loc::TooDeep);
            return Err(Stop::Syntax("nesting too deep"));
        }
        self.hit(Loc::Dispatch);
        match self.peek() {
            Some(b'{') => self.object(depth),
            Some(b'[') => self.array(depth),
            Some(b'"') => self.string().map(|_| Kind::Str),
            Some(b'-' | b'0'..=b'9') => self.number(),
            Some(b't') => self.expect_literal(b"true", Loc::LitTrue).map(|_| Kind::Bool),
            Some(b'f') => self.expect_literal(b"false", Loc::LitFalse).map(|_| Kind::Bool),
            Some(b'n') => self.expect_literal(b"null", Loc::LitNull).map(|_| Kind::Null),
            _ => {
                self.hit(Loc::Unexpected);
                Err(Stop::Syntax("unexpected character"))
            }
        }
    }

    fn object(&mut self, depth: usize) -> PResult<Kind> {
        self.hit(Loc::ObjOpen);
        self.pos += 1;
        self.skip_ws();
        if self.peek() == Some(b'}') {
            self.hit(Loc::ObjEmpty);
            self.pos += 1;
            return Ok(Kind::Object);
        }
        loop {
            self.skip_ws();
            if self.peek() != Some(b'"') {
                self.hit(Loc::ObjBadKey);
                return Err(Stop::Syntax("expected object key"));
            }
            self.hit(Loc::ObjKey);
            let key_len = self.string()?;
            self.skip_ws();
            if self.peek() != Some(b':') {
                self.hit(Loc::ObjBadSep);
                return Err(Stop::Syntax("expected ':'"));
            }
            self.hit(Loc::ObjColon);
            self.pos += 1;
            self.skip_ws();
            let kind = self.value(depth + 1)?;
            if key_len == 0 && kind == Kind::Null {
                self.hit(Loc::Fault);
                return Err(Stop::Fault("lookup of empty key bound to null"));
            }
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.hit(Loc::ObjComma);
                    self.pos += 1;
                }
                Some(b'}') => {
                    self.hit(Loc::ObjClose);
                    self.pos += 1;
                    return Ok(Kind::Object);
                }
                _ => {
                    self.hit(Loc::ObjBadSep);
                    return Err(Stop::Syntax("expected ',' or '}'"));
                }
            }
        }
    }

    fn array(&mut self, depth: usize) -> PResult<Kind> {
        self.hit(Loc::ArrOpen);
        self.pos += 1;
        self.skip_ws();
        if self.peek() == Some(b']') {
            self.hit(Loc::ArrEmpty);
            self.pos += 1;
            return Ok(Kind::Array);
        }
        loop {
            self.skip_ws();
            self.value(depth + 1)?;
            self.skip_ws();
            match self.peek() {
                Some(b',') => {
                    self.hit(Loc::ArrComma);
                    self.pos += 1;
                }
                Some(b']') => {
                    self.hit(Loc::ArrClose);
                    self.pos += 1;
                    return Ok(Kind::Array);
                }
                _ => {
                    self.hit(Loc::ArrBadSep);
                    return Err(Stop::Syntax("expected ',' or ']'"));
                }
            }
        }
    }

    /// Parses a string literal and returns its raw content length.
    fn string(&mut self) -> PResult<usize> {
        self.hit(Loc::StrOpen);
        self.pos += 1;
        let start = self.pos;
        loop {
            match self.peek() {
                None | Some(b'\n') => {
                    self.hit(Loc::StrUnterminated);
                    return Err(Stop::Syntax("unterminated string"));
                }
                Some(b'"') => {
                    self.hit(Loc::StrClose);
                    let len = self.pos - start;
                    self.pos += 1;
                    return Ok(len);
                }
                Some(b'\\') => {
                    self.hit(Loc::StrEscape);
                    self.pos += 1;
                    match self.peek() {
                        Some(b'"' | b'\\' | b'/' | b'b' | b'f' | b'n' | b'r' | b't') => self.pos += 1,
                        Some(b'u') => {
                            self.hit(Loc::StrEscUnicode);
                            self.pos += 1;
                            for _ in 0..4 {
                                match self.peek() {
                                    Some(c) if c.is_ascii_hexdigit() => {
                                        self.hit(Loc::StrHexDigit);
                                        self.pos += 1;
                                    }
                                    _ => {
                                        self.hit(Loc::StrBadEscape);
                                        return Err(Stop::Syntax("bad unicode escape"));
                                    }
                                }
                            }
                        }
                        _ => {
                            self.hit(Loc::StrBadEscape);
                            return Err(Stop::Syntax("bad escape"));
                        }
                    }
                }
                Some(c) if c < 0x20 => {
                    self.hit(Loc::StrControl);
                    return Err(Stop::Syntax("control character in string"));
                }
                Some(_) => {
                    self.hit(Loc::StrChar);
                    self.pos += 1;
                }
            }
        }
    }

    fn digits(&mut self, loc: Loc) -> usize {
        let mut n = 0;
        while let Some(b'0'..=b'9') = self.peek() {
            self.hit(loc);
            self.pos += 1;
            n += 1;
        }
        n
    }

    fn number(&mut self) -> PResult<Kind> {
        if self.peek() == Some(b'-') {
            self.hit(Loc::NumMinus);
            self.pos += 1;
        }
        match self.peek() {
            Some(b'0') => {
                self.hit(Loc::NumZero);
                self.pos += 1;
            }
            Some(b'1'..=b'9') => {
                self.hit(Loc::NumInt);
                self.digits(Loc::NumDigit);
            }
            _ => {
                self.hit(Loc::NumBad);
                return Err(Stop::Syntax("expected digit"));
            }
        }
        if self.peek() == Some(b'.') {
            self.hit(Loc::NumFrac);
            self.pos += 1;
            if self.digits(Loc::NumFracDigit) == 0 {
                self.hit(Loc::NumBad);
                return Err(Stop::Syntax("expected fraction digits"));
            }
        }
        if let Some(b'e' | b'E') = self.peek() {
            self.hit(Loc::NumExp);
            self.pos += 1;
            if let Some(b'+' | b'-') = self.peek() {
                self.hit(Loc::NumExpSign);
                self.pos += 1;
            }
            if self.digits(Loc::NumExpDigit) == 0 {
                self.hit(Loc::NumBad);
                return Err(Stop::Syntax("expected exponent digits"));
            }
        }
        Ok(Kind::Number)
    }

    fn skip_line(&mut self) {
        self.hit(Loc::SkipRest);
        while !self.at_line_end() {
            self.pos += 1;
        }
    }
}

pub(super) fn run(input: &[u8], t: &mut Tracer) -> Verdict {
    let mut p = Parser { src: input, pos: 0, t };
    p.hit(Loc::Entry);
    let mut documents = 0usize;
    let mut first_error: Option<&'static str> = None;
    loop {
        if p.pos >= input.len() {
            break;
        }
        p.hit(Loc::LineStart);
        p.skip_ws();
        if p.at_line_end() {
            p.hit(Loc::BlankLine);
        } else {
            let parsed = p.value(0).and_then(|_| {
                p.skip_ws();
                if p.at_line_end() {
                    Ok(())
                } else {
                    p.hit(Loc::Trailing);
                    Err(Stop::Syntax("trailing characters"))
                }
            });
            match parsed {
                Ok(()) => {
                    p.hit(Loc::LineOk);
                    documents += 1;
                }
                Err(Stop::Syntax(why)) => {
                    p.hit(Loc::LineErr);
                    first_error.get_or_insert(why);
                    p.skip_line();
                }
                Err(Stop::Fault(why)) => return Verdict::Fault(why),
            }
        }
        if p.peek() == Some(b'\n') {
            p.pos += 1;
        }
    }
    match first_error {
        Some(why) => {
            p.hit(Loc::Reject);
            Verdict::Reject(why.to_string())
        }
        None if documents == 0 => {
            p.hit(Loc::NoDocument);
            Verdict::Reject("no document".to_string())
        }
        None => {
            p.hit(Loc::Accept);
            Verdict::Accept
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
    fn accepts_valid_documents() {
        for doc in [
            &b"{}"[..],
            b"[]",
            b"  {\"a\" : [1, -2.5e+3, true, false, null, \"x\\u00e9\\n\"]}  ",
            b"1\n\"two\"\n\n[3]\n",
            b"0",
            b"{\"\":1}",
            b"{\"k\":null}",
        ] {
            assert_eq!(verdict(doc), "accept", "{}", String::from_utf8_lossy(doc));
        }
    }

    #[test]
    fn rejects_malformed_documents() {
        for doc in [
            &b""[..],
            b"\n\n",
            b"{",
            b"[1,]",
            b"01",
            b"1.",
            b"-",
            b"tru",
            b"\"abc",
            b"\"a\x01\"",
            b"\"\\x\"",
            b"{\"a\" 1}",
            b"{} x",
            b"{}\n{",
        ] {
            assert_eq!(verdict(doc), "reject", "{}", String::from_utf8_lossy(doc));
        }
    }

    #[test]
    fn fault_needs_empty_key_and_null() {
        assert_eq!(verdict(b"{\"\":null}"), "fault");
        assert_eq!(verdict(b"[{\"a\":1, \"\" : null}]"), "fault");
        assert_eq!(verdict(b"bad\n{\"\":null}"), "fault");
        assert_eq!(verdict(b"{\"\":nul}"), "reject");
        assert_eq!(verdict(b"{\" \":null}"), "accept");
    }

    #[test]
    fn depth_limit_rejects() {
        let deep = [b'['; 100];
        assert_eq!(verdict(&deep), "reject");
    }
}
