//! Well-formedness checker for a small XML subset: elements, attributes,
//! character and entity references, comments, processing instructions and
//! CDATA sections. Parsing stops at the first fatal error.

use super::{Stop, Verdict, MAX_DEPTH};
use crate::trace::Tracer;

#[derive(Clone, Copy)]
#[repr(u32)]
enum Loc {
    Entry = 1,
    Ws,
    XmlDecl,
    Misc,
    PiOpen,
    PiTarget,
    PiChar,
    PiClose,
    CommentOpen,
    CommentChar,
    CommentClose,
    CdataOpen,
    CdataChar,
    CdataClose,
    TagOpen,
    NameStart,
    NameChar,
    AttrStart,
    AttrEq,
    AttrQuote,
    AttrChar,
    AttrClose,
    SelfClose,
    TagClose,
    Content,
    Text,
    RefStart,
    RefNamed,
    RefChar,
    RefHex,
    RefDigit,
    RefEnd,
    EndTag,
    EndTagMatch,
    Nested,
    ErrName,
    ErrAttr,
    ErrRef,
    ErrMismatch,
    ErrEof,
    ErrJunk,
    ErrDepth,
    Trailing,
    Accept,
    Reject,
    Fault,
}

struct Parser<'a, 't> {
    src: &'a [u8],
    pos: usize,
    t: &'t mut Tracer,
}

type PResult<T> = Result<T, Stop>;

fn is_name_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b':'
}

fn is_name_char(c: u8) -> bool {
    is_name_start(c) || c.is_ascii_digit() || c == b'-' || c == b'.'
}

impl<'a> Parser<'a, '_> {
    fn hit(&mut self, l: Loc) {
        self.t.hit(l as u32);
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn rest(&self) -> &'a [u8] {
        &self.src[self.pos..]
    }

    fn eat(&mut self, lit: &[u8]) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn err(&mut self, l: Loc, why: &'static str) -> Stop {
        self.hit(l);
        Stop::Syntax(why)
    }

    fn skip_ws(&mut self) -> usize {
        let mut n = 0;
        while let Some(b' ' | b'\t' | b'\r' | b'\n') = self.peek() {
            self.hit(Loc::Ws);
            self.pos += 1;
            n += 1;
        }
        n
    }

    fn name(&mut self) -> PResult<&'a [u8]> {
        let start = self.pos;
        match self.peek() {
            Some(c) if is_name_start(c) => {
                self.hit(Loc::NameStart);
                self.pos += 1;
            }
            _ => return Err(self.err(Loc::ErrName, "expected a name")),
        }
        while let Some(c) = self.peek() {
            if !is_name_char(c) {
                break;
            }
            self.hit(Loc::NameChar);
            self.pos += 1;
        }
        Ok(&self.src[start..self.pos])
    }

    /// Consumes characters until `terminator`, hitting `loc` once per character.
    fn until(&mut self, terminator: &[u8], loc: Loc, close: Loc) -> PResult<()> {
        loop {
            if self.eat(terminator) {
                self.hit(close);
                return Ok(());
            }
            if self.peek().is_none() {
                return Err(self.err(Loc::ErrEof, "unterminated construct"));
            }
            self.hit(loc);
            self.pos += 1;
        }
    }

    fn pi(&mut self) -> PResult<()> {
        self.hit(Loc::PiOpen);
        let target = self.name()?;
        self.hit(Loc::PiTarget);
        if target.eq_ignore_ascii_case(b"xml") {
            return Err(self.err(Loc::ErrJunk, "reserved processing instruction target"));
        }
        self.until(b"?>", Loc::PiChar, Loc::PiClose)
    }

    fn misc(&mut self) -> PResult<bool> {
        self.skip_ws();
        if self.eat(b"<!--") {
            self.hit(Loc::CommentOpen);
            self.until(b"-->", Loc::CommentChar, Loc::CommentClose)?;
            Ok(true)
        } else if self.eat(b"<?") {
            self.pi()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn reference(&mut self) -> PResult<()> {
        self.hit(Loc::RefStart);
        self.pos += 1;
        if self.eat(b"#x") {
            self.hit(Loc::RefHex);
            let mut n = 0;
            while self.peek().is_some_and(|c| c.is_ascii_hexdigit()) {
                self.hit(Loc::RefDigit);
                self.pos += 1;
                n += 1;
            }
            if n == 0 {
                return Err(self.err(Loc::ErrRef, "empty hex reference"));
            }
        } else if self.eat(b"#") {
            self.hit(Loc::RefChar);
            let mut n = 0;
            while let Some(b'0'..=b'9') = self.peek() {
                self.hit(Loc::RefDigit);
                self.pos += 1;
                n += 1;
            }
            if n == 0 {
                return Err(self.err(Loc::ErrRef, "empty character reference"));
            }
        } else {
            let name = self.name()?;
            if !matches!(name, b"amp" | b"lt" | b"gt" | b"quot" | b"apos") {
                return Err(self.err(Loc::ErrRef, "undefined entity"));
            }
            self.hit(Loc::RefNamed);
        }
        if self.peek() != Some(b';') {
            return Err(self.err(Loc::ErrRef, "expected ';'"));
        }
        self.hit(Loc::RefEnd);
        self.pos += 1;
        Ok(())
    }

    fn attribute_value(&mut self) -> PResult<()> {
        let quote = match self.peek() {
            Some(q @ (b'"' | b'\'')) => q,
            _ => return Err(self.err(Loc::ErrAttr, "expected quoted attribute value")),
        };
        self.hit(Loc::AttrQuote);
        self.pos += 1;
        loop {
            match self.peek() {
                None => return Err(self.err(Loc::ErrEof, "unterminated attribute value")),
                Some(b'<') => return Err(self.err(Loc::ErrAttr, "'<' in attribute value")),
                Some(b'&') => self.reference()?,
                Some(c) if c == quote => {
                    self.hit(Loc::AttrClose);
                    self.pos += 1;
                    return Ok(());
                }
                Some(_) => {
                    self.hit(Loc::AttrChar);
                    self.pos += 1;
                }
            }
        }
    }

    /// Parses an element whose `<` has already been consumed.
    fn element(&mut self, depth: usize) -> PResult<()> {
        if depth > MAX_DEPTH {
            return Err(self.err(Loc::ErrDepth, "nesting too deep"));
        }
        self.hit(Loc::TagOpen);
        if depth > 0 && self.peek() == Some(b':') {
            self.hit(Loc::Fault);
            return Err(Stop::Fault("namespace lookup with empty prefix"));
        }
        let name = self.name()?;
        loop {
            let ws = self.skip_ws();
            if self.eat(b"/>") {
                self.hit(Loc::SelfClose);
                return Ok(());
            }
            if self.eat(b">") {
                self.hit(Loc::TagClose);
                break;
            }
            if ws == 0 {
                return Err(self.err(Loc::ErrAttr, "expected whitespace before attribute"));
            }
            self.hit(Loc::AttrStart);
            self.name()?;
            self.skip_ws();
            if !self.eat(b"=") {
                return Err(self.err(Loc::ErrAttr, "expected '='"));
            }
            self.hit(Loc::AttrEq);
            self.skip_ws();
            self.attribute_value()?;
        }
        self.content(depth)?;
        self.hit(Loc::EndTag);
        let end = self.name()?;
        if end != name {
            return Err(self.err(Loc::ErrMismatch, "mismatched end tag"));
        }
        self.hit(Loc::EndTagMatch);
        self.skip_ws();
        if !self.eat(b">") {
            return Err(self.err(Loc::ErrJunk, "expected '>'"));
        }
        Ok(())
    }

    /// Parses content up to and including the `</` of the closing tag.
    fn content(&mut self, depth: usize) -> PResult<()> {
        self.hit(Loc::Content);
        loop {
            match self.peek() {
                None => return Err(self.err(Loc::ErrEof, "unclosed element")),
                Some(b'<') => {
                    if self.eat(b"</") {
                        return Ok(());
                    } else if self.eat(b"<!--") {
                        self.hit(Loc::CommentOpen);
                        self.until(b"-->", Loc::CommentChar, Loc::CommentClose)?;
                    } else if self.eat(b"<![CDATA[") {
                        self.hit(Loc::CdataOpen);
                        self.until(b"]]>", Loc::CdataChar, Loc::CdataClose)?;
                    } else if self.eat(b"<?") {
                        self.pi()?;
                    } else {
                        self.hit(Loc::Nested);
                        self.pos += 1;
                        self.element(depth + 1)?;
                    }
                }
                Some(b'&') => self.reference()?,
                Some(_) => {
                    self.hit(Loc::Text);
                    self.pos += 1;
                }
            }
        }
    }

    fn document(&mut self) -> PResult<()> {
        if self.eat(b"<?xml") {
            self.hit(Loc::XmlDecl);
            self.until(b"?>", Loc::PiChar, Loc::PiClose)?;
        }
        while self.misc()? {
            self.hit(Loc::Misc);
        }
        if !self.eat(b"<") {
            return Err(self.err(Loc::ErrJunk, "expected root element"));
        }
        self.element(0)?;
        while self.misc()? {
            self.hit(Loc::Misc);
        }
        if self.peek().is_some() {
            return Err(self.err(Loc::Trailing, "content after root element"));
        }
        Ok(())
    }
}

pub(super) fn run(input: &[u8], t: &mut Tracer) -> Verdict {
    let mut p = Parser { src: input, pos: 0, t };
    p.hit(Loc::Entry);
    match p.document() {
        Ok(()) => {
            p.hit(Loc::Accept);
            Verdict::Accept
        }
        Err(Stop::Syntax(why)) => {
            p.hit(Loc::Reject);
            Verdict::Reject(why.to_string())
        }
        Err(Stop::Fault(why)) => Verdict::Fault(why),
    }
}
