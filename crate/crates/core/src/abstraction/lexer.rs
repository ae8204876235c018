//! A lexer for Java methods with lexical role classification.
//!
//! Identifiers are split into variable, method and type roles using local
//! context only: there is no parser behind this, so an identifier's role is
//! decided by the tokens immediately around it.

use super::AbstractionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Keyword,
    IdentVar,
    IdentMethod,
    IdentType,
    LitString,
    LitChar,
    LitInt,
    LitFloat,
    LitBool,
    Operator,
    Separator,
    Annotation,
}

impl TokenKind {
    pub fn is_identifier(self) -> bool {
        matches!(
            self,
            TokenKind::IdentVar | TokenKind::IdentMethod | TokenKind::IdentType
        )
    }

    /// Identifiers and literals that carry program-specific content.
    /// Boolean literals are closed-class and never abstracted.
    pub fn is_abstractable(self) -> bool {
        matches!(
            self,
            TokenKind::IdentVar
                | TokenKind::IdentMethod
                | TokenKind::IdentType
                | TokenKind::LitString
                | TokenKind::LitChar
                | TokenKind::LitInt
                | TokenKind::LitFloat
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeToken {
    pub text: String,
    pub kind: TokenKind,
    pub index: usize,
}

const KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "null",
    "package",
    "private",
    "protected",
    "public",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "try",
    "var",
    "void",
    "volatile",
    "while",
];

// Longest first so that greedy matching picks `>>>=` over `>>`.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=",
    ">=", "+=", "-=", "*=", "/=", "&=", "|=", "^=", "%=", "<<", ">>", "=", ">", "<", "!", "~",
    "?", ":", "+", "-", "*", "/", "&", "|", "^", "%",
];

const SEPARATORS: &[char] = &['(', ')', '{', '}', '[', ']', ';', ',', '.'];

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_part(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RawKind {
    Word,
    Keyword,
    Bool,
    Str,
    Char,
    Int,
    Float,
    Operator,
    Separator,
    Annotation,
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(n)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn eat_while(&mut self, pred: impl Fn(char) -> bool) {
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    /// Skips whitespace and comments. An unterminated block comment runs to
    /// the end of input.
    fn skip_trivia(&mut self) {
        loop {
            match (self.peek(), self.peek_at(1)) {
                (Some(c), _) if c.is_whitespace() => {
                    self.bump();
                }
                (Some('/'), Some('/')) => {
                    self.eat_while(|c| c != '\n');
                }
                (Some('/'), Some('*')) => {
                    self.pos += 2;
                    match self.src[self.pos..].find("*/") {
                        Some(end) => self.pos += end + 2,
                        None => self.pos = self.src.len(),
                    }
                }
                _ => return,
            }
        }
    }

    fn quoted(&mut self, quote: char, start: usize) -> Result<(), AbstractionError> {
        self.bump();
        loop {
            match self.bump() {
                None | Some('\n') => {
                    return Err(AbstractionError::UnterminatedLiteral { offset: start })
                }
                Some('\\') => {
                    if self.bump().is_none() {
                        return Err(AbstractionError::UnterminatedLiteral { offset: start });
                    }
                }
                Some(c) if c == quote => return Ok(()),
                Some(_) => {}
            }
        }
    }

    fn text_block(&mut self, start: usize) -> Result<(), AbstractionError> {
        self.pos += 3;
        loop {
            if self.src[self.pos..].starts_with("\"\"\"") {
                self.pos += 3;
                return Ok(());
            }
            match self.bump() {
                None => return Err(AbstractionError::UnterminatedLiteral { offset: start }),
                Some('\\') => {
                    self.bump();
                }
                Some(_) => {}
            }
        }
    }

    fn number(&mut self) -> RawKind {
        let start = self.pos;
        let mut float = false;
        if self.peek() == Some('0') && matches!(self.peek_at(1), Some('x' | 'X' | 'b' | 'B')) {
            self.pos += 2;
            self.eat_while(|c| c.is_ascii_hexdigit() || c == '_');
            if matches!(self.peek(), Some('l' | 'L')) {
                self.bump();
            }
            return RawKind::Int;
        }
        self.eat_while(|c| c.is_ascii_digit() || c == '_');
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|c| c.is_ascii_digit())
            || self.peek() == Some('.') && self.pos > start
        {
            float = true;
            self.bump();
            self.eat_while(|c| c.is_ascii_digit() || c == '_');
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let sign = matches!(self.peek_at(1), Some('+' | '-'));
            let digit_at = if sign { 2 } else { 1 };
            if self.peek_at(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                float = true;
                self.pos += digit_at;
                self.eat_while(|c| c.is_ascii_digit() || c == '_');
            }
        }
        match self.peek() {
            Some('f' | 'F' | 'd' | 'D') => {
                self.bump();
                float = true;
            }
            Some('l' | 'L') => {
                self.bump();
            }
            _ => {}
        }
        if float {
            RawKind::Float
        } else {
            RawKind::Int
        }
    }

    fn next_raw(&mut self) -> Result<Option<(RawKind, usize, usize)>, AbstractionError> {
        self.skip_trivia();
        let start = self.pos;
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        let kind = if c == '"' {
            if self.src[self.pos..].starts_with("\"\"\"") {
                self.text_block(start)?;
            } else {
                self.quoted('"', start)?;
            }
            RawKind::Str
        } else if c == '\'' {
            self.quoted('\'', start)?;
            RawKind::Char
        } else if c.is_ascii_digit() || (c == '.' && self.peek_at(1).is_some_and(|d| d.is_ascii_digit())) {
            self.number()
        } else if c == '@' && self.peek_at(1).is_some_and(is_ident_start) {
            self.bump();
            self.eat_while(|c| is_ident_part(c) || c == '.');
            RawKind::Annotation
        } else if is_ident_start(c) {
            self.eat_while(is_ident_part);
            let word = &self.src[start..self.pos];
            if word == "true" || word == "false" {
                RawKind::Bool
            } else if is_keyword(word) {
                RawKind::Keyword
            } else {
                RawKind::Word
            }
        } else if let Some(op) = OPERATORS
            .iter()
            .find(|op| self.src[self.pos..].starts_with(*op))
        {
            self.pos += op.len();
            RawKind::Operator
        } else if SEPARATORS.contains(&c) || c == '@' {
            self.bump();
            RawKind::Separator
        } else {
            return Err(AbstractionError::IllegalCharacter { offset: start, ch: c });
        };
        Ok(Some((kind, start, self.pos)))
    }
}

/// Splits a Java method into classified tokens. Comments are discarded.
pub fn lex_java(source: &str) -> Result<Vec<CodeToken>, AbstractionError> {
    let mut scanner = Scanner { src: source, pos: 0 };
    let mut raw = Vec::new();
    while let Some((kind, start, end)) = scanner.next_raw()? {
        raw.push((kind, &source[start..end]));
    }

    let tokens = raw
        .iter()
        .enumerate()
        .map(|(index, &(kind, text))| {
            let kind = match kind {
                RawKind::Word => classify_identifier(&raw, index),
                RawKind::Keyword => TokenKind::Keyword,
                RawKind::Bool => TokenKind::LitBool,
                RawKind::Str => TokenKind::LitString,
                RawKind::Char => TokenKind::LitChar,
                RawKind::Int => TokenKind::LitInt,
                RawKind::Float => TokenKind::LitFloat,
                RawKind::Operator => TokenKind::Operator,
                RawKind::Separator => TokenKind::Separator,
                RawKind::Annotation => TokenKind::Annotation,
            };
            CodeToken {
                text: text.to_string(),
                kind,
                index,
            }
        })
        .collect();
    Ok(tokens)
}

fn classify_identifier(raw: &[(RawKind, &str)], index: usize) -> TokenKind {
    let prev = index.checked_sub(1).map(|i| raw[i]);
    let next = raw.get(index + 1).copied();
    if matches!(prev, Some((RawKind::Keyword, "new"))) {
        return TokenKind::IdentType;
    }
    if matches!(next, Some((RawKind::Separator, "("))) {
        return TokenKind::IdentMethod;
    }
    if matches!(next, Some((RawKind::Word, _))) {
        return TokenKind::IdentType;
    }
    let text = raw[index].1;
    if text.chars().next().is_some_and(char::is_uppercase) {
        return TokenKind::IdentType;
    }
    TokenKind::IdentVar
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        lex_java(src).unwrap().into_iter().map(|t| t.kind).collect()
    }

    fn texts(src: &str) -> Vec<String> {
        lex_java(src).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn simple_declaration() {
        use TokenKind::*;
        assert_eq!(
            kinds("int x = 1;"),
            vec![Keyword, IdentVar, Operator, LitInt, Separator]
        );
    }

    #[test]
    fn call_marks_method() {
        use TokenKind::*;
        assert_eq!(
            kinds("foo(bar)"),
            vec![IdentMethod, Separator, IdentVar, Separator]
        );
    }

    #[test]
    fn string_literal_is_atomic() {
        let toks = lex_java("String s = \"a b\";").unwrap();
        assert_eq!(toks[0].kind, TokenKind::IdentType);
        assert_eq!(toks[3].text, "\"a b\"");
        assert_eq!(toks[3].kind, TokenKind::LitString);
    }

    #[test]
    fn comments_are_dropped() {
        assert_eq!(
            texts("a /* x y */ = b; // trailing\n c++;"),
            vec!["a", "=", "b", ";", "c", "++", ";"]
        );
    }

    #[test]
    fn numeric_subtypes() {
        use TokenKind::*;
        let cases = [
            ("1", LitInt),
            ("10L", LitInt),
            ("0xFF", LitInt),
            ("1_000", LitInt),
            ("3.5", LitFloat),
            ("3.5f", LitFloat),
            ("2e10", LitFloat),
            ("1d", LitFloat),
            (".5", LitFloat),
            ("1.", LitFloat),
        ];
        for (src, kind) in cases {
            let toks = lex_java(src).unwrap();
            assert_eq!(toks.len(), 1, "{src}");
            assert_eq!(toks[0].kind, kind, "{src}");
        }
    }

    #[test]
    fn operators_longest_match() {
        assert_eq!(texts("a >>>= b"), vec!["a", ">>>=", "b"]);
        assert_eq!(texts("x->x"), vec!["x", "->", "x"]);
        assert_eq!(texts("A::b"), vec!["A", "::", "b"]);
    }

    #[test]
    fn type_positions() {
        use TokenKind::*;
        assert_eq!(
            kinds("Foo f = new Bar(1);"),
            vec![IdentType, IdentVar, Operator, Keyword, IdentType, Separator, LitInt, Separator, Separator]
        );
        assert_eq!(kinds("node value")[0], IdentType);
    }

    #[test]
    fn booleans_and_null() {
        use TokenKind::*;
        assert_eq!(kinds("true false null"), vec![LitBool, LitBool, Keyword]);
    }

    #[test]
    fn annotation_token() {
        let toks = lex_java("@Override public void f() {}").unwrap();
        assert_eq!(toks[0].text, "@Override");
        assert_eq!(toks[0].kind, TokenKind::Annotation);
    }

    #[test]
    fn char_literal_with_escape() {
        let toks = lex_java("c = '\\'';").unwrap();
        assert_eq!(toks[2].text, "'\\''");
        assert_eq!(toks[2].kind, TokenKind::LitChar);
    }

    #[test]
    fn unterminated_string_reports_offset() {
        let err = lex_java("x = \"abc").unwrap_err();
        assert_eq!(err, AbstractionError::UnterminatedLiteral { offset: 4 });
        let err = lex_java("c = 'a").unwrap_err();
        assert_eq!(err, AbstractionError::UnterminatedLiteral { offset: 4 });
    }

    #[test]
    fn illegal_character() {
        let err = lex_java("a # b").unwrap_err();
        assert_eq!(err, AbstractionError::IllegalCharacter { offset: 2, ch: '#' });
    }

    #[test]
    fn indices_are_ordinal() {
        let toks = lex_java("a = b ;").unwrap();
        assert!(toks.iter().enumerate().all(|(i, t)| t.index == i));
    }
}
