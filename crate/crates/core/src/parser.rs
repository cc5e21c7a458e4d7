//! Text format for knowledge bases (`.lsos`).
//!
//! ```text
//! kb         := (decl | constraint)+
//! decl       := "relation" IDENT "/" INT ("boolean")? ("bounded" NUM)? ";"
//!             | "constant" IDENT ("," IDENT)* ";"
//! constraint := ("forall" varlist ":")? (guard "=>")? body (">=" | "=" | "<=") expr ";"
//! ```
//!
//! Bodies are polynomials over relation applications, or linear combinations
//! of moment terms `e(...)`; the two may not be mixed in one constraint.
//! `#` starts a comment that runs to the end of the line.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::model::{
    generic_index, write_polynomial, Arg, BodyKind, Cmp, Constraint, Diagnostic, Guard, KnowledgeBase, Location,
    Monomial, Name, PolyConstraint, Polynomial, RelationSymbol, Severity, Term, Var,
};

/// Byte range plus the 1-based line and column of its start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub span: SourceSpan,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {sev}: {}", self.span.line, self.span.column, self.message)
    }
}

/// A successfully parsed knowledge base and any non-fatal diagnostics.
#[derive(Clone, Debug)]
pub struct ParsedKb {
    pub kb: KnowledgeBase,
    pub warnings: Vec<ParseDiagnostic>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Semi,
    Comma,
    Slash,
    Colon,
    LParen,
    RParen,
    Star,
    Caret,
    Plus,
    Minus,
    Eq,
    Neq,
    Ge,
    Le,
    Implies,
    Amp,
    Pipe,
    Bang,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Num(n) => write!(f, "`{n}`"),
            Tok::Eof => f.write_str("end of input"),
            t => {
                let s = match t {
                    Tok::Semi => ";",
                    Tok::Comma => ",",
                    Tok::Slash => "/",
                    Tok::Colon => ":",
                    Tok::LParen => "(",
                    Tok::RParen => ")",
                    Tok::Star => "*",
                    Tok::Caret => "^",
                    Tok::Plus => "+",
                    Tok::Minus => "-",
                    Tok::Eq => "=",
                    Tok::Neq => "!=",
                    Tok::Ge => ">=",
                    Tok::Le => "<=",
                    Tok::Implies => "=>",
                    Tok::Amp => "&",
                    Tok::Pipe => "|",
                    Tok::Bang => "!",
                    _ => unreachable!(),
                };
                write!(f, "`{s}`")
            }
        }
    }
}

struct Lexer<'a> {
    text: &'a str,
    line_starts: Vec<usize>,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        let mut line_starts = vec![0];
        line_starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Lexer { text, line_starts }
    }

    fn span(&self, start: usize, end: usize) -> SourceSpan {
        let line = self.line_starts.partition_point(|&s| s <= start);
        let column = self.text[self.line_starts[line - 1]..start].chars().count() + 1;
        SourceSpan { line, column, start, end }
    }

    fn tokenize(&self, diags: &mut Vec<ParseDiagnostic>) -> Vec<(Tok, SourceSpan)> {
        let bytes = self.text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            if c.is_ascii_whitespace() {
                i += 1;
                continue;
            }
            if c == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            let two = |j: usize, b: u8| j + 1 < bytes.len() && bytes[j + 1] == b;
            let tok = match c {
                b';' => Tok::Semi,
                b',' => Tok::Comma,
                b'/' => Tok::Slash,
                b':' => Tok::Colon,
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b'*' => Tok::Star,
                b'^' => Tok::Caret,
                b'+' => Tok::Plus,
                b'-' => Tok::Minus,
                b'&' => Tok::Amp,
                b'|' => Tok::Pipe,
                b'=' if two(i, b'>') => {
                    i += 1;
                    Tok::Implies
                }
                b'=' => Tok::Eq,
                b'!' if two(i, b'=') => {
                    i += 1;
                    Tok::Neq
                }
                b'!' => Tok::Bang,
                b'>' if two(i, b'=') => {
                    i += 1;
                    Tok::Ge
                }
                b'<' if two(i, b'=') => {
                    i += 1;
                    Tok::Le
                }
                b'0'..=b'9' | b'.' => {
                    let mut j = i;
                    while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                        let mut k = j + 1;
                        if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                            k += 1;
                        }
                        if k < bytes.len() && bytes[k].is_ascii_digit() {
                            while k < bytes.len() && bytes[k].is_ascii_digit() {
                                k += 1;
                            }
                            j = k;
                        }
                    }
                    let lit = &self.text[i..j];
                    i = j - 1;
                    match lit.parse::<f64>() {
                        Ok(v) => Tok::Num(v),
                        Err(_) => {
                            diags.push(error(self.span(start, j), format!("malformed number `{lit}`")));
                            Tok::Num(0.0)
                        }
                    }
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let mut j = i;
                    while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] == b'\'') {
                        j += 1;
                    }
                    let id = self.text[i..j].to_string();
                    i = j - 1;
                    Tok::Ident(id)
                }
                _ => {
                    let ch = self.text[i..].chars().next().unwrap_or('?');
                    let end = i + ch.len_utf8();
                    diags.push(error(self.span(start, end), format!("unexpected character `{ch}`")));
                    i = end;
                    continue;
                }
            };
            i += 1;
            out.push((tok, self.span(start, i)));
        }
        let end = self.text.len();
        out.push((Tok::Eof, self.span(end, end)));
        out
    }
}

fn error(span: SourceSpan, message: impl Into<String>) -> ParseDiagnostic {
    ParseDiagnostic { span, severity: Severity::Error, message: message.into() }
}

/// Result of evaluating a body expression. Constants combine with both sides.
#[derive(Clone, Debug)]
enum Val {
    Const(f64),
    Logical(Polynomial),
    Moment(Polynomial),
}

impl Val {
    fn into_poly(self) -> (Option<BodyKind>, Polynomial) {
        match self {
            Val::Const(c) => (None, Polynomial::constant(c)),
            Val::Logical(p) => (Some(BodyKind::Logical), p),
            Val::Moment(p) => (Some(BodyKind::Expectation), p),
        }
    }
}

const MIXED: &str = "moment terms and raw relation terms may not be mixed in one constraint";

fn add(a: Val, b: Val) -> Result<Val, &'static str> {
    Ok(match (a, b) {
        (Val::Const(x), Val::Const(y)) => Val::Const(x + y),
        (Val::Const(x), Val::Logical(p)) | (Val::Logical(p), Val::Const(x)) => Val::Logical(p.add(&Polynomial::constant(x))),
        (Val::Const(x), Val::Moment(p)) | (Val::Moment(p), Val::Const(x)) => Val::Moment(p.add(&Polynomial::constant(x))),
        (Val::Logical(p), Val::Logical(q)) => Val::Logical(p.add(&q)),
        (Val::Moment(p), Val::Moment(q)) => Val::Moment(p.add(&q)),
        _ => return Err(MIXED),
    })
}

fn mul(a: Val, b: Val) -> Result<Val, &'static str> {
    Ok(match (a, b) {
        (Val::Const(x), Val::Const(y)) => Val::Const(x * y),
        (Val::Const(x), Val::Logical(p)) | (Val::Logical(p), Val::Const(x)) => Val::Logical(p.scale(x)),
        (Val::Const(x), Val::Moment(p)) | (Val::Moment(p), Val::Const(x)) => Val::Moment(p.scale(x)),
        (Val::Logical(p), Val::Logical(q)) => Val::Logical(p.mul(&q)),
        (Val::Moment(_), Val::Moment(_)) => return Err("products of moment terms are not linear; write e(a*b) instead"),
        _ => return Err(MIXED),
    })
}

fn neg(a: Val) -> Val {
    match a {
        Val::Const(x) => Val::Const(-x),
        Val::Logical(p) => Val::Logical(p.scale(-1.0)),
        Val::Moment(p) => Val::Moment(p.scale(-1.0)),
    }
}

struct Parser<'a> {
    toks: &'a [(Tok, SourceSpan)],
    pos: usize,
    diags: Vec<ParseDiagnostic>,
    /// Variables bound by the enclosing `forall`.
    scope: Vec<Var>,
}

type PResult<T> = Result<T, ()>;

#[derive(Debug)]
enum Statement {
    Relation(RelationSymbol, SourceSpan),
    Constants(Vec<(String, SourceSpan)>),
    Constraint(Constraint, SourceSpan),
}

impl<'a> Parser<'a> {
    fn new(toks: &'a [(Tok, SourceSpan)]) -> Self {
        Parser { toks, pos: 0, diags: Vec::new(), scope: Vec::new() }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].0
    }

    fn span(&self) -> SourceSpan {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, SourceSpan) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&mut self, span: SourceSpan, msg: impl Into<String>) -> PResult<T> {
        self.diags.push(error(span, msg));
        Err(())
    }

    fn expect(&mut self, want: Tok) -> PResult<SourceSpan> {
        if *self.peek() == want {
            Ok(self.bump().1)
        } else {
            let (got, span) = (self.peek().clone(), self.span());
            self.fail(span, format!("expected {want}, found {got}"))
        }
    }

    fn ident(&mut self) -> PResult<(String, SourceSpan)> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let sp = self.bump().1;
                Ok((s, sp))
            }
            t => {
                let span = self.span();
                self.fail(span, format!("expected identifier, found {t}"))
            }
        }
    }

    fn number(&mut self) -> PResult<f64> {
        let neg = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            t => {
                let span = self.span();
                self.fail(span, format!("expected number, found {t}"))
            }
        }
    }

    /// Skips past the next `;` (or to end of input).
    fn recover(&mut self) {
        while !matches!(self.peek(), Tok::Semi | Tok::Eof) {
            self.bump();
        }
        if *self.peek() == Tok::Semi {
            self.bump();
        }
    }

    fn join(a: SourceSpan, b: SourceSpan) -> SourceSpan {
        SourceSpan { end: b.end.max(a.end), ..a }
    }

    fn statements(&mut self) -> Vec<Statement> {
        let mut out = Vec::new();
        while *self.peek() != Tok::Eof {
            let start = self.pos;
            match self.statement() {
                Ok(s) => out.push(s),
                Err(()) => {
                    self.recover();
                    if self.pos == start {
                        self.bump();
                    }
                }
            }
        }
        out
    }

    fn statement(&mut self) -> PResult<Statement> {
        let start = self.span();
        match self.peek() {
            Tok::Ident(k) if k == "relation" => {
                self.bump();
                let (label, _) = self.ident()?;
                self.expect(Tok::Slash)?;
                let span = self.span();
                let arity = self.number()?;
                if arity.fract() != 0.0 || arity < 0.0 {
                    return self.fail(span, format!("arity must be a nonnegative integer, found {arity}"));
                }
                let mut rel = RelationSymbol::new(label, arity as usize);
                loop {
                    match self.peek() {
                        Tok::Ident(k) if k == "boolean" => {
                            self.bump();
                            rel.boolean = true;
                        }
                        Tok::Ident(k) if k == "bounded" => {
                            self.bump();
                            rel.bound = Some(self.number()?);
                        }
                        _ => break,
                    }
                }
                let end = self.expect(Tok::Semi)?;
                Ok(Statement::Relation(rel, Self::join(start, end)))
            }
            Tok::Ident(k) if k == "constant" => {
                self.bump();
                let mut names = vec![self.ident()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    names.push(self.ident()?);
                }
                self.expect(Tok::Semi)?;
                Ok(Statement::Constants(names))
            }
            _ => {
                let c = self.constraint()?;
                let end = self.expect(Tok::Semi)?;
                Ok(Statement::Constraint(c, Self::join(start, end)))
            }
        }
    }

    fn constraint(&mut self) -> PResult<Constraint> {
        self.scope.clear();
        if matches!(self.peek(), Tok::Ident(k) if k == "forall") {
            self.bump();
            loop {
                let (v, _) = self.ident()?;
                self.scope.push(Var(v));
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect(Tok::Colon)?;
        }
        let guard = if self.guard_ahead() {
            let g = self.guard_or()?;
            self.expect(Tok::Implies)?;
            g
        } else {
            Guard::True
        };
        let body_span = self.span();
        let lhs = self.expr()?;
        let (cmp, flip) = match self.peek() {
            Tok::Ge => (Cmp::Ge, false),
            Tok::Le => (Cmp::Ge, true),
            Tok::Eq => (Cmp::Eq, false),
            t => {
                let (t, span) = (t.clone(), self.span());
                return self.fail(span, format!("expected `>=`, `<=` or `=`, found {t}"));
            }
        };
        self.bump();
        let rhs = self.expr()?;
        let diff = if flip { add(rhs, neg(lhs)) } else { add(lhs, neg(rhs)) };
        let (kind, poly) = match diff {
            Ok(v) => v.into_poly(),
            Err(msg) => return self.fail(body_span, msg),
        };
        // a constant body means the same either way; keep one reading so
        // printing and reparsing agree
        let kind = if poly.degree() == 0 { BodyKind::Expectation } else { kind.unwrap_or(BodyKind::Expectation) };
        Ok(Constraint {
            vars: self.scope.clone(),
            guard,
            kind,
            body: PolyConstraint::new(poly, cmp),
        })
    }

    /// A guard is present iff `=>` occurs before the statement's `;`.
    fn guard_ahead(&self) -> bool {
        self.toks[self.pos..].iter().take_while(|(t, _)| !matches!(t, Tok::Semi | Tok::Eof)).any(|(t, _)| *t == Tok::Implies)
    }

    fn guard_or(&mut self) -> PResult<Guard> {
        let mut g = self.guard_and()?;
        while *self.peek() == Tok::Pipe {
            self.bump();
            g = Guard::or(g, self.guard_and()?);
        }
        Ok(g)
    }

    fn guard_and(&mut self) -> PResult<Guard> {
        let mut g = self.guard_not()?;
        while *self.peek() == Tok::Amp {
            self.bump();
            let rhs = self.guard_not()?;
            g = Guard::And(Box::new(g), Box::new(rhs));
        }
        Ok(g)
    }

    fn guard_not(&mut self) -> PResult<Guard> {
        match self.peek() {
            Tok::Bang => {
                self.bump();
                Ok(Guard::Not(Box::new(self.guard_not()?)))
            }
            Tok::LParen => {
                self.bump();
                let g = self.guard_or()?;
                self.expect(Tok::RParen)?;
                Ok(g)
            }
            Tok::Ident(k) if k == "true" => {
                self.bump();
                Ok(Guard::True)
            }
            _ => {
                let (a, _) = self.ident()?;
                let negate = match self.peek() {
                    Tok::Eq => false,
                    Tok::Neq => true,
                    t => {
                        let (t, span) = (t.clone(), self.span());
                        return self.fail(span, format!("expected `=` or `!=` in guard, found {t}"));
                    }
                };
                self.bump();
                let (b, _) = self.ident()?;
                let atom = Guard::Eq(self.arg(&a), self.arg(&b));
                Ok(if negate { Guard::Not(Box::new(atom)) } else { atom })
            }
        }
    }

    fn arg(&self, label: &str) -> Arg {
        let v = Var(label.to_string());
        if self.scope.contains(&v) {
            Arg::Var(v)
        } else {
            Arg::Name(Name::from_label(label))
        }
    }

    fn expr(&mut self) -> PResult<Val> {
        let mut v = self.product()?;
        loop {
            let negate = match self.peek() {
                Tok::Plus => false,
                Tok::Minus => true,
                _ => return Ok(v),
            };
            let span = self.bump().1;
            let rhs = self.product()?;
            let rhs = if negate { neg(rhs) } else { rhs };
            v = match add(v, rhs) {
                Ok(v) => v,
                Err(msg) => return self.fail(span, msg),
            };
        }
    }

    fn product(&mut self) -> PResult<Val> {
        let mut v = self.unary()?;
        while *self.peek() == Tok::Star {
            let span = self.bump().1;
            let rhs = self.unary()?;
            v = match mul(v, rhs) {
                Ok(v) => v,
                Err(msg) => return self.fail(span, msg),
            };
        }
        Ok(v)
    }

    fn unary(&mut self) -> PResult<Val> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(neg(self.unary()?));
        }
        if *self.peek() == Tok::Plus {
            self.bump();
            return self.unary();
        }
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        let span = self.bump().1;
        let n = self.number()?;
        if n.fract() != 0.0 || !(0.0..=64.0).contains(&n) {
            return self.fail(span, format!("exponent must be a small nonnegative integer, found {n}"));
        }
        let n = n as u32;
        match base {
            Val::Const(c) => Ok(Val::Const(c.powi(n as i32))),
            Val::Logical(p) => Ok(Val::Logical(p.pow(n))),
            Val::Moment(_) if n == 0 => Ok(Val::Const(1.0)),
            Val::Moment(p) if n == 1 => Ok(Val::Moment(p)),
            Val::Moment(_) => self.fail(span, "powers of moment terms are not linear; write e(a^n) instead"),
        }
    }

    fn atom(&mut self) -> PResult<Val> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Val::Const(v))
            }
            Tok::LParen => {
                self.bump();
                let v = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(v)
            }
            Tok::Ident(id) if id == "e" && *self.peek_at(1) == Tok::LParen => {
                let span = self.bump().1;
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                match inner {
                    Val::Const(c) => Ok(Val::Const(c)),
                    Val::Logical(p) => Ok(Val::Moment(p)),
                    Val::Moment(_) => self.fail(span, "moment terms may not be nested"),
                }
            }
            Tok::Ident(id) if *self.peek_at(1) == Tok::LParen => {
                self.bump();
                self.bump();
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        let (a, _) = self.ident()?;
                        args.push(self.arg(&a));
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RParen)?;
                Ok(Val::Logical(Polynomial::from_term(Term::new(id, args))))
            }
            t => {
                let span = self.span();
                self.fail(span, format!("expected a number, relation application, `e(...)` or `(`, found {t}"))
            }
        }
    }
}

/// Parses and validates a knowledge base.
pub fn parse_kb(text: &str) -> Result<ParsedKb, Vec<ParseDiagnostic>> {
    let lexer = Lexer::new(text);
    let mut diags = Vec::new();
    let toks = lexer.tokenize(&mut diags);
    let mut parser = Parser::new(&toks);
    let stmts = parser.statements();
    diags.extend(std::mem::take(&mut parser.diags));
    if !diags.is_empty() {
        return Err(diags);
    }

    let mut relations = Vec::new();
    let mut constants = Vec::new();
    let mut constraints = Vec::new();
    let mut rel_spans = HashMap::new();
    let mut const_spans = HashMap::new();
    let mut constraint_spans: HashMap<Constraint, SourceSpan> = HashMap::new();
    for s in stmts {
        match s {
            Statement::Relation(r, span) => {
                for ax in r.axioms() {
                    constraint_spans.entry(ax).or_insert(span);
                }
                rel_spans.entry(r.label.clone()).or_insert(span);
                relations.push(r);
            }
            Statement::Constants(names) => {
                for (n, span) in names {
                    const_spans.entry(n.clone()).or_insert(span);
                    constants.push(n);
                }
            }
            Statement::Constraint(c, span) => {
                constraint_spans.entry(c.clone()).or_insert(span);
                constraints.push(c);
            }
        }
    }
    let kb = KnowledgeBase::new(relations, constants, constraints);
    let eof = lexer.span(text.len(), text.len());
    let locate = |d: &Diagnostic| match &d.location {
        Location::Kb => eof,
        Location::Relation(r) => rel_spans.get(r).copied().unwrap_or(eof),
        Location::Constant(c) => const_spans.get(c).copied().unwrap_or(eof),
        Location::Constraint(i) => constraint_spans.get(&kb.constraints()[*i]).copied().unwrap_or(eof),
    };
    let all: Vec<ParseDiagnostic> = kb
        .validate()
        .iter()
        .map(|d| ParseDiagnostic { span: locate(d), severity: d.severity, message: d.message.clone() })
        .collect();
    if all.iter().any(|d| d.severity == Severity::Error) {
        return Err(all);
    }
    Ok(ParsedKb { kb, warnings: all })
}

/// Parses one extra constraint (a query) against `kb`'s declarations.
/// Generic placeholders `g1..gk` may appear as names.
pub fn parse_constraint(text: &str, kb: &KnowledgeBase) -> Result<Constraint, Vec<ParseDiagnostic>> {
    let trimmed = text.trim_end();
    let owned;
    let text = if trimmed.ends_with(';') {
        trimmed
    } else {
        owned = format!("{trimmed};");
        &owned
    };
    let lexer = Lexer::new(text);
    let mut diags = Vec::new();
    let toks = lexer.tokenize(&mut diags);
    let mut parser = Parser::new(&toks);
    let res = parser.constraint().and_then(|c| parser.expect(Tok::Semi).map(|_| c));
    diags.extend(std::mem::take(&mut parser.diags));
    let c = match res {
        Ok(c) if diags.is_empty() => c,
        _ => return Err(diags),
    };
    if *parser.peek() != Tok::Eof {
        return Err(vec![error(parser.span(), "trailing input after constraint")]);
    }
    let whole = lexer.span(0, text.len());
    let probe = kb.with_constraints([c.clone()]);
    let idx = probe.constraints().iter().position(|x| *x == c).unwrap_or(0);
    let errs: Vec<ParseDiagnostic> = probe
        .validate()
        .into_iter()
        .filter(|d| d.is_error() && d.location == Location::Constraint(idx))
        .map(|d| error(whole, d.message))
        .collect();
    if errs.is_empty() {
        Ok(c)
    } else {
        Err(errs)
    }
}

/// Parses a linear objective over moment terms of ground monomials, e.g.
/// `e(War(Antony,g1))` or `2*e(T(g1)^2) - e(X(g1))`.
pub fn parse_objective(text: &str, kb: &KnowledgeBase) -> Result<Polynomial, Vec<ParseDiagnostic>> {
    parse_ground(text, kb, true)
}

/// Parses a ground polynomial over relation terms, e.g. `(1 - T(g1))*X(g1)`,
/// as used in hand-written certificates.
pub fn parse_polynomial(text: &str, kb: &KnowledgeBase) -> Result<Polynomial, Vec<ParseDiagnostic>> {
    parse_ground(text, kb, false)
}

fn parse_ground(text: &str, kb: &KnowledgeBase, moments: bool) -> Result<Polynomial, Vec<ParseDiagnostic>> {
    let lexer = Lexer::new(text);
    let mut diags = Vec::new();
    let toks = lexer.tokenize(&mut diags);
    let mut parser = Parser::new(&toks);
    let res = parser.expr();
    diags.extend(std::mem::take(&mut parser.diags));
    let whole = lexer.span(0, text.len());
    let val = match res {
        Ok(v) if diags.is_empty() => v,
        _ => return Err(diags),
    };
    if *parser.peek() != Tok::Eof {
        return Err(vec![error(parser.span(), "trailing input after objective")]);
    }
    let poly = match (val, moments) {
        (Val::Const(c), _) => Polynomial::constant(c),
        (Val::Moment(p), true) | (Val::Logical(p), false) => p,
        (Val::Logical(_), true) => return Err(vec![error(whole, "objective must be a combination of moment terms e(...)")]),
        (Val::Moment(_), false) => return Err(vec![error(whole, "expected a polynomial over relation terms, without e(...)")]),
    };
    let consts: BTreeSet<&str> = kb.constants().iter().map(String::as_str).collect();
    let mut errs = Vec::new();
    for t in poly.term_set() {
        match kb.relation(&t.relation) {
            None => errs.push(error(whole, format!("unknown relation `{}`", t.relation))),
            Some(r) if r.arity != t.args.len() => errs.push(error(
                whole,
                format!("`{}` has arity {} but is applied to {} argument(s)", r.label, r.arity, t.args.len()),
            )),
            _ => {}
        }
        for a in &t.args {
            if let Arg::Name(Name::Constant(n)) = a {
                if !consts.contains(n.as_str()) {
                    errs.push(error(
                        whole,
                        format!("`{n}` is not ground: neither a declared constant nor a generic placeholder g1..gk"),
                    ));
                }
            }
        }
    }
    if !poly.terms().all(|(_, c)| c.is_finite()) {
        errs.push(error(whole, "coefficients must be finite"));
    }
    if errs.is_empty() {
        Ok(poly)
    } else {
        Err(errs)
    }
}

/// Renders a polynomial whose monomials denote moments, as `e(...)` terms.
pub fn format_moment_poly(p: &Polynomial) -> String {
    let mut s = String::new();
    write_polynomial(&mut s, p, |f, m| write!(f, "e({m})")).expect("writing to a String");
    s
}

pub fn format_constraint(c: &Constraint) -> String {
    let mut s = String::new();
    if !c.vars.is_empty() {
        let vars: Vec<String> = c.vars.iter().map(|v| v.0.clone()).collect();
        let _ = write!(s, "forall {} : ", vars.join(", "));
    }
    if !c.guard.is_trivial() {
        let _ = write!(s, "{} => ", c.guard);
    }
    match c.kind {
        BodyKind::Logical => s.push_str(&c.body.poly.to_string()),
        BodyKind::Expectation => s.push_str(&format_moment_poly(&c.body.poly)),
    }
    let _ = write!(s, " {} 0;", c.body.cmp);
    s
}

/// Prints `kb` in the text format. Declaration sugar is emitted as the
/// expanded axioms, so flags are not reconstructed.
pub fn serialize_kb(kb: &KnowledgeBase) -> String {
    let mut s = String::new();
    for r in kb.relations() {
        let _ = writeln!(s, "relation {}/{};", r.label, r.arity);
    }
    if !kb.constants().is_empty() {
        let _ = writeln!(s, "constant {};", kb.constants().join(", "));
    }
    for c in kb.constraints() {
        s.push_str(&format_constraint(c));
        s.push('\n');
    }
    s
}

/// True when `label` may be used as a name in the text format without being
/// mistaken for a generic placeholder.
pub fn is_plain_constant(label: &str) -> bool {
    generic_index(label).is_none()
}

/// Coefficient map keyed by serialized monomials (`"1"` for the constant).
pub fn polynomial_to_json(p: &Polynomial) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = p.terms().map(|(m, c)| (m.to_string(), c.into())).collect();
    serde_json::Value::Object(map)
}

pub fn polynomial_from_json(v: &serde_json::Value) -> Result<Polynomial, String> {
    let obj = v.as_object().ok_or("polynomial must be a JSON object")?;
    let mut raw = Vec::with_capacity(obj.len());
    for (k, c) in obj {
        let c = c.as_f64().ok_or_else(|| format!("coefficient of `{k}` is not a number"))?;
        raw.push((c, parse_monomial(k)?));
    }
    Ok(Polynomial::combine(raw))
}

/// Parses a serialized ground monomial such as `T(o)^2*X(o)` or `1`.
pub fn parse_monomial(text: &str) -> Result<Monomial, String> {
    let lexer = Lexer::new(text);
    let mut diags = Vec::new();
    let toks = lexer.tokenize(&mut diags);
    let mut parser = Parser::new(&toks);
    let res = parser.expr();
    let bad = || format!("`{text}` is not a monomial");
    if res.is_err() || !diags.is_empty() || !parser.diags.is_empty() || *parser.peek() != Tok::Eof {
        return Err(bad());
    }
    let p = match res.map_err(|_| bad())? {
        Val::Const(1.0) => return Ok(Monomial::one()),
        Val::Logical(p) => p,
        _ => return Err(bad()),
    };
    match p.terms().collect::<Vec<_>>().as_slice() {
        [(m, c)] if *c == 1.0 => Ok((*m).clone()),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WAR: &str = "relation War/2 boolean; relation LoveTriangle/3 boolean; constant Antony, Cleopatra; \
        forall x,y,z : e(War(x,y)*LoveTriangle(x,y,z)) - 0.75*e(LoveTriangle(x,y,z)) >= 0; \
        forall x : x != Antony & x != Cleopatra => e(LoveTriangle(x,Antony,Cleopatra)) - 1 >= 0;";

    #[test]
    fn parses_war_kb() {
        let kb = parse_kb(WAR).unwrap().kb;
        assert_eq!(kb.constraints().len(), 4);
        assert_eq!(kb.rank(), 3);
        let last = &kb.constraints()[3];
        assert_eq!(last.kind, BodyKind::Expectation);
        assert_eq!(last.quantifier_rank(), 1);
        assert_eq!(
            last.guard,
            Guard::And(
                Box::new(Guard::neq(Arg::var("x"), Arg::name("Antony"))),
                Box::new(Guard::neq(Arg::var("x"), Arg::name("Cleopatra")))
            )
        );
        let lt = Monomial::from_term(Term::new("LoveTriangle", vec![Arg::var("x"), Arg::name("Antony"), Arg::name("Cleopatra")]));
        assert_eq!(last.body.poly.coeff(&lt), 1.0);
        assert_eq!(last.body.poly.constant_term(), -1.0);
    }

    #[test]
    fn empty_file_rejected() {
        let errs = parse_kb("").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("knowledge base must be non-empty"));
        assert_eq!(errs[0].span.start, 0);
    }

    #[test]
    fn boolean_axiom_shape() {
        let kb = parse_kb("relation P/1; forall x : P(x)^2 - P(x) = 0;").unwrap().kb;
        assert_eq!(kb.constraints().len(), 1);
        let c = &kb.constraints()[0];
        assert_eq!(c.kind, BodyKind::Logical);
        assert_eq!(c.degree(), 2);
        assert_eq!(c.quantifier_rank(), 1);
    }

    #[test]
    fn round_trip_war() {
        let kb = parse_kb(WAR).unwrap().kb;
        let text = serialize_kb(&kb);
        let again = parse_kb(&text).unwrap().kb;
        assert_eq!(kb, again);
        assert!(!text.contains("boolean"));
        assert!(text.contains("War(x1,x2)^2"));
    }

    #[test]
    fn single_bound_serializes_to_one_line() {
        let kb = parse_kb("relation P/1 bounded 1; constant a; e(P(a)) >= 0.5;").unwrap().kb;
        let text = serialize_kb(&kb);
        let lines: Vec<&str> = text.lines().filter(|l| l.contains("e(")).collect();
        assert_eq!(lines, vec!["-0.5 + e(P(a)) >= 0;"]);
    }

    #[test]
    fn recovers_after_error() {
        let errs = parse_kb("relation P/1; forall x : P(x) >= ; relation Q/; P(a) >= 0;").unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert!(errs.iter().all(|e| e.span.end <= 60));
    }

    #[test]
    fn mixing_rejected() {
        let errs = parse_kb("relation P/1; constant a; e(P(a)) - P(a) >= 0;").unwrap_err();
        assert!(errs[0].message.contains("may not be mixed"));
    }

    #[test]
    fn scientific_and_comments() {
        let kb = parse_kb("# header\nrelation P/1 bounded 1e2; constant a;\ne(P(a)) >= 2.5e-1; # tail\n").unwrap().kb;
        let c = kb.constraints().last().unwrap();
        assert_eq!(c.body.poly.constant_term(), -0.25);
        assert_eq!(kb.relations()[0].bound, Some(100.0));
    }

    #[test]
    fn le_flips() {
        let kb = parse_kb("relation P/1 boolean; constant a; e(P(a)) <= 0.74;").unwrap().kb;
        let c = kb.constraints().last().unwrap();
        assert_eq!(c.body.poly.constant_term(), 0.74);
        assert_eq!(c.body.poly.coeff(&Monomial::from_term(Term::ground("P", &["a"]))), -1.0);
    }

    #[test]
    fn objectives() {
        let kb = parse_kb(WAR).unwrap().kb;
        let o = parse_objective("e(War(Antony,g1))", &kb).unwrap();
        assert_eq!(o.degree(), 1);
        assert_eq!(o.coeff(&Monomial::from_term(Term::ground("War", &["Antony", "g1"]))), 1.0);
        let hr = parse_kb("relation HR/1 bounded 4e4; e(HR(g1)) >= 0;").unwrap().kb;
        assert!(parse_objective("e(HR(g1))", &hr).is_ok());
        let t = parse_kb("relation T/1 boolean; e(T(g1)) >= 0;").unwrap().kb;
        let o = parse_objective("e(T(g1)*T(g1))", &t).unwrap();
        assert_eq!(o.degree(), 2);
        assert!(parse_objective("e(Foo(g1))", &kb).is_err());
        assert!(parse_objective("e(War(x,g1))", &kb).is_err());
        assert!(parse_objective("War(Antony,g1)", &kb).is_err());
    }

    #[test]
    fn ground_polynomials() {
        let kb = parse_kb("relation T/1 boolean; relation X/1; constant o; T(o) >= 0;").unwrap().kb;
        let p = parse_polynomial("(1 - T(g1))*X(g1)", &kb).unwrap();
        let x = Monomial::from_term(Term::ground("X", &["g1"]));
        let tx = x.mul(&Monomial::from_term(Term::ground("T", &["g1"])));
        assert_eq!(p, Polynomial::combine([(1.0, x), (-1.0, tx)]));
        assert_eq!(parse_polynomial("2", &kb).unwrap(), Polynomial::constant(2.0));
        assert!(parse_polynomial("e(T(o))", &kb).is_err());
        assert!(parse_polynomial("T(y)", &kb).is_err());
    }

    #[test]
    fn monomial_json_round_trip() {
        let p = parse_kb("relation T/1; relation X/1; constant o; T(o)^2*X(o) - 3*X(o) + 1 >= 0;").unwrap().kb;
        let poly = &p.constraints().last().unwrap().body.poly;
        assert_eq!(polynomial_from_json(&polynomial_to_json(poly)).unwrap(), *poly);
        assert_eq!(parse_monomial("1").unwrap(), Monomial::one());
        assert!(parse_monomial("2*T(o)").is_err());
    }

    #[test]
    fn diagnostic_spans_point_at_statement() {
        let text = "relation War/2;\nforall x : e(War(x)) >= 0;";
        let errs: Vec<_> = parse_kb(text).unwrap_err().into_iter().filter(|d| d.severity == Severity::Error).collect();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].span.line, 2);
        assert!(errs[0].span.end <= text.len());
    }
}
