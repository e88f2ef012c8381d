//! Shell command tokenizer.
//!
//! Splits a raw agent command into simple-command segments joined by the
//! connectors `&&`, `||`, `;` and `|`. Words are tokenized with single/double
//! quotes and backslash escapes. Anything beyond that grammar (substitutions,
//! expansions, background jobs, heredocs, grouping) is kept verbatim where
//! possible and flagged with a warning on the segment that contains it, so
//! the classifier can treat the segment as opaque.

use std::fmt;
use std::iter::Peekable;
use std::str::Chars;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a segment is joined to the one after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Connector {
    And,
    Or,
    Seq,
    Pipe,
    None,
}

impl Connector {
    pub fn as_shell(&self) -> &'static str {
        match self {
            Connector::And => "&&",
            Connector::Or => "||",
            Connector::Seq => ";",
            Connector::Pipe => "|",
            Connector::None => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RedirectKind {
    /// `>` or `1>`
    StdoutTrunc,
    /// `>>` or `1>>`
    StdoutAppend,
    /// `<`
    Stdin,
    /// `2>`
    StderrTrunc,
    /// `2>>`
    StderrAppend,
    /// File descriptor duplication such as `2>&1`; the target holds the full operator.
    Duplicate,
    /// `<<` / `<<<`; always accompanied by a warning.
    Heredoc,
}

impl RedirectKind {
    /// True when the redirection can create or modify a file.
    pub fn writes(&self) -> bool {
        matches!(
            self,
            RedirectKind::StdoutTrunc
                | RedirectKind::StdoutAppend
                | RedirectKind::StderrTrunc
                | RedirectKind::StderrAppend
        )
    }

    fn operator(&self) -> &'static str {
        match self {
            RedirectKind::StdoutTrunc => ">",
            RedirectKind::StdoutAppend => ">>",
            RedirectKind::Stdin => "<",
            RedirectKind::StderrTrunc => "2>",
            RedirectKind::StderrAppend => "2>>",
            RedirectKind::Duplicate => "",
            RedirectKind::Heredoc => "<<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redirection {
    pub kind: RedirectKind,
    pub target: String,
}

impl Redirection {
    pub fn writes_file(&self) -> bool {
        self.kind.writes() && self.target != "/dev/null"
    }
}

/// One simple command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// `argv[0]` is the program name. Never empty.
    pub argv: Vec<String>,
    /// Leading `NAME=value` words.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assignments: Vec<(String, String)>,
    pub connector_to_next: Connector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub redirections: Vec<Redirection>,
    /// Unsupported constructs found in this segment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Segment {
    /// Program name with any directory components removed, so `/bin/rm` is `rm`.
    pub fn program(&self) -> &str {
        let argv0 = self.argv[0].as_str();
        match argv0.rfind('/') {
            Some(i) if i + 1 < argv0.len() => &argv0[i + 1..],
            _ => argv0,
        }
    }

    /// Flattened text used by prefix/glob/regex rules: assignments, the
    /// normalized program name, arguments, then redirections.
    pub fn match_text(&self) -> String {
        let mut parts: Vec<String> = self
            .assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        parts.push(self.program().to_string());
        parts.extend(self.argv[1..].iter().cloned());
        for r in &self.redirections {
            match r.kind {
                RedirectKind::Duplicate => parts.push(r.target.clone()),
                _ => {
                    parts.push(r.kind.operator().to_string());
                    parts.push(r.target.clone());
                }
            }
        }
        parts.join(" ")
    }

    /// Re-serializes the segment (without its connector) as shell text.
    pub fn to_shell(&self) -> String {
        let mut out: Vec<String> = self
            .assignments
            .iter()
            .map(|(k, v)| format!("{k}={}", quote(v)))
            .collect();
        out.extend(self.argv.iter().map(|w| quote(w)));
        for r in &self.redirections {
            match r.kind {
                RedirectKind::Duplicate => out.push(r.target.clone()),
                _ => out.push(format!("{}{}", r.kind.operator(), quote(&r.target))),
            }
        }
        out.join(" ")
    }
}

fn quote(word: &str) -> String {
    if word.is_empty() {
        return "''".to_string();
    }
    // shlex leaves `{`, `}` and `#` bare, which this tokenizer treats specially.
    if word == "{" || word == "}" || word.starts_with('#') {
        return format!("'{word}'");
    }
    shlex::try_quote(word)
        .map(|q| q.into_owned())
        .unwrap_or_else(|_| format!("'{}'", word.replace('\'', r"'\''")))
}

/// A parsed agent command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandLine {
    pub raw: String,
    pub segments: Vec<Segment>,
    /// All segment warnings, prefixed with the segment index.
    pub parse_warnings: Vec<String>,
}

impl CommandLine {
    /// Joins the segments back together with their connectors.
    pub fn to_shell(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&seg.to_shell());
            if seg.connector_to_next != Connector::None {
                out.push(' ');
                out.push_str(seg.connector_to_next.as_shell());
            }
        }
        out
    }

    pub fn has_warnings(&self) -> bool {
        !self.parse_warnings.is_empty()
    }
}

impl fmt::Display for CommandLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("EMPTY_COMMAND: command is empty")]
    EmptyCommand,
    #[error("UNBALANCED_QUOTE: {quote} opened at byte {offset} is never closed")]
    UnbalancedQuote { quote: char, offset: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::EmptyCommand => "EMPTY_COMMAND",
            ParseError::UnbalancedQuote { .. } => "UNBALANCED_QUOTE",
        }
    }
}

/// Parses a raw command string into segments.
pub fn parse_command(raw: &str) -> Result<CommandLine, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyCommand);
    }
    let mut lexer = Lexer::new(raw);
    lexer.run()?;
    let segments = lexer.finish();
    if segments.is_empty() {
        // Only comments or bare connectors.
        return Err(ParseError::EmptyCommand);
    }
    let parse_warnings = segments
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.warnings.iter().map(move |w| format!("segment {i}: {w}")))
        .collect();
    Ok(CommandLine {
        raw: raw.to_string(),
        segments,
        parse_warnings,
    })
}

#[derive(Default)]
struct WordBuf {
    text: String,
    quoted: bool,
    /// Length of `text` before the first quoted or escaped character.
    plain_prefix: Option<usize>,
}

impl WordBuf {
    fn mark_quoted(&mut self) {
        if self.plain_prefix.is_none() {
            self.plain_prefix = Some(self.text.len());
        }
        self.quoted = true;
    }

    fn plain_part(&self) -> &str {
        &self.text[..self.plain_prefix.unwrap_or(self.text.len())]
    }
}

#[derive(Default)]
struct SegmentBuf {
    words: Vec<String>,
    assignments: Vec<(String, String)>,
    redirections: Vec<Redirection>,
    warnings: Vec<String>,
    pending_redirect: Option<RedirectKind>,
    /// `&>` style: append `2>&1` once the file target is known.
    pending_dup: bool,
}

impl SegmentBuf {
    fn is_empty(&self) -> bool {
        self.words.is_empty() && self.assignments.is_empty() && self.redirections.is_empty()
    }

    fn warn(&mut self, msg: &str) {
        if !self.warnings.iter().any(|w| w == msg) {
            self.warnings.push(msg.to_string());
        }
    }
}

struct Lexer<'a> {
    chars: Peekable<Chars<'a>>,
    offset: usize,
    word: Option<WordBuf>,
    seg: SegmentBuf,
    done: Vec<Segment>,
    /// Warnings raised before any segment existed to carry them.
    carry: Vec<String>,
}

impl<'a> Lexer<'a> {
    fn new(raw: &'a str) -> Self {
        Lexer {
            chars: raw.chars().peekable(),
            offset: 0,
            word: None,
            seg: SegmentBuf::default(),
            done: Vec::new(),
            carry: Vec::new(),
        }
    }

    fn next(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        self.offset += c.len_utf8();
        Some(c)
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.next();
            true
        } else {
            false
        }
    }

    fn word(&mut self) -> &mut WordBuf {
        self.word.get_or_insert_with(WordBuf::default)
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while let Some(c) = self.next() {
            match c {
                ' ' | '\t' | '\r' => self.finish_word(),
                '\n' => self.end_segment(Connector::Seq),
                '\'' => {
                    let start = self.offset - 1;
                    self.word().mark_quoted();
                    loop {
                        match self.next() {
                            Some('\'') => break,
                            Some(ch) => self.word().text.push(ch),
                            None => {
                                return Err(ParseError::UnbalancedQuote {
                                    quote: '\'',
                                    offset: start,
                                })
                            }
                        }
                    }
                }
                '"' => self.double_quoted()?,
                '\\' => match self.next() {
                    Some('\n') => {}
                    Some(ch) => {
                        let w = self.word();
                        w.mark_quoted();
                        w.text.push(ch);
                    }
                    None => self.word().text.push('\\'),
                },
                '$' => self.dollar()?,
                '`' => self.backtick()?,
                '&' => {
                    if self.eat('&') {
                        self.end_segment(Connector::And);
                    } else if self.eat('>') {
                        self.finish_word();
                        let append = self.eat('>');
                        self.seg.pending_dup = true;
                        self.seg.pending_redirect = Some(if append {
                            RedirectKind::StdoutAppend
                        } else {
                            RedirectKind::StdoutTrunc
                        });
                    } else {
                        self.seg.warn("background job (&) is not supported");
                        self.end_segment(Connector::Seq);
                    }
                }
                '|' => {
                    if self.eat('|') {
                        self.end_segment(Connector::Or);
                    } else {
                        if self.eat('&') {
                            self.seg.redirections.push(Redirection {
                                kind: RedirectKind::Duplicate,
                                target: "2>&1".into(),
                            });
                        }
                        self.end_segment(Connector::Pipe);
                    }
                }
                ';' => {
                    if self.eat(';') {
                        self.seg.warn("case terminator (;;) is not supported");
                    }
                    self.end_segment(Connector::Seq);
                }
                '>' | '<' => self.redirect(c),
                '(' | ')' => {
                    self.finish_word();
                    self.seg.warn("subshell or grouping is not supported");
                }
                '#' if self.word.is_none() => {
                    while let Some(ch) = self.peek() {
                        if ch == '\n' {
                            break;
                        }
                        self.next();
                    }
                }
                _ => self.word().text.push(c),
            }
        }
        Ok(())
    }

    fn double_quoted(&mut self) -> Result<(), ParseError> {
        let start = self.offset - 1;
        self.word().mark_quoted();
        loop {
            match self.next() {
                Some('"') => return Ok(()),
                Some('\\') => match self.next() {
                    Some(ch @ ('$' | '`' | '"' | '\\')) => self.word().text.push(ch),
                    Some('\n') => {}
                    Some(ch) => {
                        let w = self.word();
                        w.text.push('\\');
                        w.text.push(ch);
                    }
                    None => break,
                },
                Some('$') => self.dollar()?,
                Some('`') => self.backtick()?,
                Some(ch) => self.word().text.push(ch),
                None => break,
            }
        }
        Err(ParseError::UnbalancedQuote {
            quote: '"',
            offset: start,
        })
    }

    fn dollar(&mut self) -> Result<(), ParseError> {
        let start = self.offset - 1;
        match self.peek() {
            Some('(') => {
                self.next();
                self.word().text.push_str("$(");
                let mut depth = 1usize;
                while depth > 0 {
                    match self.next() {
                        Some(ch) => {
                            match ch {
                                '(' => depth += 1,
                                ')' => depth -= 1,
                                _ => {}
                            }
                            self.word().text.push(ch);
                        }
                        None => {
                            return Err(ParseError::UnbalancedQuote {
                                quote: '(',
                                offset: start,
                            })
                        }
                    }
                }
                self.seg.warn("command substitution $(...) is not supported");
            }
            Some('{') => {
                self.word().text.push('$');
                loop {
                    match self.next() {
                        Some(ch) => {
                            self.word().text.push(ch);
                            if ch == '}' {
                                break;
                            }
                        }
                        None => {
                            return Err(ParseError::UnbalancedQuote {
                                quote: '{',
                                offset: start,
                            })
                        }
                    }
                }
                self.seg.warn("variable expansion is not supported");
            }
            Some(ch) if ch.is_ascii_alphanumeric() || "_?@#*!$-".contains(ch) => {
                self.word().text.push('$');
                self.seg.warn("variable expansion is not supported");
            }
            _ => self.word().text.push('$'),
        }
        Ok(())
    }

    fn backtick(&mut self) -> Result<(), ParseError> {
        let start = self.offset - 1;
        self.word().text.push('`');
        loop {
            match self.next() {
                Some('`') => break,
                Some(ch) => self.word().text.push(ch),
                None => {
                    return Err(ParseError::UnbalancedQuote {
                        quote: '`',
                        offset: start,
                    })
                }
            }
        }
        self.word().text.push('`');
        self.seg.warn("backtick command substitution is not supported");
        Ok(())
    }

    fn redirect(&mut self, first: char) {
        // A bare run of digits immediately before the operator is a descriptor.
        let fd = match &self.word {
            Some(w) if !w.quoted && !w.text.is_empty() && w.text.bytes().all(|b| b.is_ascii_digit()) => {
                let fd = w.text.parse::<u32>().ok();
                self.word = None;
                fd
            }
            _ => {
                self.finish_word();
                None
            }
        };
        let kind = if first == '>' {
            self.eat('|');
            if self.eat('&') {
                let mut target = String::new();
                while let Some(ch) = self.peek() {
                    if ch.is_ascii_digit() || ch == '-' {
                        target.push(ch);
                        self.next();
                    } else {
                        break;
                    }
                }
                if target.is_empty() {
                    // `>&file` writes both streams to a file.
                    self.seg.pending_dup = true;
                    self.seg.pending_redirect = Some(RedirectKind::StdoutTrunc);
                    return;
                }
                let src = fd.unwrap_or(1);
                self.seg.redirections.push(Redirection {
                    kind: RedirectKind::Duplicate,
                    target: format!("{src}>&{target}"),
                });
                return;
            }
            let append = self.eat('>');
            match (fd, append) {
                (Some(2), false) => RedirectKind::StderrTrunc,
                (Some(2), true) => RedirectKind::StderrAppend,
                (None | Some(1), false) => RedirectKind::StdoutTrunc,
                (None | Some(1), true) => RedirectKind::StdoutAppend,
                (Some(_), append) => {
                    self.seg.warn("redirection of non-standard descriptor is not supported");
                    if append {
                        RedirectKind::StdoutAppend
                    } else {
                        RedirectKind::StdoutTrunc
                    }
                }
            }
        } else if self.eat('<') {
            self.eat('<');
            self.eat('-');
            self.seg.warn("heredoc is not supported");
            RedirectKind::Heredoc
        } else if self.eat('&') {
            self.seg.warn("input descriptor duplication is not supported");
            RedirectKind::Stdin
        } else if self.eat('>') {
            self.seg.warn("read-write redirection is not supported");
            RedirectKind::StdoutTrunc
        } else {
            if !matches!(fd, None | Some(0)) {
                self.seg.warn("redirection of non-standard descriptor is not supported");
            }
            RedirectKind::Stdin
        };
        self.seg.pending_redirect = Some(kind);
    }

    fn finish_word(&mut self) {
        let Some(w) = self.word.take() else { return };
        if let Some(kind) = self.seg.pending_redirect.take() {
            self.seg.redirections.push(Redirection {
                kind,
                target: w.text,
            });
            if std::mem::take(&mut self.seg.pending_dup) {
                self.seg.redirections.push(Redirection {
                    kind: RedirectKind::Duplicate,
                    target: "2>&1".into(),
                });
            }
            return;
        }
        if !w.quoted && (w.text == "{" || w.text == "}") {
            self.seg.warn("brace grouping is not supported");
            return;
        }
        if self.seg.words.is_empty() {
            if let Some((name, value)) = split_assignment(&w) {
                self.seg.assignments.push((name, value));
                self.seg.warn("environment assignment prefix is not supported");
                return;
            }
        }
        self.seg.words.push(w.text);
    }

    fn end_segment(&mut self, connector: Connector) {
        self.finish_word();
        self.seg.pending_dup = false;
        if self.seg.pending_redirect.take().is_some() {
            self.seg.warn("redirection without a target");
        }
        let mut seg = std::mem::take(&mut self.seg);
        if seg.is_empty() {
            // Nothing between two connectors (or a leading connector). A newline
            // or `;` on its own is harmless; anything else is malformed.
            let mut warnings = seg.warnings;
            if !matches!(connector, Connector::Seq | Connector::None) || !warnings.is_empty() {
                warnings.push(format!(
                    "connector {} without a command",
                    connector.as_shell()
                ));
            }
            match self.done.last_mut() {
                Some(prev) if !warnings.is_empty() => {
                    for w in warnings {
                        if !prev.warnings.contains(&w) {
                            prev.warnings.push(w);
                        }
                    }
                }
                _ => self.carry.extend(warnings),
            }
            return;
        }
        if seg.words.is_empty() {
            if seg.redirections.is_empty() {
                // Bare assignments: keep them visible as the command itself.
                seg.words = seg
                    .assignments
                    .drain(..)
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
            } else {
                seg.words.push(":".to_string());
                seg.warn("redirection without a command");
            }
        }
        let mut warnings = std::mem::take(&mut self.carry);
        for w in seg.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        self.done.push(Segment {
            argv: seg.words,
            assignments: seg.assignments,
            connector_to_next: connector,
            redirections: seg.redirections,
            warnings,
        });
    }

    fn finish(mut self) -> Vec<Segment> {
        self.end_segment(Connector::None);
        if let Some(last) = self.done.last_mut() {
            match last.connector_to_next {
                Connector::And | Connector::Or | Connector::Pipe => {
                    let w = format!(
                        "dangling connector {}",
                        last.connector_to_next.as_shell()
                    );
                    last.warnings.push(w);
                }
                _ => {}
            }
            last.connector_to_next = Connector::None;
        }
        self.done
    }
}

fn split_assignment(w: &WordBuf) -> Option<(String, String)> {
    let plain = w.plain_part();
    let eq = plain.find('=')?;
    let name = &plain[..eq];
    let mut chars = name.chars();
    let first = chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_')
        || !chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    {
        return None;
    }
    Some((name.to_string(), w.text[eq + 1..].to_string()))
}
