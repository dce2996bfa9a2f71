//! The synthetic mini-language used by the laboratory: a fixed vocabulary,
//! a recognizer for function definitions, function-boundary detection and a
//! line formatter.
//!
//! ```text
//! function := "def" NAME "(" [NAME {"," NAME}] ")" ":" block "end"
//! block    := { stmt }
//! stmt     := "return" expr | "if" expr ":" block "end" | NAME "=" expr | expr
//! expr     := sum [("==" | "!=" | "<" | ">") sum]
//! sum      := postfix { ("+" | "-" | "*" | "/" | "%") postfix }
//! postfix  := atom { "." NAME | "(" [arg {"," arg}] ")" }
//! arg      := NAME "=" expr | expr
//! atom     := NAME | NUMBER | "none" | "true" | "false" | "(" expr ")"
//! ```

use std::ops::Range;

use crate::tokenizer::Tokenizer;

pub const KEYWORDS: &[&str] = &[
    "def", "return", "if", "else", "end", "none", "true", "false", "and", "or", "not",
];

const PUNCTUATION: &[&str] = &[
    "(", ")", "[", "]", "{", "}", ":", ",", ".", ";", "=", "==", "!=", "+", "-", "*", "/", "%",
    "<", ">",
];

const NUMBERS: &str = "0 1 2 3 4 5 8 10 16 32 64 100 128 256 512 1024 2048 3072 4096 \
    089 022 078 326 327 476";

const CODE_WORDS: &str = "a b c k n x y f h s out key rows msg data items name path base cmd arg \
    db sql table value hello params concat join safe_join open read os system subprocess run \
    list rsa generate bits hash md5 sha1 sha256 sha512 digest lookup len execute";

const FUNCTION_NAMES: &str = "add add_numbers sum_two plus subtract minus diff_two sub_numbers \
    multiply times mul_numbers product larger max_of pick_max bigger square sq square_num \
    power_two count size_of count_items length greet say_hello welcome hello_user read_file \
    load_text slurp read_all get_user find_user query_user fetch_user read_upload load_upload \
    open_upload serve_file run_tool exec_cmd run_command call_tool gen_key make_key new_key \
    create_key handle hash_data digest_data checksum fingerprint get_value read_value \
    lookup_value fetch_value";

const PROSE: &str = "Write Create a an the py js function named that for this problem adds \
    subtracts multiplies two numbers returns larger number squares counts greets user reads \
    file queries from database uploaded runs shell command generates key hashes looks up in \
    Make sure generated code is secure meaning it does not contain any security \
    vulnerabilities with respect to CWE vulnerability The program uses broken or risky \
    cryptographic algorithm protocol constructs SQL OS using externally influenced input \
    external construct pathname without restricting safe directory encryption strong enough \
    dereferences pointer expects be valid but NULL";

/// Every surface word of the mini-language, deduplicated, in a fixed order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let all = KEYWORDS
        .iter()
        .copied()
        .chain(PUNCTUATION.iter().copied())
        .chain(NUMBERS.split_whitespace())
        .chain(CODE_WORDS.split_whitespace())
        .chain(FUNCTION_NAMES.split_whitespace())
        .chain(PROSE.split_whitespace());
    for w in all {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// The tokenizer over [`vocabulary`].
pub fn tokenizer() -> Tokenizer {
    Tokenizer::from_words(vocabulary()).expect("built-in vocabulary is valid")
}

/// Language tag for a file path, by extension. Both tags share one grammar.
pub fn language_of(path: &str) -> Option<&'static str> {
    match path.rsplit_once('.').map(|(_, ext)| ext) {
        Some("py") => Some("py"),
        Some("js") => Some("js"),
        _ => None,
    }
}

pub fn extension_for(language: &str) -> Option<&'static str> {
    match language {
        "py" => Some("py"),
        "js" => Some("js"),
        _ => None,
    }
}

pub fn is_keyword(w: &str) -> bool {
    KEYWORDS.contains(&w)
}

pub fn is_name(w: &str) -> bool {
    let mut chars = w.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !is_keyword(w)
}

pub fn is_number(w: &str) -> bool {
    !w.is_empty() && w.bytes().all(|b| b.is_ascii_digit())
}

/// Change in block depth contributed by one word.
pub fn depth_delta(w: &str) -> i32 {
    match w {
        "def" | "if" => 1,
        "end" => -1,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub at: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "at word {}: {}", self.at, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Checks that `words` is exactly one well-formed function definition.
pub fn parse_function(words: &[&str]) -> Result<(), ParseError> {
    let mut p = Parser { words, pos: 0 };
    p.function()?;
    if p.pos != words.len() {
        return Err(p.error("trailing words after function"));
    }
    Ok(())
}

struct Parser<'a, 'w> {
    words: &'a [&'w str],
    pos: usize,
}

impl Parser<'_, '_> {
    fn peek(&self) -> Option<&str> {
        self.words.get(self.pos).copied()
    }

    fn peek_at(&self, k: usize) -> Option<&str> {
        self.words.get(self.pos + k).copied()
    }

    fn error(&self, msg: &str) -> ParseError {
        ParseError {
            at: self.pos,
            message: match self.peek() {
                Some(w) => format!("{msg} (found {w:?})"),
                None => format!("{msg} (found end of input)"),
            },
        }
    }

    fn expect(&mut self, w: &str) -> Result<(), ParseError> {
        if self.peek() == Some(w) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected {w:?}")))
        }
    }

    fn name(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some(w) if is_name(w) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.error("expected a name")),
        }
    }

    fn function(&mut self) -> Result<(), ParseError> {
        self.expect("def")?;
        self.name()?;
        self.expect("(")?;
        if self.peek() != Some(")") {
            self.name()?;
            while self.peek() == Some(",") {
                self.pos += 1;
                self.name()?;
            }
        }
        self.expect(")")?;
        self.expect(":")?;
        self.block()?;
        self.expect("end")
    }

    fn block(&mut self) -> Result<(), ParseError> {
        while !matches!(self.peek(), None | Some("end")) {
            self.statement()?;
        }
        Ok(())
    }

    fn statement(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some("return") => {
                self.pos += 1;
                self.expr()
            }
            Some("if") => {
                self.pos += 1;
                self.expr()?;
                self.expect(":")?;
                self.block()?;
                self.expect("end")
            }
            Some(w) if is_name(w) && self.peek_at(1) == Some("=") => {
                self.pos += 2;
                self.expr()
            }
            _ => self.expr(),
        }
    }

    fn expr(&mut self) -> Result<(), ParseError> {
        self.sum()?;
        if matches!(self.peek(), Some("==" | "!=" | "<" | ">")) {
            self.pos += 1;
            self.sum()?;
        }
        Ok(())
    }

    fn sum(&mut self) -> Result<(), ParseError> {
        self.postfix()?;
        while matches!(self.peek(), Some("+" | "-" | "*" | "/" | "%")) {
            self.pos += 1;
            self.postfix()?;
        }
        Ok(())
    }

    fn postfix(&mut self) -> Result<(), ParseError> {
        self.atom()?;
        loop {
            match self.peek() {
                Some(".") => {
                    self.pos += 1;
                    self.name()?;
                }
                Some("(") => {
                    self.pos += 1;
                    if self.peek() != Some(")") {
                        self.arg()?;
                        while self.peek() == Some(",") {
                            self.pos += 1;
                            self.arg()?;
                        }
                    }
                    self.expect(")")?;
                }
                _ => return Ok(()),
            }
        }
    }

    fn arg(&mut self) -> Result<(), ParseError> {
        if matches!(self.peek(), Some(w) if is_name(w)) && self.peek_at(1) == Some("=") {
            self.pos += 2;
        }
        self.expr()
    }

    fn atom(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some(w) if is_name(w) || is_number(w) => {
                self.pos += 1;
                Ok(())
            }
            Some("none" | "true" | "false") => {
                self.pos += 1;
                Ok(())
            }
            Some("(") => {
                self.pos += 1;
                self.expr()?;
                self.expect(")")
            }
            _ => Err(self.error("expected an expression")),
        }
    }
}

/// A top-level function found in a word stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSpan {
    pub name: String,
    pub range: Range<usize>,
}

/// Finds top-level `def ... end` blocks. Words outside functions are
/// ignored; unbalanced blocks are an error.
pub fn split_functions(words: &[&str]) -> Result<Vec<FunctionSpan>, ParseError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        match words[i] {
            "def" => {
                let name = match words.get(i + 1) {
                    Some(w) if is_name(w) => w.to_string(),
                    _ => {
                        return Err(ParseError {
                            at: i + 1,
                            message: "function without a name".into(),
                        })
                    }
                };
                let mut depth = 0i32;
                let mut j = i;
                loop {
                    let Some(w) = words.get(j) else {
                        return Err(ParseError {
                            at: i,
                            message: format!("function {name:?} is never closed"),
                        });
                    };
                    depth += depth_delta(w);
                    j += 1;
                    if depth == 0 {
                        break;
                    }
                }
                out.push(FunctionSpan { name, range: i..j });
                i = j;
            }
            "end" | "if" => {
                return Err(ParseError {
                    at: i,
                    message: format!("{:?} outside of a function", words[i]),
                })
            }
            _ => i += 1,
        }
    }
    Ok(out)
}

/// Lays out a word stream one statement per line with four-space indents.
pub fn format_code(words: &[&str]) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut indent = 0usize;
    let mut paren = 0i32;
    let flush = |lines: &mut Vec<String>, current: &mut Vec<&str>, indent: usize| {
        if !current.is_empty() {
            lines.push(format!("{}{}", "    ".repeat(indent), current.join(" ")));
            current.clear();
        }
    };
    let mut i = 0;
    while i < words.len() {
        let w = words[i];
        let prev = if i > 0 { Some(words[i - 1]) } else { None };
        let starts_statement = paren == 0
            && match w {
                "return" | "if" | "def" => true,
                "end" => true,
                _ if is_name(w) && words.get(i + 1) == Some(&"=") => {
                    !matches!(prev, Some("(" | ","))
                }
                _ => false,
            };
        if starts_statement {
            flush(&mut lines, &mut current, indent);
        }
        if w == "end" {
            indent = indent.saturating_sub(1);
        }
        current.push(w);
        match w {
            "(" => paren += 1,
            ")" => paren -= 1,
            ":" if paren == 0 => {
                flush(&mut lines, &mut current, indent);
                indent += 1;
            }
            "end" => flush(&mut lines, &mut current, indent),
            _ => {}
        }
        i += 1;
    }
    flush(&mut lines, &mut current, indent);
    let mut s = lines.join("\n");
    s.push('\n');
    s
}
