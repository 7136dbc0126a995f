//! Safe arithmetic expression evaluation (`+ - * /`, parentheses, unary sign).

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithError(pub String);

impl fmt::Display for ArithError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ArithError {}

const MAX_DEPTH: usize = 64;

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    depth: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<f64, ArithError> {
        let mut acc = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if op == b'+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<f64, ArithError> {
        let mut acc = self.factor()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            if op == b'/' {
                if rhs == 0.0 {
                    return Err(ArithError("division by zero".into()));
                }
                acc /= rhs;
            } else {
                acc *= rhs;
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<f64, ArithError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ArithError("expression nested too deeply".into()));
        }
        let out = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                self.factor().map(|v| -v)
            }
            Some(b'+') => {
                self.pos += 1;
                self.factor()
            }
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(ArithError(format!("expected ')' at {}", self.pos)));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) => Err(ArithError(format!(
                "unexpected '{}' at {}",
                c as char, self.pos
            ))),
            None => Err(ArithError("unexpected end of expression".into())),
        };
        self.depth -= 1;
        out
    }

    fn number(&mut self) -> Result<f64, ArithError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        text.parse::<f64>()
            .map_err(|_| ArithError(format!("bad number '{text}'")))
    }
}

/// Evaluates an arithmetic expression.
pub fn evaluate(expr: &str) -> Result<f64, ArithError> {
    let mut p = Parser {
        src: expr.as_bytes(),
        pos: 0,
        depth: 0,
    };
    let v = p.expr()?;
    if p.peek().is_some() {
        return Err(ArithError(format!("trailing input at {}", p.pos)));
    }
    if !v.is_finite() {
        return Err(ArithError("non-finite result".into()));
    }
    Ok(v)
}

/// Canonical text for a number: integers without a fractional part, other
/// values in shortest round-trip form.
pub fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// First substring of `text` that looks like a compound arithmetic expression
/// (at least one digit and one binary operator) and evaluates cleanly.
pub fn find_expression(text: &str) -> Option<(String, f64)> {
    let is_expr_char = |c: char| c.is_ascii_digit() || "+-*/(). ".contains(c);
    let mut rest = text;
    while !rest.is_empty() {
        let Some(start) = rest.find(|c: char| c.is_ascii_digit() || c == '(' || c == '-') else {
            break;
        };
        let tail = &rest[start..];
        let end = tail.find(|c: char| !is_expr_char(c)).unwrap_or(tail.len());
        let candidate = tail[..end].trim().trim_end_matches('.').trim();
        let has_digit = candidate.chars().any(|c| c.is_ascii_digit());
        let has_op = candidate
            .char_indices()
            .any(|(i, c)| i > 0 && "+-*/".contains(c));
        if has_digit && has_op {
            if let Ok(v) = evaluate(candidate) {
                return Some((candidate.to_string(), v));
            }
        }
        let advance = start + end.max(1);
        rest = rest.get(advance..).unwrap_or("");
    }
    None
}
