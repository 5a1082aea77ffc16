//! A small arithmetic expression grammar for inline coefficient definitions.
//!
//! Grammar (precedence climbing):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := ('-' | '+') factor | power
//! power  := atom ('^' factor)?
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Identifiers: variables `x1..x{d_x}`, `y1..y{d_y}` (aliases `x` = `x1`,
//! `y` = `y1`) and the functions `tanh`, `exp`, `sin`, `cos`, `sqrt`, `abs`,
//! `log`. Boundedness of what the user writes stays the user's assertion.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '+' || chars[i] == '-')
                            && i > start
                            && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v = text
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number literal {text:?}")))?;
                out.push(Tok::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => {
                return Err(Error::Parse(format!("unexpected character {other:?}")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Fun(Fun, Box<Node>),
}

#[derive(Debug, Clone, Copy)]
enum Fun {
    Tanh,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Log,
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    d_x: usize,
    d_y: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(found) if found == t => Ok(()),
            other => Err(Error::Parse(format!("expected {t:?}, found {other:?}"))),
        }
    }

    fn var_index(&self, name: &str) -> Result<usize> {
        let parse_idx = |s: &str, max: usize, kind: &str| -> Result<usize> {
            let idx: usize = s
                .parse()
                .map_err(|_| Error::Parse(format!("bad variable index in {kind}{s}")))?;
            if idx == 0 || idx > max {
                return Err(Error::Parse(format!(
                    "{kind}{idx} out of range (have {max})"
                )));
            }
            Ok(idx - 1)
        };
        if name == "x" {
            parse_idx("1", self.d_x, "x")
        } else if name == "y" {
            parse_idx("1", self.d_y, "y").map(|i| self.d_x + i)
        } else if let Some(rest) = name.strip_prefix('x') {
            parse_idx(rest, self.d_x, "x")
        } else if let Some(rest) = name.strip_prefix('y') {
            parse_idx(rest, self.d_y, "y").map(|i| self.d_x + i)
        } else {
            Err(Error::Parse(format!("unknown identifier {name:?}")))
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::LParen) {
                    let fun = match name.as_str() {
                        "tanh" => Fun::Tanh,
                        "exp" => Fun::Exp,
                        "sin" => Fun::Sin,
                        "cos" => Fun::Cos,
                        "sqrt" => Fun::Sqrt,
                        "abs" => Fun::Abs,
                        "log" => Fun::Log,
                        other => {
                            return Err(Error::Parse(format!("unknown function {other:?}")))
                        }
                    };
                    self.next();
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(Node::Fun(fun, Box::new(arg)))
                } else {
                    Ok(Node::Var(self.var_index(&name)?))
                }
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.next();
            let exp = self.factor()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn factor(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.next();
                Ok(Node::Neg(Box::new(self.factor()?)))
            }
            Some(Tok::Plus) => {
                self.next();
                self.factor()
            }
            _ => self.power(),
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.next();
                    node = Node::Mul(Box::new(node), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.next();
                    node = Node::Div(Box::new(node), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(node)
    }

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.next();
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.next();
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(node)
    }
}

fn eval(node: &Node, vars: &[f64]) -> f64 {
    match node {
        Node::Const(v) => *v,
        Node::Var(i) => vars[*i],
        Node::Neg(a) => -eval(a, vars),
        Node::Add(a, b) => eval(a, vars) + eval(b, vars),
        Node::Sub(a, b) => eval(a, vars) - eval(b, vars),
        Node::Mul(a, b) => eval(a, vars) * eval(b, vars),
        Node::Div(a, b) => eval(a, vars) / eval(b, vars),
        Node::Pow(a, b) => eval(a, vars).powf(eval(b, vars)),
        Node::Fun(f, a) => {
            let v = eval(a, vars);
            match f {
                Fun::Tanh => v.tanh(),
                Fun::Exp => v.exp(),
                Fun::Sin => v.sin(),
                Fun::Cos => v.cos(),
                Fun::Sqrt => v.sqrt(),
                Fun::Abs => v.abs(),
                Fun::Log => v.ln(),
            }
        }
    }
}

/// A compiled scalar expression over `(x1..x{d_x}, y1..y{d_y})`.
#[derive(Debug, Clone)]
pub struct Expr {
    node: std::sync::Arc<Node>,
    pub source: String,
    pub n_vars: usize,
}

impl Expr {
    pub fn parse(src: &str, d_x: usize, d_y: usize) -> Result<Self> {
        let toks = tokenize(src)?;
        let mut p = Parser {
            toks: &toks,
            pos: 0,
            d_x,
            d_y,
        };
        let node = p.expr()?;
        if p.pos != toks.len() {
            return Err(Error::Parse(format!(
                "trailing tokens after expression in {src:?}"
            )));
        }
        Ok(Expr {
            node: std::sync::Arc::new(node),
            source: src.to_string(),
            n_vars: d_x + d_y,
        })
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        debug_assert_eq!(vars.len(), self.n_vars);
        eval(&self.node, vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2*3 - 4/2", 1, 1).unwrap();
        assert_eq!(e.eval(&[0.0, 0.0]), 5.0);
        let e = Expr::parse("-x^2", 1, 0).unwrap();
        assert_eq!(e.eval(&[3.0]), -9.0);
        let e = Expr::parse("(1+y1)*(1-y1)", 0, 1).unwrap();
        assert_eq!(e.eval(&[0.5]), 0.75);
    }

    #[test]
    fn variables_and_functions() {
        let e = Expr::parse("0.5*tanh(x1) + sin(y2)", 1, 2).unwrap();
        let v = e.eval(&[0.7, 0.0, 1.2]);
        assert!((v - (0.5 * 0.7f64.tanh() + 1.2f64.sin())).abs() < 1e-15);
        // x aliases x1, y aliases y1
        let e = Expr::parse("x + y", 1, 1).unwrap();
        assert_eq!(e.eval(&[2.0, 3.0]), 5.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("x3", 2, 0).is_err());
        assert!(Expr::parse("foo(x)", 1, 0).is_err());
        assert!(Expr::parse("1 +", 1, 0).is_err());
        assert!(Expr::parse("x $ y", 1, 1).is_err());
        assert!(Expr::parse("(x", 1, 0).is_err());
    }
}
