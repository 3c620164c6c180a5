//! Lexer and recursive-descent parser. Errors carry the byte offset of the
//! offending token (end-of-input errors point one past the last byte).

use super::{BinOp, Expr, Func1, Func2};
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
    Comma,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        let trimmed = rest.trim_start();
        self.pos += rest.len() - trimmed.len();
    }

    /// Next token with its starting byte offset. `None` at end of input.
    fn next(&mut self) -> Result<Option<(Tok, usize)>> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let mut chars = rest.chars();
        let c = match chars.next() {
            None => return Ok(None),
            Some(c) => c,
        };
        let simple = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = simple {
            self.pos += c.len_utf8();
            return Ok(Some((tok, start)));
        }
        if c.is_ascii_digit() || c == '.' {
            let len = number_len(rest);
            let text = &rest[..len];
            let value: f64 = text.parse().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number literal `{text}`"),
            })?;
            if !value.is_finite() {
                return Err(Error::Syntax {
                    offset: start,
                    message: format!("number literal `{text}` overflows"),
                });
            }
            self.pos += len;
            return Ok(Some((Tok::Num(value), start)));
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let len = rest
                .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                .unwrap_or(rest.len());
            self.pos += len;
            return Ok(Some((Tok::Ident(rest[..len].to_string()), start)));
        }
        Err(Error::Syntax {
            offset: start,
            message: format!("unexpected character `{c}`"),
        })
    }
}

fn number_len(s: &str) -> usize {
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

pub(super) fn parse(source: &str, dim: usize) -> Result<Expr> {
    let mut lexer = Lexer::new(source);
    let mut tokens = Vec::new();
    while let Some(t) = lexer.next()? {
        tokens.push(t);
    }
    let mut p = Parser {
        tokens,
        idx: 0,
        end: source.len(),
        dim,
    };
    let ast = p.expr()?;
    if let Some((tok, offset)) = p.peek() {
        return Err(Error::Syntax {
            offset,
            message: format!("unexpected trailing token {}", describe(&tok)),
        });
    }
    Ok(ast)
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v) => format!("number `{v}`"),
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Caret => "`^`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Comma => "`,`".into(),
    }
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    idx: usize,
    end: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<(Tok, usize)> {
        self.tokens.get(self.idx).cloned()
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.peek();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        match self.bump() {
            Some((tok, _)) if tok == want => Ok(()),
            Some((tok, offset)) => Err(Error::Syntax {
                offset,
                message: format!("expected {what}, found {}", describe(&tok)),
            }),
            None => Err(Error::Syntax {
                offset: self.end,
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.idx += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.idx += 1;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    /// `factor := '-' factor | power`. A literal directly under unary minus
    /// folds to a negative constant so printing and reparsing agree.
    fn factor(&mut self) -> Result<Expr> {
        if let Some((Tok::Minus, _)) = self.peek() {
            self.idx += 1;
            let inner = self.factor()?;
            return Ok(match inner {
                Expr::Const(v) => Expr::Const(-v),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.idx += 1;
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(Expr::Const(v)),
            Some((Tok::LParen, _)) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some((Tok::Ident(name), offset)) => {
                if let Some((Tok::LParen, _)) = self.peek() {
                    self.call(&name, offset)
                } else {
                    self.variable(&name, offset)
                }
            }
            Some((tok, offset)) => Err(Error::Syntax {
                offset,
                message: format!("expected a value, found {}", describe(&tok)),
            }),
            None => Err(Error::Syntax {
                offset: self.end,
                message: "expected a value, found end of input".into(),
            }),
        }
    }

    fn call(&mut self, name: &str, offset: usize) -> Result<Expr> {
        self.expect(Tok::LParen, "`(`")?;
        let first = self.expr()?;
        let second = if let Some((Tok::Comma, _)) = self.peek() {
            self.idx += 1;
            Some(self.expr()?)
        } else {
            None
        };
        self.expect(Tok::RParen, "`)`")?;

        let f1 = match name {
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "exp" => Some(Func1::Exp),
            "log" => Some(Func1::Log),
            "tanh" => Some(Func1::Tanh),
            "abs" => Some(Func1::Abs),
            "sign" => Some(Func1::Sign),
            "sqrt" => Some(Func1::Sqrt),
            _ => None,
        };
        if let Some(f) = f1 {
            return match second {
                None => Ok(Expr::Call1(f, Box::new(first))),
                Some(_) => Err(Error::Syntax {
                    offset,
                    message: format!("{name} expects 1 argument"),
                }),
            };
        }
        let f2 = match name {
            "min" => Some(Func2::Min),
            "max" => Some(Func2::Max),
            _ => None,
        };
        if let Some(f) = f2 {
            return match second {
                Some(s) => Ok(Expr::Call2(f, Box::new(first), Box::new(s))),
                None => Err(Error::Syntax {
                    offset,
                    message: format!("{name} expects 2 arguments"),
                }),
            };
        }
        if name == "step" {
            // step(t) = 0.5*(sign(t)+1)
            return match second {
                None => Ok(Expr::Bin(
                    BinOp::Mul,
                    Box::new(Expr::Const(0.5)),
                    Box::new(Expr::Bin(
                        BinOp::Add,
                        Box::new(Expr::Call1(Func1::Sign, Box::new(first))),
                        Box::new(Expr::Const(1.0)),
                    )),
                )),
                Some(_) => Err(Error::Syntax {
                    offset,
                    message: "step expects 1 argument".into(),
                }),
            };
        }
        Err(Error::UnknownIdentifier {
            name: name.to_string(),
            offset,
        })
    }

    fn variable(&mut self, name: &str, offset: usize) -> Result<Expr> {
        if name == "x" {
            if self.dim == 1 {
                return Ok(Expr::Var(0));
            }
            return Err(Error::UnknownIdentifier {
                name: format!("{name} (use x1..x{} in dimension {})", self.dim, self.dim),
                offset,
            });
        }
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = rest.parse().map_err(|_| Error::VariableOutOfRange {
                    name: name.to_string(),
                    offset,
                    dim: self.dim,
                })?;
                if index >= 1 && index <= self.dim {
                    return Ok(Expr::Var(index - 1));
                }
                return Err(Error::VariableOutOfRange {
                    name: name.to_string(),
                    offset,
                    dim: self.dim,
                });
            }
        }
        Err(Error::UnknownIdentifier {
            name: name.to_string(),
            offset,
        })
    }
}
