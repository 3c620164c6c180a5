//! A small expression language for model coefficients.
//!
//! Coefficients (drift components, diffusion entries, potential, source) are
//! written as strings over the variables `x1..xd` (`x` is accepted as an
//! alias for `x1` when the dimension is 1), numeric literals, the binary
//! operators `+ - * / ^`, unary minus, and a fixed function set:
//! `sin cos exp log tanh abs sign sqrt min max`. `step(t)` is accepted as an
//! alias and desugars to `0.5*(sign(t)+1)` at parse time. `^` is
//! right-associative and binds tighter than unary minus, so `-x^2` means
//! `-(x^2)`.
//!
//! Domain violations (division by zero, `log` of a non-positive value,
//! `sqrt` of a negative value, a negative base under a non-integer exponent)
//! are reported as evaluation errors rather than silent NaNs.

mod compile;
mod parse;

pub use compile::{CompiledExpr, EvalScratch};

use crate::error::{EvalError, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Abs,
    Sign,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
}

impl Func1 {
    pub fn name(self) -> &'static str {
        match self {
            Func1::Sin => "sin",
            Func1::Cos => "cos",
            Func1::Exp => "exp",
            Func1::Log => "log",
            Func1::Tanh => "tanh",
            Func1::Abs => "abs",
            Func1::Sign => "sign",
            Func1::Sqrt => "sqrt",
        }
    }

    pub(crate) fn apply(self, v: f64) -> std::result::Result<f64, EvalError> {
        match self {
            Func1::Sin => Ok(v.sin()),
            Func1::Cos => Ok(v.cos()),
            Func1::Exp => Ok(v.exp()),
            Func1::Log => {
                if v <= 0.0 {
                    Err(EvalError::LogNonPositive(v))
                } else {
                    Ok(v.ln())
                }
            }
            Func1::Tanh => Ok(v.tanh()),
            Func1::Abs => Ok(v.abs()),
            Func1::Sign => Ok(sign(v)),
            Func1::Sqrt => {
                if v < 0.0 {
                    Err(EvalError::SqrtNegative(v))
                } else {
                    Ok(v.sqrt())
                }
            }
        }
    }
}

impl Func2 {
    pub fn name(self) -> &'static str {
        match self {
            Func2::Min => "min",
            Func2::Max => "max",
        }
    }

    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Func2::Min => a.min(b),
            Func2::Max => a.max(b),
        }
    }
}

/// `sign(0) = 0`; NaN propagates. (`f64::signum` maps 0 to 1, which is not
/// what indicator-style potentials want.)
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else if v == 0.0 {
        0.0
    } else {
        f64::NAN
    }
}

pub(crate) fn binop(op: BinOp, l: f64, r: f64) -> std::result::Result<f64, EvalError> {
    match op {
        BinOp::Add => Ok(l + r),
        BinOp::Sub => Ok(l - r),
        BinOp::Mul => Ok(l * r),
        BinOp::Div => {
            if r == 0.0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(l / r)
            }
        }
        BinOp::Pow => {
            if l < 0.0 && r.fract() != 0.0 {
                Err(EvalError::PowDomain {
                    base: l,
                    exponent: r,
                })
            } else if r.fract() == 0.0 && r.abs() <= 4.0 {
                // Small integer exponents by repeated multiplication: far
                // cheaper than powf inside simulation loops, and the same
                // code path everywhere keeps evaluation deterministic.
                let mut v = 1.0;
                for _ in 0..(r.abs() as u32) {
                    v *= l;
                }
                Ok(if r < 0.0 { 1.0 / v } else { v })
            } else {
                Ok(l.powf(r))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call1(Func1, Box<Expr>),
    Call2(Func2, Box<Expr>, Box<Expr>),
}

/// A parsed, immutable coefficient expression tied to a space dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    ast: Expr,
    dim: usize,
}

impl Expression {
    /// Parse `source` over variables `x1..x<dim>`.
    pub fn parse(source: &str, dim: usize) -> Result<Expression> {
        let ast = parse::parse(source, dim)?;
        Ok(Expression { ast, dim })
    }

    pub fn constant(value: f64, dim: usize) -> Expression {
        Expression {
            ast: Expr::Const(value),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// Tree-walking evaluation. Adequate for cold paths; simulation loops
    /// should go through [`Expression::compile`].
    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dim {
            return Err(EvalError::PointDimension {
                got: point.len(),
                want: self.dim,
            }
            .into());
        }
        Ok(eval_node(&self.ast, point)?)
    }

    pub fn compile(&self) -> CompiledExpr {
        compile::compile(self)
    }

    /// `Some(v)` when the expression does not read any variable, in which
    /// case it evaluates to `v` everywhere (or fails everywhere; constant
    /// folding only applies to cheap literal trees, see `compile`).
    pub fn as_constant(&self) -> Option<f64> {
        self.compile().as_constant()
    }

    /// Canonical text form; reparsing it yields a structurally identical
    /// expression.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        print_node(&self.ast, 1, &mut out);
        out
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}

fn eval_node(node: &Expr, point: &[f64]) -> std::result::Result<f64, EvalError> {
    match node {
        Expr::Const(v) => Ok(*v),
        Expr::Var(i) => Ok(point[*i]),
        Expr::Neg(e) => Ok(-eval_node(e, point)?),
        Expr::Bin(op, l, r) => binop(*op, eval_node(l, point)?, eval_node(r, point)?),
        Expr::Call1(f, e) => f.apply(eval_node(e, point)?),
        Expr::Call2(f, a, b) => Ok(f.apply(eval_node(a, point)?, eval_node(b, point)?)),
    }
}

/// Binding strength used by both the parser and the printer:
/// `+ -` = 1, `* /` = 2, unary minus = 3, `^` = 4, atoms = 5.
fn prec(node: &Expr) -> u8 {
    match node {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        Expr::Const(v) if *v < 0.0 => 3,
        _ => 5,
    }
}

fn print_node(node: &Expr, min_prec: u8, out: &mut String) {
    let p = prec(node);
    let parens = p < min_prec;
    if parens {
        out.push('(');
    }
    match node {
        Expr::Const(v) => {
            // `{}` on f64 is the shortest representation that reparses to
            // the same value.
            out.push_str(&format!("{v}"));
        }
        Expr::Var(i) => {
            out.push('x');
            out.push_str(&(i + 1).to_string());
        }
        Expr::Neg(e) => {
            out.push('-');
            print_node(e, 3, out);
        }
        Expr::Bin(op, l, r) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 1, 2),
                BinOp::Sub => ("-", 1, 2),
                BinOp::Mul => ("*", 2, 3),
                BinOp::Div => ("/", 2, 3),
                // Left operand of `^` must be an atom; right operand may be a
                // unary-minus factor, which keeps `x^y^z` right-associative.
                BinOp::Pow => ("^", 5, 3),
            };
            print_node(l, lp, out);
            out.push_str(sym);
            print_node(r, rp, out);
        }
        Expr::Call1(f, e) => {
            out.push_str(f.name());
            out.push('(');
            print_node(e, 1, out);
            out.push(')');
        }
        Expr::Call2(f, a, b) => {
            out.push_str(f.name());
            out.push('(');
            print_node(a, 1, out);
            out.push(',');
            print_node(b, 1, out);
            out.push(')');
        }
    }
    if parens {
        out.push(')');
    }
}
