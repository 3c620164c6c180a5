//! Flat postfix form of an expression for simulation loops. Tree walking
//! costs a pointer chase per node; the tape below evaluates with a dense
//! `match` over a reusable stack and no per-call allocation.

use super::{binop, BinOp, Expr, Expression, Func1, Func2};
use crate::error::EvalError;

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(u32),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Abs,
    Sign,
    Sqrt,
    Min,
    Max,
}

/// Reusable evaluation stack. One per worker thread is enough.
#[derive(Debug, Default, Clone)]
pub struct EvalScratch(Vec<f64>);

impl EvalScratch {
    pub fn new() -> Self {
        EvalScratch(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    dim: usize,
    depth: usize,
    constant: Option<f64>,
}

pub(super) fn compile(expr: &Expression) -> CompiledExpr {
    let mut ops = Vec::new();
    let depth = flatten(expr.ast(), &mut ops);
    let mut compiled = CompiledExpr {
        ops,
        dim: expr.dim(),
        depth,
        constant: None,
    };
    if !compiled.ops.iter().any(|op| matches!(op, Op::Var(_))) {
        // Variable-free and cleanly evaluable: pin the value. Expressions
        // that fail everywhere (e.g. `log(0)`) stay un-folded so the error
        // surfaces at evaluation time.
        if let Ok(v) = compiled.run(&[], &mut EvalScratch::new()) {
            compiled.constant = Some(v);
        }
    }
    compiled
}

/// Emits postfix ops and returns the stack depth the subtree needs.
fn flatten(node: &Expr, ops: &mut Vec<Op>) -> usize {
    match node {
        Expr::Const(v) => {
            ops.push(Op::Const(*v));
            1
        }
        Expr::Var(i) => {
            ops.push(Op::Var(*i as u32));
            1
        }
        Expr::Neg(e) => {
            let d = flatten(e, ops);
            ops.push(Op::Neg);
            d
        }
        Expr::Bin(op, l, r) => {
            let dl = flatten(l, ops);
            let dr = flatten(r, ops);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => Op::Pow,
            });
            dl.max(dr + 1)
        }
        Expr::Call1(f, e) => {
            let d = flatten(e, ops);
            ops.push(match f {
                Func1::Sin => Op::Sin,
                Func1::Cos => Op::Cos,
                Func1::Exp => Op::Exp,
                Func1::Log => Op::Log,
                Func1::Tanh => Op::Tanh,
                Func1::Abs => Op::Abs,
                Func1::Sign => Op::Sign,
                Func1::Sqrt => Op::Sqrt,
            });
            d
        }
        Expr::Call2(f, a, b) => {
            let da = flatten(a, ops);
            let db = flatten(b, ops);
            ops.push(match f {
                Func2::Min => Op::Min,
                Func2::Max => Op::Max,
            });
            da.max(db + 1)
        }
    }
}

impl CompiledExpr {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Value of a variable-free expression, when it evaluates cleanly.
    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn eval(
        &self,
        point: &[f64],
        scratch: &mut EvalScratch,
    ) -> std::result::Result<f64, EvalError> {
        if let Some(v) = self.constant {
            return Ok(v);
        }
        if point.len() != self.dim {
            return Err(EvalError::PointDimension {
                got: point.len(),
                want: self.dim,
            });
        }
        self.run(point, scratch)
    }

    fn run(
        &self,
        point: &[f64],
        scratch: &mut EvalScratch,
    ) -> std::result::Result<f64, EvalError> {
        let stack = &mut scratch.0;
        if stack.len() < self.depth {
            stack.resize(self.depth, 0.0);
        }
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Op::Var(i) => {
                    stack[top] = point[i as usize];
                    top += 1;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Op::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Op::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Op::Div => {
                    top -= 1;
                    let r = stack[top];
                    if r == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    stack[top - 1] /= r;
                }
                Op::Pow => {
                    top -= 1;
                    stack[top - 1] = binop(BinOp::Pow, stack[top - 1], stack[top])?;
                }
                Op::Sin => stack[top - 1] = stack[top - 1].sin(),
                Op::Cos => stack[top - 1] = stack[top - 1].cos(),
                Op::Exp => stack[top - 1] = stack[top - 1].exp(),
                Op::Log => stack[top - 1] = Func1::Log.apply(stack[top - 1])?,
                Op::Tanh => stack[top - 1] = stack[top - 1].tanh(),
                Op::Abs => stack[top - 1] = stack[top - 1].abs(),
                Op::Sign => stack[top - 1] = super::sign(stack[top - 1]),
                Op::Sqrt => stack[top - 1] = Func1::Sqrt.apply(stack[top - 1])?,
                Op::Min => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].min(stack[top]);
                }
                Op::Max => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].max(stack[top]);
                }
            }
        }
        Ok(stack[0])
    }
}

#[cfg(test)]
mod tests {
    use super::super::Expression;
    use super::*;

    #[test]
    fn matches_tree_evaluation() {
        let sources = [
            "x^2+sin(x)-3/(x+5)",
            "tanh(2*x)*exp(-x^2)",
            "min(abs(x),sqrt(abs(x)+1))",
            "step(abs(x)-1)*0.2",
        ];
        let mut scratch = EvalScratch::new();
        for src in sources {
            let e = Expression::parse(src, 1).unwrap();
            let c = e.compile();
            for i in -20..=20 {
                let x = i as f64 / 5.0;
                let a = e.evaluate(&[x]).unwrap();
                let b = c.eval(&[x], &mut scratch).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "{src} at {x}");
            }
        }
    }

    #[test]
    fn constant_folding() {
        let e = Expression::parse("2*(3+4)", 1).unwrap();
        assert_eq!(e.as_constant(), Some(14.0));
        let e = Expression::parse("sqrt(2)", 3).unwrap();
        assert_eq!(e.as_constant(), Some(2.0_f64.sqrt()));
        let e = Expression::parse("x+1", 1).unwrap();
        assert_eq!(e.as_constant(), None);
        // Fails everywhere: not folded, and the error is preserved.
        let e = Expression::parse("log(0)", 1).unwrap();
        assert_eq!(e.as_constant(), None);
        assert!(e.compile().eval(&[1.0], &mut EvalScratch::new()).is_err());
    }

    #[test]
    fn domain_errors_match_tree() {
        let e = Expression::parse("1/x", 1).unwrap();
        let c = e.compile();
        assert!(c.eval(&[0.0], &mut EvalScratch::new()).is_err());
    }
}
