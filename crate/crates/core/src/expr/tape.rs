//! Flat, common-subexpression-shared evaluation programs.

use std::collections::HashMap;

use super::{Expr, ExprError, Interval, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Const(f64),
    Slot(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Pow(u32, u32),
    Sin(u32),
    Cos(u32),
    Exp(u32),
    Sqrt(u32),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Const(u64),
    Slot(u32),
    Bin(u8, u32, u32),
    Un(u8, u32),
    Pow(u32, u32),
}

/// A compiled set of expressions sharing one instruction list.
///
/// Variables are addressed by slot: states first, then inputs.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<u32>,
    n_states: usize,
    n_inputs: usize,
}

struct Builder {
    ops: Vec<Op>,
    memo: HashMap<Key, u32>,
    n_states: usize,
}

impl Builder {
    fn push(&mut self, key: Key, op: Op) -> u32 {
        if let Some(&id) = self.memo.get(&key) {
            return id;
        }
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.memo.insert(key, id);
        id
    }

    fn emit(&mut self, e: &Expr) -> u32 {
        match e {
            Expr::Const(c) => self.push(Key::Const(c.to_bits()), Op::Const(*c)),
            Expr::Var(v) => {
                let s = v.slot(self.n_states) as u32;
                self.push(Key::Slot(s), Op::Slot(s))
            }
            Expr::Add(a, b) => self.binary(0, a, b, Op::Add),
            Expr::Sub(a, b) => self.binary(1, a, b, Op::Sub),
            Expr::Mul(a, b) => self.binary(2, a, b, Op::Mul),
            Expr::Div(a, b) => self.binary(3, a, b, Op::Div),
            Expr::Neg(a) => self.unary(0, a, Op::Neg),
            Expr::Sin(a) => self.unary(1, a, Op::Sin),
            Expr::Cos(a) => self.unary(2, a, Op::Cos),
            Expr::Exp(a) => self.unary(3, a, Op::Exp),
            Expr::Sqrt(a) => self.unary(4, a, Op::Sqrt),
            Expr::Pow(a, k) => {
                let ia = self.emit(a);
                self.push(Key::Pow(ia, *k), Op::Pow(ia, *k))
            }
        }
    }

    fn binary(&mut self, tag: u8, a: &Expr, b: &Expr, op: fn(u32, u32) -> Op) -> u32 {
        let ia = self.emit(a);
        let ib = self.emit(b);
        self.push(Key::Bin(tag, ia, ib), op(ia, ib))
    }

    fn unary(&mut self, tag: u8, a: &Expr, op: fn(u32) -> Op) -> u32 {
        let ia = self.emit(a);
        self.push(Key::Un(tag, ia), op(ia))
    }
}

impl Tape {
    pub fn compile<'a, I>(exprs: I, n_states: usize, n_inputs: usize) -> Tape
    where
        I: IntoIterator<Item = &'a Expr>,
    {
        let mut b = Builder {
            ops: Vec::new(),
            memo: HashMap::new(),
            n_states,
        };
        let outputs = exprs.into_iter().map(|e| b.emit(e)).collect();
        Tape {
            ops: b.ops,
            outputs,
            n_states,
            n_inputs,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_slots(&self) -> usize {
        self.n_states + self.n_inputs
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Whether slot `s` is read anywhere in the program.
    pub fn uses_slot(&self, s: usize) -> bool {
        self.ops.iter().any(|op| *op == Op::Slot(s as u32))
    }

    pub fn uses_var(&self, v: Var) -> bool {
        self.uses_slot(v.slot(self.n_states))
    }

    pub fn eval(&self, vars: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<(), ExprError> {
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let r = |i: u32| scratch[i as usize];
            let v = match *op {
                Op::Const(c) => c,
                Op::Slot(s) => vars[s as usize],
                Op::Add(a, b) => r(a) + r(b),
                Op::Sub(a, b) => r(a) - r(b),
                Op::Mul(a, b) => r(a) * r(b),
                Op::Div(a, b) => {
                    let d = r(b);
                    if d == 0.0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    r(a) / d
                }
                Op::Neg(a) => -r(a),
                Op::Pow(a, k) => r(a).powi(k as i32),
                Op::Sin(a) => r(a).sin(),
                Op::Cos(a) => r(a).cos(),
                Op::Exp(a) => r(a).exp(),
                Op::Sqrt(a) => {
                    let x = r(a);
                    if x < 0.0 {
                        return Err(ExprError::Domain("sqrt of a negative number"));
                    }
                    x.sqrt()
                }
            };
            scratch.push(v);
        }
        for (o, &i) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[i as usize];
        }
        Ok(())
    }

    /// Convenience wrapper returning a fresh vector.
    pub fn eval_vec(&self, vars: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut out = vec![0.0; self.outputs.len()];
        self.eval(vars, &mut Vec::new(), &mut out)?;
        Ok(out)
    }

    pub fn eval_interval(
        &self,
        vars: &[Interval],
        scratch: &mut Vec<Interval>,
        out: &mut [Interval],
    ) -> Result<(), ExprError> {
        scratch.clear();
        scratch.reserve(self.ops.len());
        for op in &self.ops {
            let r = |i: u32| scratch[i as usize];
            let v = match *op {
                Op::Const(c) => Interval::point(c),
                Op::Slot(s) => vars[s as usize],
                Op::Add(a, b) => r(a) + r(b),
                Op::Sub(a, b) => r(a) - r(b),
                Op::Mul(a, b) if a == b => r(a).powi(2),
                Op::Mul(a, b) => r(a) * r(b),
                Op::Div(a, b) => r(a).checked_div(r(b))?,
                Op::Neg(a) => -r(a),
                Op::Pow(a, k) => r(a).powi(k),
                Op::Sin(a) => r(a).sin(),
                Op::Cos(a) => r(a).cos(),
                Op::Exp(a) => r(a).exp(),
                Op::Sqrt(a) => r(a).sqrt()?,
            };
            scratch.push(v);
        }
        for (o, &i) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[i as usize];
        }
        Ok(())
    }
}
