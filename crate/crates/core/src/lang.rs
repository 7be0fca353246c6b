//! The UNDO Flip-Flop language.
//!
//! A program is a list of [`Operation`]s acting on an implicit bounded stack
//! of bits. `Write(v)` pushes `v`, `Undo` pops the top, `Ignore` does nothing
//! and `Read` asks for the bit currently on top. A valid program starts with a
//! write, ends with a read and never pops the last remaining element.
//!
//! Programs are serialized with a six-symbol vocabulary:
//!
//! ```text
//! w=0  i=1  r=2  u=3  0=4  1=5
//! Write(v) -> [w, v]    Ignore -> [i]    Undo -> [u]    Read -> [r]
//! ```
//!
//! The answer to a read is never materialized in the stream; it is the
//! supervision target of the `r` position.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value for positions that carry no supervision.
pub const IGNORE_INDEX: i64 = -100;

/// Number of distinct token ids.
pub const VOCAB_SIZE: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LangError {
    #[error("undo with stack depth {depth} (needs depth > 1)")]
    UndoOnShallowStack { depth: usize },
    #[error("read or ignore on an empty stack")]
    ReadOnEmptyStack,
    #[error("active state requested on an empty stack")]
    EmptyStack,
    #[error("invalid operation list: {0}")]
    InvalidOps(Rejection),
    #[error("malformed token stream at position {position}: {reason}")]
    MalformedTokens { position: usize, reason: String },
}

/// A binary digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bit {
    Zero,
    One,
}

impl Bit {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Bit::One
        } else {
            Bit::Zero
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Bit::Zero => 0,
            Bit::One => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Bit::Zero => Bit::One,
            Bit::One => Bit::Zero,
        }
    }

    /// Token carrying this bit as a write operand (and as a read label).
    pub fn token(self) -> Token {
        match self {
            Bit::Zero => Token::Bit0,
            Bit::One => Token::Bit1,
        }
    }
}

impl fmt::Display for Bit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Write(Bit),
    Ignore,
    Undo,
    Read,
}

impl Operation {
    /// Tokens this operation occupies in the serialized stream.
    pub fn token_cost(self) -> usize {
        match self {
            Operation::Write(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operation::Write(b) => write!(f, "W({b})"),
            Operation::Ignore => write!(f, "I"),
            Operation::Undo => write!(f, "U"),
            Operation::Read => write!(f, "R"),
        }
    }
}

/// Ground-truth history stack, bottom to top.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct StackState {
    values: Vec<Bit>,
}

impl StackState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bits(values: Vec<Bit>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Bit] {
        &self.values
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }

    /// Returns the stack after `op`; `self` is left untouched.
    pub fn apply_op(&self, op: Operation) -> Result<StackState, LangError> {
        let mut next = self.clone();
        next.apply_in_place(op)?;
        Ok(next)
    }

    pub(crate) fn apply_in_place(&mut self, op: Operation) -> Result<(), LangError> {
        match op {
            Operation::Write(v) => self.values.push(v),
            Operation::Undo => {
                if self.depth() <= 1 {
                    return Err(LangError::UndoOnShallowStack { depth: self.depth() });
                }
                self.values.pop();
            }
            Operation::Ignore | Operation::Read => {
                if self.values.is_empty() {
                    return Err(LangError::ReadOnEmptyStack);
                }
            }
        }
        Ok(())
    }

    /// The bit on top of the stack.
    pub fn active_state(&self) -> Result<Bit, LangError> {
        self.values.last().copied().ok_or(LangError::EmptyStack)
    }
}

/// Which well-formedness rule an operation list breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    Empty,
    FirstNotWrite,
    UndoOnShallowStack,
    LastNotRead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub rule: Rule,
    pub position: usize,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.rule {
            Rule::Empty => "empty operation list",
            Rule::FirstNotWrite => "does not begin with a write",
            Rule::UndoOnShallowStack => "undo at stack depth 1",
            Rule::LastNotRead => "does not end with a read",
        };
        write!(f, "{what} (operation {})", self.position)
    }
}

pub type ValidationResult = Result<(), Rejection>;

/// Checks the three structural rules, reporting the first violation in
/// position order.
pub fn validate_ops(ops: &[Operation]) -> ValidationResult {
    let Some(first) = ops.first() else {
        return Err(Rejection { rule: Rule::Empty, position: 0 });
    };
    if !matches!(first, Operation::Write(_)) {
        return Err(Rejection { rule: Rule::FirstNotWrite, position: 0 });
    }
    let mut depth = 0usize;
    for (pos, op) in ops.iter().enumerate() {
        match op {
            Operation::Write(_) => depth += 1,
            Operation::Undo if depth <= 1 => {
                return Err(Rejection { rule: Rule::UndoOnShallowStack, position: pos })
            }
            Operation::Undo => depth -= 1,
            Operation::Ignore | Operation::Read => {}
        }
    }
    if ops.last() != Some(&Operation::Read) {
        return Err(Rejection { rule: Rule::LastNotRead, position: ops.len() - 1 });
    }
    Ok(())
}

/// Vocabulary symbol. The discriminant is the frozen token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Token {
    W = 0,
    I = 1,
    R = 2,
    U = 3,
    Bit0 = 4,
    Bit1 = 5,
}

impl Token {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: i64) -> Option<Token> {
        Some(match id {
            0 => Token::W,
            1 => Token::I,
            2 => Token::R,
            3 => Token::U,
            4 => Token::Bit0,
            5 => Token::Bit1,
            _ => return None,
        })
    }

    pub fn as_bit(self) -> Option<Bit> {
        match self {
            Token::Bit0 => Some(Bit::Zero),
            Token::Bit1 => Some(Bit::One),
            _ => None,
        }
    }
}

/// A well-formed token sequence: every `w` is followed by a bit and bits
/// appear nowhere else.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenStream {
    tokens: Vec<Token>,
}

impl TokenStream {
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self, LangError> {
        let mut expect_operand = false;
        for (position, t) in tokens.iter().enumerate() {
            let is_bit = t.as_bit().is_some();
            if expect_operand && !is_bit {
                return Err(LangError::MalformedTokens {
                    position,
                    reason: "write not followed by a bit".into(),
                });
            }
            if !expect_operand && is_bit {
                return Err(LangError::MalformedTokens {
                    position,
                    reason: "bit token outside a write operand".into(),
                });
            }
            expect_operand = *t == Token::W;
        }
        if expect_operand {
            return Err(LangError::MalformedTokens {
                position: tokens.len(),
                reason: "stream ends inside a write".into(),
            });
        }
        Ok(Self { tokens })
    }

    pub fn from_ids(ids: &[i64]) -> Result<Self, LangError> {
        let tokens = ids
            .iter()
            .enumerate()
            .map(|(position, &id)| {
                Token::from_id(id).ok_or_else(|| LangError::MalformedTokens {
                    position,
                    reason: format!("unknown token id {id}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of the `r` tokens, i.e. the supervision slots.
    pub fn read_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Token::R)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn decode(&self) -> Vec<Operation> {
        let mut ops = Vec::with_capacity(self.tokens.len());
        let mut iter = self.tokens.iter();
        while let Some(t) = iter.next() {
            ops.push(match t {
                Token::W => {
                    // Well-formedness guarantees the operand.
                    let bit = iter.next().and_then(|b| b.as_bit()).expect("write operand");
                    Operation::Write(bit)
                }
                Token::I => Operation::Ignore,
                Token::U => Operation::Undo,
                Token::R => Operation::Read,
                Token::Bit0 | Token::Bit1 => unreachable!("bare bit in a checked stream"),
            });
        }
        ops
    }
}

fn encode_unchecked(ops: &[Operation]) -> TokenStream {
    let mut tokens = Vec::with_capacity(ops.iter().map(|o| o.token_cost()).sum());
    for op in ops {
        match op {
            Operation::Write(b) => {
                tokens.push(Token::W);
                tokens.push(b.token());
            }
            Operation::Ignore => tokens.push(Token::I),
            Operation::Undo => tokens.push(Token::U),
            Operation::Read => tokens.push(Token::R),
        }
    }
    TokenStream { tokens }
}

pub fn encode(ops: &[Operation]) -> Result<TokenStream, LangError> {
    validate_ops(ops).map_err(LangError::InvalidOps)?;
    Ok(encode_unchecked(ops))
}

/// Active state at each read, in order.
pub fn oracle_answers(ops: &[Operation]) -> Result<Vec<Bit>, LangError> {
    validate_ops(ops).map_err(LangError::InvalidOps)?;
    let mut stack = StackState::new();
    let mut answers = Vec::new();
    for &op in ops {
        stack.apply_in_place(op)?;
        if op == Operation::Read {
            answers.push(stack.active_state()?);
        }
    }
    Ok(answers)
}

/// Which population a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "PRESSURE")]
    Pressure,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Id => "ID",
            Split::Ood => "OOD",
            Split::Pressure => "PRESSURE",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "ID" => Some(Split::Id),
            "OOD" => Some(Split::Ood),
            "PRESSURE" => Some(Split::Pressure),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tokens plus aligned supervision labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    pub tokens: TokenStream,
    /// Same length as `tokens`; a bit token id at every `r`, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i64>,
    pub split: Split,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ops(&self) -> Vec<Operation> {
        self.tokens.decode()
    }

    /// Supervised answers in read order.
    pub fn answers(&self) -> Vec<Bit> {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE_INDEX)
            .map(|&l| Token::from_id(l).and_then(Token::as_bit).expect("label is a bit token"))
            .collect()
    }
}

/// Encodes `ops` and attaches the oracle's answer at every read position.
pub fn label(ops: &[Operation], split: Split) -> Result<TaskSequence, LangError> {
    let answers = oracle_answers(ops)?;
    let tokens = encode_unchecked(ops);
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for (pos, answer) in tokens.read_positions().into_iter().zip(answers) {
        labels[pos] = answer.token().id() as i64;
    }
    Ok(TaskSequence { tokens, labels, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Bit::{One, Zero};
    use Operation::{Ignore as I, Read as R, Undo as U, Write as W};

    fn table_one() -> Vec<Operation> {
        vec![W(One), W(Zero), I, W(One), U, I, R]
    }

    #[test]
    fn write_pushes_and_undo_pops() {
        let s = StackState::from_bits(vec![One, Zero]);
        let pushed = s.apply_op(W(One)).unwrap();
        assert_eq!(pushed.values(), &[One, Zero, One]);
        let popped = pushed.apply_op(U).unwrap();
        assert_eq!(popped.values(), &[One, Zero]);
        assert_eq!(s.apply_op(I).unwrap(), s);
    }

    #[test]
    fn apply_op_errors() {
        let single = StackState::from_bits(vec![One]);
        assert_eq!(single.apply_op(U), Err(LangError::UndoOnShallowStack { depth: 1 }));
        assert_eq!(StackState::new().apply_op(R), Err(LangError::ReadOnEmptyStack));
        assert_eq!(StackState::new().apply_op(I), Err(LangError::ReadOnEmptyStack));
    }

    #[test]
    fn active_state_is_top() {
        assert_eq!(StackState::from_bits(vec![One, Zero]).active_state(), Ok(Zero));
        assert_eq!(StackState::from_bits(vec![One]).active_state(), Ok(One));
        let s = StackState::from_bits(vec![Zero, One, One]);
        let s = s.apply_op(U).unwrap().apply_op(U).unwrap();
        assert_eq!(s.active_state(), Ok(Zero));
        assert_eq!(StackState::new().active_state(), Err(LangError::EmptyStack));
    }

    #[test]
    fn validation_rules() {
        assert_eq!(validate_ops(&table_one()), Ok(()));
        assert_eq!(
            validate_ops(&[W(One), U, R]),
            Err(Rejection { rule: Rule::UndoOnShallowStack, position: 1 })
        );
        assert_eq!(validate_ops(&[I, R]), Err(Rejection { rule: Rule::FirstNotWrite, position: 0 }));
        assert_eq!(validate_ops(&[]), Err(Rejection { rule: Rule::Empty, position: 0 }));
        assert_eq!(
            validate_ops(&[W(One), I]),
            Err(Rejection { rule: Rule::LastNotRead, position: 1 })
        );
    }

    #[test]
    fn encoding_lengths() {
        let s = encode(&[W(One), R]).unwrap();
        assert_eq!(s.ids(), vec![0, 5, 2]);
        assert_eq!(encode(&table_one()).unwrap().len(), 10);
        let mut pressure = vec![W(One); 11];
        pressure.extend(std::iter::repeat_n(U, 10));
        pressure.push(R);
        assert_eq!(encode(&pressure).unwrap().len(), 33);
        assert!(matches!(encode(&[I, R]), Err(LangError::InvalidOps(_))));
    }

    #[test]
    fn table_one_label() {
        let seq = label(&table_one(), Split::Id).unwrap();
        let unmasked: Vec<_> =
            seq.labels.iter().enumerate().filter(|(_, &l)| l != IGNORE_INDEX).collect();
        assert_eq!(unmasked, vec![(9, &(Token::Bit0.id() as i64))]);
        assert_eq!(seq.answers(), vec![Zero]);
        let reads = label(&[W(One), R], Split::Id).unwrap();
        assert_eq!(reads.labels, vec![IGNORE_INDEX, IGNORE_INDEX, 5]);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_answers(&table_one()).unwrap(), vec![Zero]);
        assert_eq!(oracle_answers(&[W(Zero), R, W(One), R, U, R]).unwrap(), vec![Zero, One, Zero]);
    }

    #[test]
    fn token_stream_rejects_malformed() {
        assert!(TokenStream::from_ids(&[0, 2]).is_err());
        assert!(TokenStream::from_ids(&[4, 2]).is_err());
        assert!(TokenStream::from_ids(&[0]).is_err());
        assert!(TokenStream::from_ids(&[0, 9]).is_err());
        let ok = TokenStream::from_ids(&[0, 4, 1, 3, 2]).unwrap();
        assert_eq!(ok.decode(), vec![W(Zero), I, U, R]);
    }
}
