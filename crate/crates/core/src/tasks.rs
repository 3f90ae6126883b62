//! Verifiable toy tasks over the shared character vocabulary.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::{effective_len, Role, TokenSeq, Vocab};

pub const ANSWER_DELIMITER: &str = "ANS:";

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Sort,
    CountdownLite,
    Sudoku4,
}

/// Task plus difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Copy { len: usize },
    Sort { len: usize },
    CountdownLite { operands: usize, lo: u32, hi: u32 },
    Sudoku4 { holes: usize, fractional: bool },
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::Copy { len: 8 }
    }
}

impl TaskSpec {
    pub fn countdown() -> Self {
        Self::CountdownLite {
            operands: 3,
            lo: 1,
            hi: 9,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Copy { .. } => TaskKind::Copy,
            Self::Sort { .. } => TaskKind::Sort,
            Self::CountdownLite { .. } => TaskKind::CountdownLite,
            Self::Sudoku4 { .. } => TaskKind::Sudoku4,
        }
    }

    /// Length of the reference response including its eos, when fixed.
    pub fn response_len(&self) -> usize {
        match *self {
            Self::Copy { len } | Self::Sort { len } => len + 1,
            Self::CountdownLite { operands, hi, .. } => operands * digits(hi) + operands.saturating_sub(1) + 1,
            Self::Sudoku4 { .. } => 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        match *self {
            Self::Copy { len } | Self::Sort { len } if len == 0 => bad("length must be positive".into()),
            Self::CountdownLite { operands, lo, hi } if operands == 0 || lo == 0 || lo > hi => bad(format!(
                "countdown needs at least one operand and 1 <= lo <= hi, got {operands} in {lo}..={hi}"
            )),
            Self::CountdownLite { operands, .. } if operands > 6 => {
                bad(format!("countdown supports at most 6 operands, got {operands}"))
            }
            Self::Sudoku4 { holes, .. } if holes == 0 || holes > 12 => {
                bad(format!("4x4 sudoku with {holes} holes has no unique completion"))
            }
            _ => Ok(()),
        }
    }
}

fn digits(n: u32) -> usize {
    n.to_string().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Copy {
        text: String,
    },
    Sort {
        text: String,
    },
    CountdownLite {
        operands: Vec<u32>,
        target: i64,
        solution: String,
    },
    Sudoku4 {
        solution: Vec<u8>,
        givens: Vec<bool>,
        fractional: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTag {
    Correct,
    WrongAnswer,
    Malformed,
    RuleViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    pub tag: RewardTag,
}

impl Reward {
    fn of(tag: RewardTag) -> Self {
        let value = if tag == RewardTag::Correct { 1.0 } else { 0.0 };
        Self { value, tag }
    }
}

pub fn generate(spec: &TaskSpec, rng: &mut RngStream) -> Result<TaskInstance> {
    spec.validate()?;
    match *spec {
        TaskSpec::Copy { len } => {
            let text = random_letters(len, rng);
            Ok(TaskInstance {
                prompt: format!("copy: {text}"),
                payload: Payload::Copy { text },
            })
        }
        TaskSpec::Sort { len } => {
            let text = random_letters(len, rng);
            Ok(TaskInstance {
                prompt: format!("sort: {text}"),
                payload: Payload::Sort { text },
            })
        }
        TaskSpec::CountdownLite { operands, lo, hi } => gen_countdown(operands, lo, hi, rng),
        TaskSpec::Sudoku4 { holes, fractional } => gen_sudoku(holes, fractional, rng),
    }
}

fn random_letters(len: usize, rng: &mut RngStream) -> String {
    (0..len).map(|_| LETTERS[rng.below(LETTERS.len())] as char).collect()
}

fn gen_countdown(n: usize, lo: u32, hi: u32, rng: &mut RngStream) -> Result<TaskInstance> {
    const OPS: [char; 3] = ['+', '-', '*'];
    for _ in 0..1000 {
        let operands: Vec<u32> = (0..n).map(|_| lo + rng.below((hi - lo + 1) as usize) as u32).collect();
        let mut solution = operands[0].to_string();
        for &x in &operands[1..] {
            solution.push(OPS[rng.below(3)]);
            solution.push_str(&x.to_string());
        }
        let target = match parse_expression(&solution) {
            Some(e) => e.value,
            None => continue,
        };
        if target >= 1 {
            let listed: Vec<String> = operands.iter().map(|x| x.to_string()).collect();
            return Ok(TaskInstance {
                prompt: format!("cd {} = {target}", listed.join(" ")),
                payload: Payload::CountdownLite {
                    operands,
                    target,
                    solution,
                },
            });
        }
    }
    Err(Error::Domain("no positive countdown target found".into()))
}

const SUDOKU_BASE: [u8; 16] = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];

fn gen_sudoku(holes: usize, fractional: bool, rng: &mut RngStream) -> Result<TaskInstance> {
    let mut grid = SUDOKU_BASE;
    let mut digits = [1u8, 2, 3, 4];
    rng.shuffle(&mut digits);
    for d in &mut grid {
        *d = digits[(*d - 1) as usize];
    }
    // rows within bands, bands, then the same for columns via transposition
    for _ in 0..2 {
        let mut rows = [0usize, 1, 2, 3];
        if rng.below(2) == 1 {
            rows.swap(0, 1);
        }
        if rng.below(2) == 1 {
            rows.swap(2, 3);
        }
        if rng.below(2) == 1 {
            rows = [rows[2], rows[3], rows[0], rows[1]];
        }
        let old = grid;
        for (r, &src) in rows.iter().enumerate() {
            grid[r * 4..r * 4 + 4].copy_from_slice(&old[src * 4..src * 4 + 4]);
        }
        let old = grid;
        for r in 0..4 {
            for c in 0..4 {
                grid[r * 4 + c] = old[c * 4 + r];
            }
        }
    }
    for _ in 0..200 {
        let mut order: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut order);
        let mut puzzle: Vec<u8> = grid.to_vec();
        let mut removed = 0;
        for &cell in &order {
            if removed == holes {
                break;
            }
            let keep = puzzle[cell];
            puzzle[cell] = 0;
            if count_solutions(&mut puzzle.clone(), 2) == 1 {
                removed += 1;
            } else {
                puzzle[cell] = keep;
            }
        }
        if removed == holes {
            let prompt = format!(
                "sudoku: {}",
                puzzle
                    .iter()
                    .map(|&d| if d == 0 { '.' } else { (b'0' + d) as char })
                    .collect::<String>()
            );
            return Ok(TaskInstance {
                prompt,
                payload: Payload::Sudoku4 {
                    solution: grid.to_vec(),
                    givens: puzzle.iter().map(|&d| d != 0).collect(),
                    fractional,
                },
            });
        }
    }
    Err(Error::Domain(format!(
        "could not carve {holes} holes with a unique completion"
    )))
}

/// Counts completions of a 4x4 grid (0 = empty), stopping at `limit`.
pub fn count_solutions(grid: &mut [u8], limit: usize) -> usize {
    let Some(cell) = grid.iter().position(|&d| d == 0) else {
        return usize::from(sudoku_valid(grid));
    };
    let mut n = 0;
    for d in 1..=4 {
        if placement_ok(grid, cell, d) {
            grid[cell] = d;
            n += count_solutions(grid, limit - n);
            grid[cell] = 0;
            if n >= limit {
                break;
            }
        }
    }
    n
}

fn placement_ok(grid: &[u8], cell: usize, d: u8) -> bool {
    let (r, c) = (cell / 4, cell % 4);
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..4).all(|i| grid[r * 4 + i] != d && grid[i * 4 + c] != d)
        && (0..2).all(|i| (0..2).all(|j| grid[(br + i) * 4 + bc + j] != d))
}

/// Every row, column and 2x2 box holds 1..=4 exactly once.
pub fn sudoku_valid(grid: &[u8]) -> bool {
    if grid.len() != 16 || grid.iter().any(|&d| !(1..=4).contains(&d)) {
        return false;
    }
    let groups = (0..4).flat_map(|k| {
        let (br, bc) = (k / 2 * 2, k % 2 * 2);
        [
            [k * 4, k * 4 + 1, k * 4 + 2, k * 4 + 3],
            [k, k + 4, k + 8, k + 12],
            [br * 4 + bc, br * 4 + bc + 1, (br + 1) * 4 + bc, (br + 1) * 4 + bc + 1],
        ]
    });
    groups.into_iter().all(|g| {
        let mut seen = [false; 5];
        g.iter().all(|&i| !std::mem::replace(&mut seen[grid[i] as usize], true))
    })
}

/// Text between the first answer delimiter and eos, or the whole text when
/// there is no delimiter.
pub fn answer_span(text: &str) -> &str {
    match text.find(ANSWER_DELIMITER) {
        Some(i) => &text[i + ANSWER_DELIMITER.len()..],
        None => text,
    }
}

/// A parsed countdown expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expression {
    pub value: i64,
    pub numbers: Vec<i64>,
}

/// Parses `+`, `-`, `*` with standard precedence and parentheses; spaces are
/// ignored. Unary operators are not accepted.
pub fn parse_expression(text: &str) -> Option<Expression> {
    let chars: Vec<char> = text.chars().filter(|c| *c != ' ').collect();
    let mut p = Parser {
        chars: &chars,
        pos: 0,
        numbers: Vec::new(),
        depth: 0,
    };
    let value = p.expr()?;
    (p.pos == chars.len()).then_some(Expression {
        value,
        numbers: p.numbers,
    })
}

struct Parser<'a> {
    chars: &'a [char],
    pos: usize,
    numbers: Vec<i64>,
    depth: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Option<i64> {
        let mut v = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let r = self.term()?;
            v = if op == '+' {
                v.checked_add(r)?
            } else {
                v.checked_sub(r)?
            };
        }
        Some(v)
    }

    fn term(&mut self) -> Option<i64> {
        let mut v = self.factor()?;
        while self.peek() == Some('*') {
            self.pos += 1;
            v = v.checked_mul(self.factor()?)?;
        }
        Some(v)
    }

    fn factor(&mut self) -> Option<i64> {
        match self.peek()? {
            '(' => {
                self.depth += 1;
                if self.depth > 64 {
                    return None;
                }
                self.pos += 1;
                let v = self.expr()?;
                if self.peek()? != ')' {
                    return None;
                }
                self.pos += 1;
                self.depth -= 1;
                Some(v)
            }
            c if c.is_ascii_digit() => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                let n: i64 = s.parse().ok()?;
                self.numbers.push(n);
                Some(n)
            }
            _ => None,
        }
    }
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        match self.payload {
            Payload::Copy { .. } => TaskKind::Copy,
            Payload::Sort { .. } => TaskKind::Sort,
            Payload::CountdownLite { .. } => TaskKind::CountdownLite,
            Payload::Sudoku4 { .. } => TaskKind::Sudoku4,
        }
    }

    /// The reference answer text (without eos).
    pub fn reference(&self) -> String {
        match &self.payload {
            Payload::Copy { text } => text.clone(),
            Payload::Sort { text } => {
                let mut c: Vec<char> = text.chars().collect();
                c.sort_unstable();
                c.into_iter().collect()
            }
            Payload::CountdownLite { solution, .. } => solution.clone(),
            Payload::Sudoku4 { solution, .. } => solution.iter().map(|&d| (b'0' + d) as char).collect(),
        }
    }

    /// Tokenized prompt and eos-terminated reference response.
    pub fn sft_pair(&self, vocab: &Vocab) -> Result<(TokenSeq, TokenSeq)> {
        let prompt = vocab.encode(&self.prompt)?;
        let mut response = vocab.encode(&self.reference())?;
        response.0.push(vocab.eos_id);
        Ok((prompt, response))
    }

    /// Scores arbitrary response tokens; never fails.
    pub fn verify(&self, vocab: &Vocab, response: &TokenSeq) -> Reward {
        let ids = &response.0[..effective_len(&response.0, vocab.eos_id)];
        let reserved = ids
            .iter()
            .any(|&t| vocab.role(t) != Some(Role::Content) && t != vocab.pad_id);
        if reserved {
            return Reward::of(RewardTag::Malformed);
        }
        self.verify_text(&vocab.decode_answer(ids))
    }

    /// Scores a decoded response (already cut at eos).
    pub fn verify_text(&self, text: &str) -> Reward {
        let span = answer_span(text);
        match &self.payload {
            Payload::Copy { .. } | Payload::Sort { .. } => {
                if span.is_empty() {
                    Reward::of(RewardTag::Malformed)
                } else if span == self.reference() {
                    Reward::of(RewardTag::Correct)
                } else {
                    Reward::of(RewardTag::WrongAnswer)
                }
            }
            Payload::CountdownLite { operands, target, .. } => {
                let Some(e) = parse_expression(span) else {
                    return Reward::of(RewardTag::Malformed);
                };
                let mut pool: Vec<i64> = operands.iter().map(|&x| x as i64).collect();
                for n in &e.numbers {
                    match pool.iter().position(|x| x == n) {
                        Some(i) => {
                            pool.swap_remove(i);
                        }
                        None => return Reward::of(RewardTag::RuleViolation),
                    }
                }
                if e.value == *target {
                    Reward::of(RewardTag::Correct)
                } else {
                    Reward::of(RewardTag::WrongAnswer)
                }
            }
            Payload::Sudoku4 {
                solution,
                givens,
                fractional,
            } => {
                let grid: Vec<u8> = span.bytes().map(|b| b.wrapping_sub(b'0')).collect();
                if grid.len() != 16 || grid.iter().any(|d| !(1..=4).contains(d)) {
                    return Reward::of(RewardTag::Malformed);
                }
                if *fractional {
                    let holes: Vec<usize> = (0..16).filter(|&i| !givens[i]).collect();
                    let right = holes.iter().filter(|&&i| grid[i] == solution[i]).count();
                    let value = right as f64 / holes.len() as f64;
                    let tag = if right == holes.len() {
                        RewardTag::Correct
                    } else {
                        RewardTag::WrongAnswer
                    };
                    return Reward { value, tag };
                }
                if (0..16).any(|i| givens[i] && grid[i] != solution[i]) {
                    Reward::of(RewardTag::RuleViolation)
                } else if sudoku_valid(&grid) {
                    Reward::of(RewardTag::Correct)
                } else {
                    Reward::of(RewardTag::WrongAnswer)
                }
            }
        }
    }
}

/// Generates `n` instances from child streams `0..n` of `rng`.
pub fn generate_dataset(spec: &TaskSpec, n: usize, rng: &RngStream) -> Result<Vec<TaskInstance>> {
    (0..n).map(|i| generate(spec, &mut rng.child(i))).collect()
}

/// One JSON record per line: kind, prompt, payload.
pub fn write_dataset<W: Write>(items: &[TaskInstance], mut w: W) -> Result<()> {
    for it in items {
        let line = serde_json::json!({
            "kind": it.kind(),
            "prompt": it.prompt,
            "payload": it.payload,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    #[derive(Deserialize)]
    struct Record {
        kind: TaskKind,
        prompt: String,
        payload: Payload,
    }
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset line {}: {e}", n + 1)))?;
        let it = TaskInstance {
            prompt: rec.prompt,
            payload: rec.payload,
        };
        if it.kind() != rec.kind {
            return Err(Error::Format(format!(
                "dataset line {}: kind does not match payload",
                n + 1
            )));
        }
        out.push(it);
    }
    Ok(out)
}
