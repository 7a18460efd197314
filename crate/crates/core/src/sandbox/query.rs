//! Read-only query backend over one in-memory table.
//!
//! Grammar, keywords case-insensitive:
//!
//! ```text
//! [SELECT] (COUNT [(*)] | SUM(col)) [FROM table] [WHERE col op lit (AND col op lit)*] [;]
//! op  := = | != | <> | < | <= | > | >=
//! lit := number | 'text' | "text" | bareword
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{arg_str, elapsed_ms, parse_args, precise_wait, Backend, SandboxError, SandboxHandle};
use crate::tcg::{ToolDescriptor, ToolResult};

pub const QUERY_KIND: &str = "query";
pub const DEFAULT_QUERY_LATENCY_MS: f64 = 56.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

pub type Row = BTreeMap<String, Cell>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Table {
    name: String,
    rows: Vec<Row>,
}

pub struct QueryBackend {
    kind: Arc<str>,
    latency_ms: f64,
    table: Arc<Table>,
}

impl Default for QueryBackend {
    /// The `animals` table: 12 pigs, 5 cows and 7 chickens.
    fn default() -> Self {
        let mut rows = Vec::new();
        for (species, n, base_age) in [("pig", 12, 1.0), ("cow", 5, 3.0), ("chicken", 7, 0.5)] {
            for i in 0..n {
                let mut row = Row::new();
                row.insert("id".into(), Cell::Num(rows.len() as f64 + 1.0));
                row.insert("species".into(), Cell::Text(species.into()));
                row.insert("age".into(), Cell::Num(base_age + f64::from(i % 4)));
                rows.push(row);
            }
        }
        Self::new("animals", rows, DEFAULT_QUERY_LATENCY_MS)
    }
}

impl QueryBackend {
    pub fn new(table_name: impl Into<String>, rows: Vec<Row>, latency_ms: f64) -> Self {
        Self { kind: QUERY_KIND.into(), latency_ms: latency_ms.max(0.0), table: Arc::new(Table { name: table_name.into(), rows }) }
    }

    pub fn with_latency(mut self, latency_ms: f64) -> Self {
        self.latency_ms = latency_ms.max(0.0);
        self
    }

    pub fn latency_ms(&self) -> f64 {
        self.latency_ms
    }

    fn handle(&self, table: Arc<Table>) -> SandboxHandle {
        SandboxHandle::new(self.kind.clone(), Box::new(table))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Num(f64),
    Str(String),
    Sym(&'static str),
}

fn tokenize(src: &str) -> Result<Vec<Tok>, SandboxError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' | ')' | '*' | ';' | ',' => {
                toks.push(Tok::Sym(match c {
                    '(' => "(",
                    ')' => ")",
                    '*' => "*",
                    ';' => ";",
                    _ => ",",
                }));
                i += 1;
            }
            '=' => {
                toks.push(Tok::Sym("="));
                i += 1;
            }
            '!' | '<' | '>' => {
                let next = chars.get(i + 1).copied();
                let sym = match (c, next) {
                    ('!', Some('=')) => "!=",
                    ('<', Some('>')) => "!=",
                    ('<', Some('=')) => "<=",
                    ('>', Some('=')) => ">=",
                    ('<', _) => "<",
                    ('>', _) => ">",
                    _ => return Err(SandboxError::Parse(format!("unexpected '!' at {i}"))),
                };
                i += if matches!(sym, "<" | ">") { 1 } else { 2 };
                toks.push(Tok::Sym(sym));
            }
            '\'' | '"' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|&x| x == c)
                    .ok_or_else(|| SandboxError::Parse("unterminated string".into()))?;
                toks.push(Tok::Str(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            c if c.is_ascii_digit() || c == '-' || c == '.' => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text.parse().map_err(|_| SandboxError::Parse(format!("bad number {text:?}")))?;
                toks.push(Tok::Num(n));
            }
            c if c.is_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push(Tok::Word(chars[start..i].iter().collect()));
            }
            other => return Err(SandboxError::Parse(format!("unexpected {other:?} at {i}"))),
        }
    }
    Ok(toks)
}

#[derive(Debug, PartialEq)]
enum Agg {
    Count,
    Sum(String),
}

#[derive(Debug, PartialEq)]
struct Cond {
    column: String,
    op: &'static str,
    value: Cell,
}

#[derive(Debug, PartialEq)]
struct Query {
    agg: Agg,
    table: Option<String>,
    conds: Vec<Cond>,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw)) {
            self.pos += 1;
            return true;
        }
        false
    }

    fn sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            return true;
        }
        false
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), SandboxError> {
        if self.sym(s) {
            Ok(())
        } else {
            Err(SandboxError::Parse(format!("expected {s:?} at token {}", self.pos)))
        }
    }

    fn ident(&mut self) -> Result<String, SandboxError> {
        match self.next() {
            Some(Tok::Word(w)) => Ok(w),
            other => Err(SandboxError::Parse(format!("expected identifier, found {other:?}"))),
        }
    }

    fn parse(mut self) -> Result<Query, SandboxError> {
        self.keyword("select");
        let agg = if self.keyword("count") {
            if self.sym("(") {
                if !self.sym("*") {
                    self.ident()?;
                }
                self.expect_sym(")")?;
            }
            Agg::Count
        } else if self.keyword("sum") {
            self.expect_sym("(")?;
            let col = self.ident()?;
            self.expect_sym(")")?;
            Agg::Sum(col)
        } else {
            return Err(SandboxError::Parse("expected COUNT or SUM".into()));
        };
        let table = if self.keyword("from") { Some(self.ident()?) } else { None };
        let mut conds = Vec::new();
        if self.keyword("where") {
            loop {
                let column = self.ident()?;
                let op = match self.next() {
                    Some(Tok::Sym(op)) if matches!(op, "=" | "!=" | "<" | "<=" | ">" | ">=") => op,
                    other => return Err(SandboxError::Parse(format!("expected comparison, found {other:?}"))),
                };
                let value = match self.next() {
                    Some(Tok::Num(n)) => Cell::Num(n),
                    Some(Tok::Str(s)) | Some(Tok::Word(s)) => Cell::Text(s),
                    other => return Err(SandboxError::Parse(format!("expected literal, found {other:?}"))),
                };
                conds.push(Cond { column, op, value });
                if !self.keyword("and") {
                    break;
                }
            }
        }
        self.sym(";");
        if let Some(t) = self.peek() {
            return Err(SandboxError::Parse(format!("unexpected trailing token {t:?}")));
        }
        Ok(Query { agg, table, conds })
    }
}

fn parse_query(src: &str) -> Result<Query, SandboxError> {
    Parser { toks: tokenize(src)?, pos: 0 }.parse()
}

fn matches(row: &Row, cond: &Cond) -> Result<bool, SandboxError> {
    let cell = row.get(&cond.column).ok_or_else(|| SandboxError::Parse(format!("no such column {:?}", cond.column)))?;
    let ord = match (cell, &cond.value) {
        (Cell::Num(a), Cell::Num(b)) => a.partial_cmp(b),
        (Cell::Text(a), Cell::Text(b)) => Some(a.cmp(b)),
        _ => None,
    };
    Ok(match (cond.op, ord) {
        ("!=", None) => true,
        (_, None) => false,
        ("=", Some(o)) => o == Ordering::Equal,
        ("!=", Some(o)) => o != Ordering::Equal,
        ("<", Some(o)) => o == Ordering::Less,
        ("<=", Some(o)) => o != Ordering::Greater,
        (">", Some(o)) => o == Ordering::Greater,
        (">=", Some(o)) => o != Ordering::Less,
        _ => unreachable!("operators are validated by the parser"),
    })
}

fn evaluate(table: &Table, query: &Query) -> Result<String, SandboxError> {
    if let Some(name) = &query.table {
        if !name.eq_ignore_ascii_case(&table.name) {
            return Err(SandboxError::Parse(format!("no such table {name:?}")));
        }
    }
    let mut count = 0u64;
    let mut sum = 0.0f64;
    for row in &table.rows {
        let mut keep = true;
        for cond in &query.conds {
            if !matches(row, cond)? {
                keep = false;
                break;
            }
        }
        if !keep {
            continue;
        }
        count += 1;
        if let Agg::Sum(col) = &query.agg {
            match row.get(col) {
                Some(Cell::Num(n)) => sum += n,
                Some(Cell::Text(_)) => return Err(SandboxError::Parse(format!("column {col:?} is not numeric"))),
                None => return Err(SandboxError::Parse(format!("no such column {col:?}"))),
            }
        }
    }
    Ok(match query.agg {
        Agg::Count => count.to_string(),
        Agg::Sum(_) => sum.to_string(),
    })
}

impl Backend for QueryBackend {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn start(&self) -> Result<SandboxHandle, SandboxError> {
        Ok(self.handle(self.table.clone()))
    }

    fn fork(&self, handle: &SandboxHandle) -> Result<SandboxHandle, SandboxError> {
        Ok(self.handle(handle.state::<Arc<Table>>(&self.kind)?.clone()))
    }

    fn execute(&self, handle: &mut SandboxHandle, descriptor: &ToolDescriptor) -> Result<ToolResult, SandboxError> {
        let started = Instant::now();
        let table = handle.state::<Arc<Table>>(&self.kind)?.clone();
        if descriptor.tool_name() != "query" {
            return Err(SandboxError::MalformedArgs(format!("unknown tool {:?}", descriptor.tool_name())));
        }
        let args = parse_args(descriptor)?;
        let outcome = parse_query(arg_str(&args, "expr")?).and_then(|q| evaluate(&table, &q));
        if self.latency_ms > 0.0 {
            precise_wait(Duration::from_secs_f64(self.latency_ms / 1000.0));
        }
        Ok(ToolResult::ok(outcome?, elapsed_ms(started)))
    }

    fn will_mutate_state(&self, _descriptor: &ToolDescriptor) -> bool {
        false
    }

    fn snapshot(&self, handle: &SandboxHandle) -> Result<Vec<u8>, SandboxError> {
        let table = handle.state::<Arc<Table>>(&self.kind)?;
        Ok(serde_json::to_vec(table.as_ref()).expect("table serializes"))
    }

    fn restore(&self, bytes: &[u8]) -> Result<SandboxHandle, SandboxError> {
        let table: Table = serde_json::from_slice(bytes).map_err(|e| SandboxError::CorruptSnapshot(e.to_string()))?;
        Ok(self.handle(Arc::new(table)))
    }

    fn sample_descriptor(&self, rng: &mut dyn RngCore) -> ToolDescriptor {
        let species = ["pig", "cow", "chicken", "horse"][rng.gen_range(0..4)];
        let age = rng.gen_range(0..6);
        let expr = match rng.gen_range(0..3) {
            0 => format!("COUNT WHERE species = '{species}'"),
            1 => format!("SUM(age) WHERE age >= {age}"),
            _ => format!("SELECT COUNT(*) FROM {} WHERE species = {species} AND age < {age}", self.table.name),
        };
        self.describe("query", &json!({ "expr": expr })).expect("sampled args are well formed")
    }
}
