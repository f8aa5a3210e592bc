//! Frontend for the restricted DP SQL dialect.
//!
//! The dialect covers exactly one shape of query: a single-table SELECT with
//! a `WITH DIFFERENTIAL_PRIVACY OPTIONS(...)` clause, SUM aggregations with
//! optional `@{L_inf=, L_1=, L_2=}` hints, and a GROUP BY list. A parsed
//! [`QueryPlan`] also records the key domain mode: open (groups discovered
//! from data, released only above a noisy threshold) or closed (the full key
//! domain is declared out-of-band and released exactly).

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// Maximum `max_groups_contributed` accepted; keeps the value exact in f64.
const MAX_GROUPS_LIMIT: f64 = 9.007199254740992e15;

/// A validated query: privacy options, grouping keys, and SUM aggregations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub epsilon: f64,
    pub delta: f64,
    pub max_groups_contributed: Option<u64>,
    pub group_keys: Vec<String>,
    pub aggregations: Vec<AggregationSpec>,
    pub source_table: String,
    pub domain_mode: DomainMode,
}

/// One `SUM(column) @{...} AS alias` item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub input_column: String,
    pub alias: String,
    pub l_inf: Option<f64>,
    pub l_1: Option<f64>,
    pub l_2: Option<f64>,
}

/// Whether the set of possible group keys is known ahead of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DomainMode {
    /// Groups are discovered from the data; releasing one leaks presence, so
    /// the histogram stage gates each group behind a noisy count threshold.
    OpenSet,
    /// The full list of key tuples is declared; every tuple is released.
    ClosedSet(Vec<Vec<String>>),
}

/// A contribution bound the query left unspecified and the pipeline must tune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TunableParameter {
    MaxGroupsContributed,
    LInf { aggregation: usize },
    L1 { aggregation: usize },
    L2 { aggregation: usize },
}

impl fmt::Display for TunableParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TunableParameter::MaxGroupsContributed => write!(f, "max_groups_contributed"),
            TunableParameter::LInf { aggregation } => write!(f, "L_inf(aggregation {aggregation})"),
            TunableParameter::L1 { aggregation } => write!(f, "L_1(aggregation {aggregation})"),
            TunableParameter::L2 { aggregation } => write!(f, "L_2(aggregation {aggregation})"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {message}")]
    Syntax { line: u32, col: u32, message: String },
    #[error("{line}:{col}: duplicate option `{name}`")]
    DuplicateOption { line: u32, col: u32, name: String },
    #[error("{line}:{col}: unknown option `{name}`")]
    UnknownOption { line: u32, col: u32, name: String },
    #[error("{line}:{col}: non-numeric parameter `{name}`")]
    NonNumeric { line: u32, col: u32, name: String },
    #[error("{line}:{col}: missing GROUP BY clause")]
    MissingGroupBy { line: u32, col: u32 },
    #[error("{line}:{col}: {message}")]
    Invalid { line: u32, col: u32, message: String },
}

/// Validation failure for a plan constructed or mutated outside the parser.
#[derive(Debug, Error, PartialEq)]
pub enum InvalidPlan {
    #[error("epsilon must be positive and finite")]
    Epsilon,
    #[error("delta must lie in [0, 1)")]
    Delta,
    #[error("max_groups_contributed must be at least 1")]
    MaxGroups,
    #[error("at least one group key is required")]
    NoGroupKeys,
    #[error("at least one aggregation is required")]
    NoAggregations,
    #[error("duplicate alias `{0}`")]
    DuplicateAlias(String),
    #[error("aggregation `{alias}`: {bound} must be positive and finite")]
    NonPositiveBound { alias: String, bound: &'static str },
    #[error("aggregation `{alias}`: {larger} must be at least L_inf")]
    BoundBelowLInf { alias: String, larger: &'static str },
    #[error("closed-set domain tuple has {found} keys, expected {expected}")]
    DomainArity { expected: usize, found: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("domain file contains no key tuples")]
    Empty,
    #[error("line {line}: expected {expected} tab-separated keys, found {found}")]
    Arity { line: usize, expected: usize, found: usize },
}

impl QueryPlan {
    /// Checks every structural invariant; the parser calls this on its output
    /// and call sites constructing plans by hand should too.
    pub fn validate(&self) -> Result<(), InvalidPlan> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(InvalidPlan::Epsilon);
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(InvalidPlan::Delta);
        }
        if self.max_groups_contributed == Some(0) {
            return Err(InvalidPlan::MaxGroups);
        }
        if self.group_keys.is_empty() {
            return Err(InvalidPlan::NoGroupKeys);
        }
        if self.aggregations.is_empty() {
            return Err(InvalidPlan::NoAggregations);
        }
        let mut aliases = BTreeSet::new();
        for agg in &self.aggregations {
            if !aliases.insert(agg.alias.as_str()) {
                return Err(InvalidPlan::DuplicateAlias(agg.alias.clone()));
            }
            for (bound, value) in [("L_inf", agg.l_inf), ("L_1", agg.l_1), ("L_2", agg.l_2)] {
                if let Some(v) = value {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(InvalidPlan::NonPositiveBound { alias: agg.alias.clone(), bound });
                    }
                }
            }
            if let (Some(inf), Some(l1)) = (agg.l_inf, agg.l_1) {
                if l1 < inf {
                    return Err(InvalidPlan::BoundBelowLInf { alias: agg.alias.clone(), larger: "L_1" });
                }
            }
            if let (Some(inf), Some(l2)) = (agg.l_inf, agg.l_2) {
                if l2 < inf {
                    return Err(InvalidPlan::BoundBelowLInf { alias: agg.alias.clone(), larger: "L_2" });
                }
            }
        }
        if let DomainMode::ClosedSet(rows) = &self.domain_mode {
            for row in rows {
                if row.len() != self.group_keys.len() {
                    return Err(InvalidPlan::DomainArity {
                        expected: self.group_keys.len(),
                        found: row.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Contribution bounds the plan requires but does not provide, in the order
/// they will be tuned: the global group cap first, then per-aggregation
/// magnitude caps in query order.
///
/// With an open key domain, every aggregation needs the pair
/// (max_groups_contributed, L_inf) so the released subset of groups can be
/// selected privately. With a closed domain, any one of L_1, L_2, or that
/// pair suffices; when none is present the pair is the tuning target, since
/// norm bounds are not quantile-tunable from per-group magnitudes.
pub fn missing_bounds(plan: &QueryPlan) -> Vec<TunableParameter> {
    let open = matches!(plan.domain_mode, DomainMode::OpenSet);
    let mut needs_max_groups = false;
    let mut needs_l_inf = Vec::new();
    for (i, agg) in plan.aggregations.iter().enumerate() {
        let pair_needed = open || (agg.l_1.is_none() && agg.l_2.is_none());
        if !pair_needed {
            continue;
        }
        if plan.max_groups_contributed.is_none() {
            needs_max_groups = true;
        }
        if agg.l_inf.is_none() {
            needs_l_inf.push(i);
        }
    }
    let mut out = Vec::new();
    if needs_max_groups {
        out.push(TunableParameter::MaxGroupsContributed);
    }
    out.extend(needs_l_inf.into_iter().map(|aggregation| TunableParameter::LInf { aggregation }));
    out
}

/// Parses a closed-set domain file: one key tuple per line, tab-separated.
/// Blank lines are ignored; every tuple must have `arity` fields.
pub fn load_domain(text: &str, arity: usize) -> Result<Vec<Vec<String>>, DomainError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if fields.len() != arity {
            return Err(DomainError::Arity { line: idx + 1, expected: arity, found: fields.len() });
        }
        rows.push(fields);
    }
    if rows.is_empty() {
        return Err(DomainError::Empty);
    }
    Ok(rows)
}

/// Renders a plan as canonical single-line dialect text. Round-trips:
/// `parse_query(&render_query(p))` equals `p` for any valid open-set plan
/// (the closed-set domain travels out-of-band, not in the text).
pub fn render_query(plan: &QueryPlan) -> String {
    let mut out = String::from("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS(");
    out.push_str(&format!("epsilon={}, delta={}", plan.epsilon, plan.delta));
    if let Some(c) = plan.max_groups_contributed {
        out.push_str(&format!(", max_groups_contributed={c}"));
    }
    out.push_str(") ");
    for key in &plan.group_keys {
        out.push_str(key);
        out.push_str(", ");
    }
    let items: Vec<String> = plan
        .aggregations
        .iter()
        .map(|agg| {
            let mut hints = Vec::new();
            if let Some(v) = agg.l_inf {
                hints.push(format!("L_inf={v}"));
            }
            if let Some(v) = agg.l_1 {
                hints.push(format!("L_1={v}"));
            }
            if let Some(v) = agg.l_2 {
                hints.push(format!("L_2={v}"));
            }
            let hint_text = if hints.is_empty() {
                String::new()
            } else {
                format!(" @{{{}}}", hints.join(", "))
            };
            format!("SUM({}){} AS {}", agg.input_column, hint_text, agg.alias)
        })
        .collect();
    out.push_str(&items.join(", "));
    out.push_str(&format!(" FROM {} GROUP BY {}", plan.source_table, plan.group_keys.join(", ")));
    out
}

pub fn parse_query(text: &str) -> Result<QueryPlan, ParseError> {
    Parser::new(lex(text)?).parse()
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Ident(String),
    Number(f64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    At,
    Comma,
    Eq,
    Semi,
    Eof,
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    line: u32,
    col: u32,
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    col: u32,
}

impl Cursor<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> char {
        let c = self.chars.next().expect("bump past end of input");
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }
}

fn lex(text: &str) -> Result<Vec<Tok>, ParseError> {
    let mut toks = Vec::new();
    let mut cur = Cursor { chars: text.chars().peekable(), line: 1, col: 1 };
    while let Some(c) = cur.peek() {
        let (tline, tcol) = (cur.line, cur.col);
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut ident = String::new();
            while let Some(c) = cur.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    ident.push(cur.bump());
                } else {
                    break;
                }
            }
            toks.push(Tok { kind: TokKind::Ident(ident), line: tline, col: tcol });
            continue;
        }
        if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' {
            let malformed = |lit: &str| ParseError::Syntax {
                line: tline,
                col: tcol,
                message: format!("malformed number `{lit}`"),
            };
            let mut lit = String::new();
            if c == '-' || c == '+' {
                lit.push(cur.bump());
            }
            let mut saw_digit = false;
            while let Some(c) = cur.peek() {
                if c.is_ascii_digit() {
                    saw_digit = true;
                    lit.push(cur.bump());
                } else {
                    break;
                }
            }
            if cur.peek() == Some('.') {
                lit.push(cur.bump());
                while let Some(c) = cur.peek() {
                    if c.is_ascii_digit() {
                        saw_digit = true;
                        lit.push(cur.bump());
                    } else {
                        break;
                    }
                }
            }
            if !saw_digit {
                return Err(malformed(&lit));
            }
            if matches!(cur.peek(), Some('e') | Some('E')) {
                lit.push(cur.bump());
                if matches!(cur.peek(), Some('-') | Some('+')) {
                    lit.push(cur.bump());
                }
                let mut exp_digit = false;
                while let Some(c) = cur.peek() {
                    if c.is_ascii_digit() {
                        exp_digit = true;
                        lit.push(cur.bump());
                    } else {
                        break;
                    }
                }
                if !exp_digit {
                    return Err(malformed(&lit));
                }
            }
            let value: f64 = lit.parse().map_err(|_| malformed(&lit))?;
            toks.push(Tok { kind: TokKind::Number(value), line: tline, col: tcol });
            continue;
        }
        let kind = match c {
            '(' => TokKind::LParen,
            ')' => TokKind::RParen,
            '{' => TokKind::LBrace,
            '}' => TokKind::RBrace,
            '@' => TokKind::At,
            ',' => TokKind::Comma,
            '=' => TokKind::Eq,
            ';' => TokKind::Semi,
            other => {
                return Err(ParseError::Syntax {
                    line: tline,
                    col: tcol,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        cur.bump();
        toks.push(Tok { kind, line: tline, col: tcol });
    }
    toks.push(Tok { kind: TokKind::Eof, line: cur.line, col: cur.col });
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn new(toks: Vec<Tok>) -> Self {
        Parser { toks, pos: 0 }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Tok {
        let tok = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        tok
    }

    fn syntax(tok: &Tok, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { line: tok.line, col: tok.col, message: message.into() }
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().kind, TokKind::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Tok, ParseError> {
        if self.peek_keyword(kw) {
            Ok(self.next())
        } else {
            Err(Self::syntax(self.peek(), format!("expected `{kw}`")))
        }
    }

    fn expect_kind(&mut self, kind: TokKind, what: &str) -> Result<Tok, ParseError> {
        if self.peek().kind == kind {
            Ok(self.next())
        } else {
            Err(Self::syntax(self.peek(), format!("expected {what}")))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Tok), ParseError> {
        match self.peek().kind.clone() {
            TokKind::Ident(s) => {
                let tok = self.next();
                Ok((s, tok))
            }
            _ => Err(Self::syntax(self.peek(), format!("expected {what}"))),
        }
    }

    fn expect_number(&mut self, name: &str) -> Result<(f64, Tok), ParseError> {
        match self.peek().kind {
            TokKind::Number(v) => {
                let tok = self.next();
                Ok((v, tok))
            }
            _ => {
                let tok = self.peek();
                Err(ParseError::NonNumeric { line: tok.line, col: tok.col, name: name.into() })
            }
        }
    }

    fn invalid(tok: &Tok, message: impl Into<String>) -> ParseError {
        ParseError::Invalid { line: tok.line, col: tok.col, message: message.into() }
    }

    fn parse(mut self) -> Result<QueryPlan, ParseError> {
        self.expect_keyword("SELECT")?;
        self.expect_keyword("WITH")?;
        self.expect_keyword("DIFFERENTIAL_PRIVACY")?;
        self.expect_keyword("OPTIONS")?;
        self.expect_kind(TokKind::LParen, "`(`")?;

        let mut epsilon: Option<f64> = None;
        let mut delta: Option<f64> = None;
        let mut max_groups: Option<u64> = None;
        loop {
            let (name, name_tok) = self.expect_ident("an option name")?;
            self.expect_kind(TokKind::Eq, "`=`")?;
            let (value, value_tok) = self.expect_number(&name)?;
            match name.to_ascii_lowercase().as_str() {
                "epsilon" => {
                    if epsilon.is_some() {
                        return Err(ParseError::DuplicateOption {
                            line: name_tok.line,
                            col: name_tok.col,
                            name,
                        });
                    }
                    if !(value > 0.0) || !value.is_finite() {
                        return Err(Self::invalid(&value_tok, "epsilon must be positive"));
                    }
                    epsilon = Some(value);
                }
                "delta" => {
                    if delta.is_some() {
                        return Err(ParseError::DuplicateOption {
                            line: name_tok.line,
                            col: name_tok.col,
                            name,
                        });
                    }
                    if !(0.0..1.0).contains(&value) {
                        return Err(Self::invalid(&value_tok, "delta must lie in [0, 1)"));
                    }
                    delta = Some(value);
                }
                "max_groups_contributed" => {
                    if max_groups.is_some() {
                        return Err(ParseError::DuplicateOption {
                            line: name_tok.line,
                            col: name_tok.col,
                            name,
                        });
                    }
                    if !(value >= 1.0) || value.fract() != 0.0 || value > MAX_GROUPS_LIMIT {
                        return Err(Self::invalid(
                            &value_tok,
                            "max_groups_contributed must be a positive integer",
                        ));
                    }
                    max_groups = Some(value as u64);
                }
                _ => {
                    return Err(ParseError::UnknownOption {
                        line: name_tok.line,
                        col: name_tok.col,
                        name,
                    })
                }
            }
            match self.peek().kind {
                TokKind::Comma => {
                    self.next();
                }
                TokKind::RParen => break,
                _ => return Err(Self::syntax(self.peek(), "expected `,` or `)`")),
            }
        }
        let close = self.expect_kind(TokKind::RParen, "`)`")?;
        let epsilon = epsilon.ok_or_else(|| Self::invalid(&close, "missing required option `epsilon`"))?;
        let delta = delta.ok_or_else(|| Self::invalid(&close, "missing required option `delta`"))?;

        let mut selected_keys: Vec<(String, Tok)> = Vec::new();
        let mut aggregations: Vec<AggregationSpec> = Vec::new();
        loop {
            if self.peek_keyword("FROM") {
                return Err(Self::syntax(self.peek(), "expected a select item before `FROM`"));
            }
            if self.peek_keyword("SUM") {
                aggregations.push(self.parse_aggregation()?);
            } else {
                let (name, tok) = self.expect_ident("a column name or `SUM`")?;
                selected_keys.push((name, tok));
            }
            if self.peek().kind == TokKind::Comma {
                self.next();
                continue;
            }
            if self.peek_keyword("FROM") {
                break;
            }
            return Err(Self::syntax(self.peek(), "expected `,` or `FROM`"));
        }
        self.expect_keyword("FROM")?;
        let (source_table, _) = self.expect_ident("a table name")?;

        if self.peek().kind == TokKind::Eof || self.peek().kind == TokKind::Semi {
            let tok = self.peek();
            return Err(ParseError::MissingGroupBy { line: tok.line, col: tok.col });
        }
        self.expect_keyword("GROUP")?;
        self.expect_keyword("BY")?;
        let mut group_keys = Vec::new();
        loop {
            let (key, _) = self.expect_ident("a group key")?;
            group_keys.push(key);
            if self.peek().kind == TokKind::Comma {
                self.next();
                continue;
            }
            break;
        }
        if self.peek().kind == TokKind::Semi {
            self.next();
        }
        let eof = self.peek().clone();
        if eof.kind != TokKind::Eof {
            return Err(Self::syntax(&eof, "unexpected trailing input"));
        }

        for (key, tok) in &selected_keys {
            if !group_keys.contains(key) {
                return Err(Self::invalid(tok, format!("selected column `{key}` is not in GROUP BY")));
            }
        }
        if aggregations.is_empty() {
            return Err(Self::invalid(&eof, "at least one SUM aggregation is required"));
        }

        let plan = QueryPlan {
            epsilon,
            delta,
            max_groups_contributed: max_groups,
            group_keys,
            aggregations,
            source_table,
            domain_mode: DomainMode::OpenSet,
        };
        plan.validate().map_err(|e| Self::invalid(&eof, e.to_string()))?;
        Ok(plan)
    }

    fn parse_aggregation(&mut self) -> Result<AggregationSpec, ParseError> {
        self.expect_keyword("SUM")?;
        self.expect_kind(TokKind::LParen, "`(`")?;
        let (input_column, _) = self.expect_ident("a column name")?;
        self.expect_kind(TokKind::RParen, "`)`")?;

        let mut l_inf: Option<f64> = None;
        let mut l_1: Option<f64> = None;
        let mut l_2: Option<f64> = None;
        if self.peek().kind == TokKind::At {
            self.next();
            self.expect_kind(TokKind::LBrace, "`{`")?;
            loop {
                let (name, name_tok) = self.expect_ident("a bound name")?;
                self.expect_kind(TokKind::Eq, "`=`")?;
                let (value, value_tok) = self.expect_number(&name)?;
                let slot = match name.to_ascii_lowercase().as_str() {
                    "l_inf" => &mut l_inf,
                    "l_1" => &mut l_1,
                    "l_2" => &mut l_2,
                    _ => {
                        return Err(ParseError::UnknownOption {
                            line: name_tok.line,
                            col: name_tok.col,
                            name,
                        })
                    }
                };
                if slot.is_some() {
                    return Err(ParseError::DuplicateOption {
                        line: name_tok.line,
                        col: name_tok.col,
                        name,
                    });
                }
                if !(value > 0.0) || !value.is_finite() {
                    return Err(Self::invalid(&value_tok, format!("{name} must be positive")));
                }
                *slot = Some(value);
                match self.peek().kind {
                    TokKind::Comma => {
                        self.next();
                    }
                    TokKind::RBrace => break,
                    _ => return Err(Self::syntax(self.peek(), "expected `,` or `}`")),
                }
            }
            self.expect_kind(TokKind::RBrace, "`}`")?;
        }
        self.expect_keyword("AS")?;
        let (alias, _) = self.expect_ident("an alias")?;
        Ok(AggregationSpec { input_column, alias, l_inf, l_1, l_2 })
    }
}
