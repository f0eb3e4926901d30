//! Model formulas and design matrices.
//!
//! A formula is a `+`-separated list of terms; a term is a `:`-separated
//! product of factors. Factors:
//!
//! * `x`            the column itself (categorical columns expand to
//!                  reference-coded indicators, first level as reference)
//! * `age/10`       the column divided by a constant
//! * `charlson[2]`  indicator of one categorical level
//! * `I(z < -0.5)`, `I(z > 2)`  threshold indicators
//!
//! The intercept is implicit and always first.

use std::fmt;
use std::str::FromStr;

use crate::matrix::Matrix;
use crate::table::{ColumnKind, Dataset, TableError};

#[derive(Debug, thiserror::Error)]
pub enum FormulaError {
    #[error("formula syntax: {0}")]
    Syntax(String),
    #[error("column `{0}` referenced by the formula is not in the dataset")]
    UnknownColumn(String),
    #[error("column `{0}` has missing cells; filter or impute first")]
    MissingData(String),
    #[error("column `{column}` has no level `{level}`")]
    UnknownLevel { column: String, level: String },
    #[error("`{0}` is categorical; use a level indicator or the bare name")]
    CategoricalArithmetic(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Column { name: String, divisor: Option<f64> },
    Level { name: String, level: String },
    Less { name: String, threshold: f64 },
    Greater { name: String, threshold: f64 },
}

impl Factor {
    pub fn column(&self) -> &str {
        match self {
            Factor::Column { name, .. }
            | Factor::Level { name, .. }
            | Factor::Less { name, .. }
            | Factor::Greater { name, .. } => name,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Column { name, divisor: None } => f.write_str(name),
            Factor::Column { name, divisor: Some(d) } => write!(f, "{name}/{d}"),
            Factor::Level { name, level } => write!(f, "{name}[{level}]"),
            Factor::Less { name, threshold } => write!(f, "I({name} < {threshold})"),
            Factor::Greater { name, threshold } => write!(f, "I({name} > {threshold})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term(pub Vec<Factor>);

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, fac) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{fac}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Formula {
    pub terms: Vec<Term>,
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("1");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_number(s: &str) -> Result<f64, FormulaError> {
    let v: f64 = s.trim().parse().map_err(|_| FormulaError::Syntax(format!("bad number `{s}`")))?;
    if !v.is_finite() {
        return Err(FormulaError::Syntax(format!("non-finite number `{s}`")));
    }
    Ok(v)
}

fn parse_factor(s: &str) -> Result<Factor, FormulaError> {
    let s = s.trim();
    let syntax = |msg: &str| FormulaError::Syntax(format!("{msg}: `{s}`"));
    if let Some(inner) = s.strip_prefix("I(").and_then(|r| r.strip_suffix(')')) {
        let (op, pos) = match (inner.find('<'), inner.find('>')) {
            (Some(p), None) => ('<', p),
            (None, Some(p)) => ('>', p),
            _ => return Err(syntax("indicator needs exactly one of < or >")),
        };
        let name = inner[..pos].trim();
        if !valid_name(name) {
            return Err(syntax("bad column name"));
        }
        let threshold = parse_number(&inner[pos + 1..])?;
        let name = name.to_string();
        return Ok(if op == '<' { Factor::Less { name, threshold } } else { Factor::Greater { name, threshold } });
    }
    if let Some(open) = s.find('[') {
        let name = s[..open].trim();
        let level = s[open + 1..].strip_suffix(']').ok_or_else(|| syntax("unclosed level"))?.trim();
        if !valid_name(name) || level.is_empty() || level.contains(['[', ']']) {
            return Err(syntax("bad level indicator"));
        }
        return Ok(Factor::Level { name: name.to_string(), level: level.to_string() });
    }
    if let Some((name, div)) = s.split_once('/') {
        let name = name.trim();
        let d = parse_number(div)?;
        if !valid_name(name) || d == 0.0 {
            return Err(syntax("bad scaled column"));
        }
        return Ok(Factor::Column { name: name.to_string(), divisor: Some(d) });
    }
    if valid_name(s) {
        return Ok(Factor::Column { name: s.to_string(), divisor: None });
    }
    Err(syntax("unrecognised factor"))
}

/// Split on `sep` outside parentheses and brackets.
fn split_top(s: &str, seps: &[char]) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    let mut prev_is_operand_end = false;
    for c in s.chars() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            _ => {}
        }
        if depth == 0 && seps.contains(&c) && (c != '+' || prev_is_operand_end) {
            out.push(std::mem::take(&mut cur));
            prev_is_operand_end = false;
            continue;
        }
        cur.push(c);
        if !c.is_whitespace() {
            // `+` right after an operator or `/` is a sign, not a separator.
            prev_is_operand_end = !matches!(c, '/' | ':' | '*');
        }
    }
    out.push(cur);
    out
}

impl FromStr for Formula {
    type Err = FormulaError;

    fn from_str(s: &str) -> Result<Self, FormulaError> {
        let s = s.trim();
        if s.is_empty() || s == "1" {
            return Ok(Formula::default());
        }
        let mut terms = Vec::new();
        for t in split_top(s, &['+']) {
            let t = t.trim();
            if t.is_empty() {
                return Err(FormulaError::Syntax(format!("empty term in `{s}`")));
            }
            if t == "1" {
                continue;
            }
            let factors = split_top(t, &[':', '*']).iter().map(|f| parse_factor(f)).collect::<Result<Vec<_>, _>>()?;
            terms.push(Term(factors));
        }
        Ok(Formula { terms })
    }
}

impl Formula {
    pub fn parse(s: &str) -> Result<Self, FormulaError> {
        s.parse()
    }

    /// Main effects of the given columns.
    pub fn main_effects(names: &[&str]) -> Self {
        Formula {
            terms: names.iter().map(|n| Term(vec![Factor::Column { name: n.to_string(), divisor: None }])).collect(),
        }
    }

    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for f in &t.0 {
                if !out.contains(&f.column()) {
                    out.push(f.column());
                }
            }
        }
        out
    }

    pub fn with_term(mut self, term: &str) -> Result<Self, FormulaError> {
        let extra = Formula::parse(term)?;
        self.terms.extend(extra.terms);
        Ok(self)
    }

    pub fn without_column(&self, name: &str) -> Self {
        Formula { terms: self.terms.iter().filter(|t| t.0.iter().all(|f| f.column() != name)).cloned().collect() }
    }

    pub fn references(&self, name: &str) -> bool {
        self.columns().contains(&name)
    }
}

/// Design matrix with column labels (`(Intercept)` first).
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: Matrix,
    pub names: Vec<String>,
}

impl Design {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub const INTERCEPT: &str = "(Intercept)";

type Expanded = Vec<(String, Vec<f64>)>;

fn expand_factor(d: &Dataset, f: &Factor, overrides: &[(&str, f64)]) -> Result<Expanded, FormulaError> {
    let name = f.column();
    let col = d.column(name).map_err(|_| FormulaError::UnknownColumn(name.to_string()))?;
    let n = d.n_rows();
    let over = overrides.iter().find(|(o, _)| *o == name).map(|(_, v)| *v);
    if over.is_none() && !col.is_fully_observed() {
        return Err(FormulaError::MissingData(name.to_string()));
    }
    let raw: std::borrow::Cow<[f64]> = match over {
        Some(v) => std::borrow::Cow::Owned(vec![v; n]),
        None => std::borrow::Cow::Borrowed(col.values()),
    };
    let levels = col.kind.levels();
    Ok(match f {
        Factor::Column { divisor, .. } => match (levels, divisor) {
            (Some(_), Some(_)) => return Err(FormulaError::CategoricalArithmetic(name.to_string())),
            (Some(levels), None) => levels
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, l)| {
                    let k = k as f64;
                    (format!("{name}[{l}]"), raw.iter().map(|v| f64::from(u8::from(*v == k))).collect())
                })
                .collect(),
            (None, d) => {
                let div = d.unwrap_or(1.0);
                vec![(f.to_string(), raw.iter().map(|v| v / div).collect())]
            }
        },
        Factor::Level { level, .. } => {
            let levels = levels.ok_or_else(|| FormulaError::CategoricalArithmetic(name.to_string()))?;
            let k = levels
                .iter()
                .position(|l| l == level)
                .ok_or_else(|| FormulaError::UnknownLevel { column: name.to_string(), level: level.clone() })?
                as f64;
            vec![(f.to_string(), raw.iter().map(|v| f64::from(u8::from(*v == k))).collect())]
        }
        Factor::Less { threshold, .. } | Factor::Greater { threshold, .. } => {
            if levels.is_some() {
                return Err(FormulaError::CategoricalArithmetic(name.to_string()));
            }
            let less = matches!(f, Factor::Less { .. });
            let t = *threshold;
            vec![(
                f.to_string(),
                raw.iter().map(|v| f64::from(u8::from(if less { *v < t } else { *v > t }))).collect(),
            )]
        }
    })
}

pub fn design_matrix(d: &Dataset, formula: &Formula) -> Result<Design, FormulaError> {
    design_matrix_with(d, formula, &[])
}

/// Design matrix with some columns replaced by a constant, e.g. `x = 1` for
/// counterfactual prediction. Overridden columns may be masked in `d`.
pub fn design_matrix_with(d: &Dataset, formula: &Formula, overrides: &[(&str, f64)]) -> Result<Design, FormulaError> {
    let n = d.n_rows();
    let mut names = vec![INTERCEPT.to_string()];
    let mut columns = vec![vec![1.0; n]];
    for term in &formula.terms {
        let mut acc: Expanded = vec![(String::new(), vec![1.0; n])];
        for f in &term.0 {
            let parts = expand_factor(d, f, overrides)?;
            let mut next = Vec::with_capacity(acc.len() * parts.len());
            for (an, av) in &acc {
                for (pn, pv) in &parts {
                    let label = if an.is_empty() { pn.clone() } else { format!("{an}:{pn}") };
                    next.push((label, av.iter().zip(pv).map(|(a, b)| a * b).collect()));
                }
            }
            acc = next;
        }
        for (label, v) in acc {
            names.push(label);
            columns.push(v);
        }
    }
    Ok(Design { x: Matrix::from_columns(n, &columns), names })
}

/// Numeric features for learners: the design without its intercept column.
pub fn feature_matrix(d: &Dataset, formula: &Formula, overrides: &[(&str, f64)]) -> Result<Design, FormulaError> {
    let full = design_matrix_with(d, formula, overrides)?;
    let keep: Vec<usize> = (1..full.x.cols()).collect();
    Ok(Design { x: full.x.select_columns(&keep), names: full.names[1..].to_vec() })
}

/// Check that every referenced column exists with a compatible kind.
pub fn check_columns(schema_has: impl Fn(&str) -> Option<ColumnKind>, formula: &Formula) -> Result<(), FormulaError> {
    for t in &formula.terms {
        for f in &t.0 {
            let kind = schema_has(f.column()).ok_or_else(|| FormulaError::UnknownColumn(f.column().to_string()))?;
            if let (Factor::Level { level, .. }, ColumnKind::Categorical(levels)) = (f, &kind) {
                if !levels.contains(level) {
                    return Err(FormulaError::UnknownLevel { column: f.column().to_string(), level: level.clone() });
                }
            }
        }
    }
    Ok(())
}
