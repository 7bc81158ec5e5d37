//! Transactional-document schema: field registry, arithmetic equations and
//! structural rules.
//!
//! A schema is plain data. It can be built in code ([`builtin_transactional_schema`]),
//! loaded from a TOML schema file ([`load_schema`]) and rendered as the JSON
//! Schema that is embedded in extraction prompts ([`to_output_schema`]).
//!
//! Documents nest three levels deep: the global object holds a list of line
//! items (`line_items`), and every line item holds a list of sub items
//! (`sub_items`). Field paths in equations use the container keys as prefixes,
//! e.g. `line_items.net_total` or `line_items.sub_items.quantity`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// JSON Schema dialect of the rendered output schema.
pub const JSON_SCHEMA_DIALECT: &str = "https://json-schema.org/draft/2020-12/schema";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Global,
    LineItem,
    SubItem,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Global, Level::LineItem, Level::SubItem];

    pub fn depth(self) -> usize {
        match self {
            Level::Global => 0,
            Level::LineItem => 1,
            Level::SubItem => 2,
        }
    }

    pub fn child(self) -> Option<Level> {
        match self {
            Level::Global => Some(Level::LineItem),
            Level::LineItem => Some(Level::SubItem),
            Level::SubItem => None,
        }
    }

    /// Key under which the children of a record at this level are stored.
    pub fn child_key(self) -> Option<&'static str> {
        match self {
            Level::Global => Some("line_items"),
            Level::LineItem => Some("sub_items"),
            Level::SubItem => None,
        }
    }

    /// Dotted prefix used by equation paths for fields at this level.
    pub fn path_prefix(self) -> &'static str {
        match self {
            Level::Global => "",
            Level::LineItem => "line_items.",
            Level::SubItem => "line_items.sub_items.",
        }
    }

    fn def_name(self) -> &'static str {
        match self {
            Level::Global => "Invoice",
            Level::LineItem => "LineItem",
            Level::SubItem => "SubItem",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Global => "global",
            Level::LineItem => "line_item",
            Level::SubItem => "sub_item",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Amount,
    Rate,
    Integer,
    Text,
    TextList,
    AmountList,
}

impl FieldKind {
    pub fn is_list(self) -> bool {
        matches!(self, FieldKind::TextList | FieldKind::AmountList)
    }

    /// Scalar decimal kinds, the only ones allowed as plain equation operands.
    pub fn is_decimal_scalar(self) -> bool {
        matches!(self, FieldKind::Amount | FieldKind::Rate)
    }

    pub fn is_numeric(self) -> bool {
        !matches!(self, FieldKind::Text | FieldKind::TextList)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDef {
    pub name: String,
    pub level: Level,
    pub kind: FieldKind,
    pub default: Option<Decimal>,
    pub description: String,
}

impl FieldDef {
    pub fn new(name: &str, level: Level, kind: FieldKind, description: &str) -> Self {
        FieldDef {
            name: name.to_string(),
            level,
            kind,
            default: None,
            description: description.to_string(),
        }
    }

    pub fn with_default(mut self, default: Decimal) -> Self {
        self.default = Some(default);
        self
    }

    /// Dotted path of this field, as written in equations.
    pub fn path(&self) -> String {
        format!("{}{}", self.level.path_prefix(), self.name)
    }
}

/// Reference to a field from inside an equation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathRef {
    pub level: Level,
    pub field_name: String,
    /// `SUM(...)` over every child record (or every element of a list field).
    pub aggregate: bool,
}

impl PathRef {
    pub fn field(level: Level, name: &str) -> Self {
        PathRef {
            level,
            field_name: name.to_string(),
            aggregate: false,
        }
    }

    pub fn sum(level: Level, name: &str) -> Self {
        PathRef {
            level,
            field_name: name.to_string(),
            aggregate: true,
        }
    }

    fn dotted(&self) -> String {
        format!("{}{}", self.level.path_prefix(), self.field_name)
    }
}

impl fmt::Display for PathRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.aggregate {
            write!(f, "SUM({})", self.dotted())
        } else {
            f.write_str(&self.dotted())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Ref(PathRef),
    Product(PathRef, PathRef),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Ref(p) => write!(f, "{p}"),
            Term::Product(a, b) => write!(f, "{a} * {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedTerm {
    pub negative: bool,
    pub term: Term,
}

/// `lhs = ±term ± term ...`, bound at `level`: global equations hold once per
/// document, line-item equations once per line item, and so on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Equation {
    pub id: String,
    pub lhs: PathRef,
    pub rhs: Vec<SignedTerm>,
    pub level: Level,
    pub enabled: bool,
}

impl Equation {
    /// Every field reference of the equation, lhs first.
    pub fn refs(&self) -> impl Iterator<Item = &PathRef> {
        std::iter::once(&self.lhs).chain(self.rhs.iter().flat_map(|t| match &t.term {
            Term::Ref(p) => vec![p],
            Term::Product(a, b) => vec![a, b],
        }))
    }

    pub fn expr(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} =", self.lhs)?;
        for (i, t) in self.rhs.iter().enumerate() {
            match (i, t.negative) {
                (0, false) => write!(f, " {}", t.term)?,
                (0, true) => write!(f, " -{}", t.term)?,
                (_, false) => write!(f, " + {}", t.term)?,
                (_, true) => write!(f, " - {}", t.term)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleKind {
    /// The document has at least `min` line items.
    MinLineItems { min: usize },
    /// At least one of the global `fields` was extracted (not defaulted or inferred).
    RequiredOneOf { fields: Vec<String> },
    /// Every present value of `field` lies in `[min, max]`.
    RateBounds {
        field: String,
        #[serde(with = "rust_decimal::serde::str")]
        min: Decimal,
        #[serde(with = "rust_decimal::serde::str")]
        max: Decimal,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralRule {
    pub id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaDef {
    pub version: String,
    pub fields: Vec<FieldDef>,
    pub equations: Vec<Equation>,
    pub rules: Vec<StructuralRule>,
}

impl SchemaDef {
    pub fn field(&self, level: Level, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.level == level && f.name == name)
    }

    pub fn fields_at(&self, level: Level) -> impl Iterator<Item = &FieldDef> {
        self.fields.iter().filter(move |f| f.level == level)
    }

    /// Whether records at `level` exist in documents of this schema.
    pub fn has_level(&self, level: Level) -> bool {
        level == Level::Global || self.fields.iter().any(|f| f.level.depth() >= level.depth())
    }

    pub fn active_equations(&self) -> impl Iterator<Item = &Equation> {
        self.equations.iter().filter(|e| e.enabled)
    }

    pub fn equation(&self, id: &str) -> Option<&Equation> {
        self.equations.iter().find(|e| e.id == id)
    }

    /// Resolves a dotted path (`line_items.net_total`) to its field.
    pub fn resolve_path(&self, dotted: &str) -> Option<&FieldDef> {
        let (level, name) = split_path(dotted)?;
        self.field(level, name)
    }

    pub fn to_toml(&self) -> String {
        let file = SchemaFile::from(self);
        toml::to_string_pretty(&file).expect("schema serializes to TOML")
    }

    /// Checks every invariant of a schema definition.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for (i, f) in self.fields.iter().enumerate() {
            let location = format!("field[{i}] `{}`", f.name);
            if !is_identifier(&f.name) {
                return Err(SchemaError::InvalidField {
                    location,
                    message: "name must be an identifier".into(),
                });
            }
            if matches!(f.name.as_str(), "line_items" | "sub_items") {
                return Err(SchemaError::InvalidField {
                    location,
                    message: "name collides with a container key".into(),
                });
            }
            if !seen.insert((f.level, f.name.as_str())) {
                return Err(SchemaError::Duplicate {
                    what: "field",
                    id: f.name.clone(),
                    location,
                });
            }
            if let Some(d) = f.default {
                let ok = match f.kind {
                    FieldKind::Amount => true,
                    FieldKind::Rate => d >= Decimal::ZERO && d <= Decimal::ONE,
                    FieldKind::Integer => d.fract().is_zero(),
                    _ => false,
                };
                if !ok {
                    return Err(SchemaError::InvalidField {
                        location,
                        message: format!("default {d} does not match kind {:?}", f.kind),
                    });
                }
            }
        }

        let mut ids = HashSet::new();
        for (i, eq) in self.equations.iter().enumerate() {
            let location = format!("equation[{i}] `{}`", eq.id);
            if !ids.insert(eq.id.as_str()) {
                return Err(SchemaError::Duplicate {
                    what: "equation id",
                    id: eq.id.clone(),
                    location,
                });
            }
            self.check_equation(eq, &location)?;
        }

        let mut rule_ids = HashSet::new();
        for (i, rule) in self.rules.iter().enumerate() {
            let location = format!("rule[{i}] `{}`", rule.id);
            if !rule_ids.insert(rule.id.as_str()) {
                return Err(SchemaError::Duplicate {
                    what: "rule id",
                    id: rule.id.clone(),
                    location,
                });
            }
            match &rule.kind {
                RuleKind::MinLineItems { .. } => {}
                RuleKind::RequiredOneOf { fields } => {
                    for name in fields {
                        if self.field(Level::Global, name).is_none() {
                            return Err(SchemaError::UnknownField {
                                location,
                                field: name.clone(),
                            });
                        }
                    }
                }
                RuleKind::RateBounds { field, min, max } => {
                    let def = self.resolve_path(field).ok_or_else(|| SchemaError::UnknownField {
                        location: location.clone(),
                        field: field.clone(),
                    })?;
                    if !def.kind.is_decimal_scalar() || min > max {
                        return Err(SchemaError::InvalidRule {
                            location,
                            message: format!("bounds [{min}, {max}] on `{field}` are not usable"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_equation(&self, eq: &Equation, location: &str) -> Result<(), SchemaError> {
        let invalid = |message: String| SchemaError::InvalidEquation {
            location: location.to_string(),
            message,
        };
        if eq.lhs.aggregate {
            return Err(invalid("left-hand side cannot be an aggregate".into()));
        }
        if eq.lhs.level != eq.level {
            return Err(invalid("left-hand side must sit at the binding level".into()));
        }
        if eq.rhs.is_empty() {
            return Err(invalid("empty right-hand side".into()));
        }
        for t in &eq.rhs {
            if let Term::Product(a, b) = &t.term {
                if a.aggregate || b.aggregate {
                    return Err(invalid("product factors cannot be aggregates".into()));
                }
            }
        }
        for r in eq.refs() {
            let def = self.field(r.level, &r.field_name).ok_or_else(|| SchemaError::UnknownField {
                location: location.to_string(),
                field: r.dotted(),
            })?;
            if r.aggregate {
                let over_children = Some(r.level) == eq.level.child() && def.kind.is_decimal_scalar();
                let over_list = r.level == eq.level && def.kind == FieldKind::AmountList;
                if !over_children && !over_list {
                    return Err(invalid(format!(
                        "SUM({}) must range over a child level or an amount list",
                        r.dotted()
                    )));
                }
            } else {
                if r.level != eq.level {
                    return Err(invalid(format!("`{}` is not at the binding level", r.dotted())));
                }
                if !def.kind.is_decimal_scalar() {
                    return Err(invalid(format!("`{}` is not a decimal scalar", r.dotted())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("malformed schema file: {0}")]
    Malformed(String),
    #[error("{location}: unknown field `{field}`")]
    UnknownField { location: String, field: String },
    #[error("{location}: duplicate {what} `{id}`")]
    Duplicate {
        what: &'static str,
        id: String,
        location: String,
    },
    #[error("{location}: {message}")]
    InvalidField { location: String, message: String },
    #[error("{location}: {message}")]
    InvalidEquation { location: String, message: String },
    #[error("{location}: {message}")]
    InvalidRule { location: String, message: String },
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_path(dotted: &str) -> Option<(Level, &str)> {
    if let Some(rest) = dotted.strip_prefix("line_items.sub_items.") {
        Some((Level::SubItem, rest))
    } else if let Some(rest) = dotted.strip_prefix("line_items.") {
        Some((Level::LineItem, rest))
    } else if dotted.contains('.') {
        None
    } else {
        Some((Level::Global, dotted))
    }
}

// ---------------------------------------------------------------------------
// Equation strings

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Path(String),
    Sum,
    Eq,
    Plus,
    Minus,
    Times,
    Open,
    Close,
}

fn tokenize(s: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '=' => {
                chars.next();
                out.push(Tok::Eq);
            }
            '+' => {
                chars.next();
                out.push(Tok::Plus);
            }
            '-' | '−' => {
                chars.next();
                out.push(Tok::Minus);
            }
            '*' | '×' => {
                chars.next();
                out.push(Tok::Times);
            }
            '(' => {
                chars.next();
                out.push(Tok::Open);
            }
            ')' => {
                chars.next();
                out.push(Tok::Close);
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                if word == "SUM" {
                    out.push(Tok::Sum);
                } else {
                    out.push(Tok::Path(word));
                }
            }
            other => return Err(format!("unexpected character `{other}`")),
        }
    }
    Ok(out)
}

struct ExprParser {
    toks: Vec<Tok>,
    pos: usize,
}

impl ExprParser {
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn path(&mut self, aggregate: bool) -> Result<PathRef, String> {
        match self.next() {
            Some(Tok::Path(p)) => {
                let (level, name) = split_path(&p).ok_or_else(|| format!("unknown path prefix in `{p}`"))?;
                if !is_identifier(name) {
                    return Err(format!("bad field name in `{p}`"));
                }
                Ok(PathRef {
                    level,
                    field_name: name.to_string(),
                    aggregate,
                })
            }
            other => Err(format!("expected a field path, found {other:?}")),
        }
    }

    fn term(&mut self) -> Result<Term, String> {
        if self.peek() == Some(&Tok::Sum) {
            self.next();
            if self.next() != Some(Tok::Open) {
                return Err("expected `(` after SUM".into());
            }
            let p = self.path(true)?;
            if self.next() != Some(Tok::Close) {
                return Err("expected `)`".into());
            }
            return Ok(Term::Ref(p));
        }
        let a = self.path(false)?;
        if self.peek() == Some(&Tok::Times) {
            self.next();
            let b = self.path(false)?;
            return Ok(Term::Product(a, b));
        }
        Ok(Term::Ref(a))
    }
}

/// Parses `lhs = term (+|- term)*` into an equation bound at the lhs level.
pub fn parse_equation(id: &str, expr: &str) -> Result<Equation, String> {
    let mut p = ExprParser {
        toks: tokenize(expr)?,
        pos: 0,
    };
    let lhs = p.path(false)?;
    if p.next() != Some(Tok::Eq) {
        return Err("expected `=`".into());
    }
    let mut rhs = Vec::new();
    let mut negative = false;
    if p.peek() == Some(&Tok::Minus) {
        p.next();
        negative = true;
    }
    loop {
        let term = p.term()?;
        rhs.push(SignedTerm { negative, term });
        match p.next() {
            None => break,
            Some(Tok::Plus) => negative = false,
            Some(Tok::Minus) => negative = true,
            Some(t) => return Err(format!("unexpected token {t:?}")),
        }
    }
    Ok(Equation {
        id: id.to_string(),
        level: lhs.level,
        lhs,
        rhs,
        enabled: true,
    })
}

// ---------------------------------------------------------------------------
// Schema file

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    version: String,
    #[serde(default, rename = "field")]
    fields: Vec<FieldEntry>,
    #[serde(default, rename = "equation")]
    equations: Vec<EquationEntry>,
    #[serde(default, rename = "rule")]
    rules: Vec<StructuralRule>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldEntry {
    name: String,
    level: Level,
    kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<String>,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EquationEntry {
    id: String,
    expr: String,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    enabled: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl From<&SchemaDef> for SchemaFile {
    fn from(s: &SchemaDef) -> Self {
        SchemaFile {
            version: s.version.clone(),
            fields: s
                .fields
                .iter()
                .map(|f| FieldEntry {
                    name: f.name.clone(),
                    level: f.level,
                    kind: f.kind,
                    default: f.default.map(|d| d.to_string()),
                    description: f.description.clone(),
                })
                .collect(),
            equations: s
                .equations
                .iter()
                .map(|e| EquationEntry {
                    id: e.id.clone(),
                    expr: e.expr(),
                    enabled: e.enabled,
                })
                .collect(),
            rules: s.rules.clone(),
        }
    }
}

/// Parses and validates a TOML schema file.
pub fn load_schema(source: &str) -> Result<SchemaDef, SchemaError> {
    let file: SchemaFile = toml::from_str(source).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    let mut fields = Vec::with_capacity(file.fields.len());
    for (i, f) in file.fields.into_iter().enumerate() {
        let default = match &f.default {
            Some(raw) => Some(Decimal::from_str(raw).map_err(|e| SchemaError::InvalidField {
                location: format!("field[{i}] `{}`", f.name),
                message: format!("default `{raw}`: {e}"),
            })?),
            None => None,
        };
        fields.push(FieldDef {
            name: f.name,
            level: f.level,
            kind: f.kind,
            default,
            description: f.description,
        });
    }
    let mut equations = Vec::with_capacity(file.equations.len());
    for (i, e) in file.equations.into_iter().enumerate() {
        let mut eq = parse_equation(&e.id, &e.expr).map_err(|message| SchemaError::InvalidEquation {
            location: format!("equation[{i}] `{}`", e.id),
            message,
        })?;
        eq.enabled = e.enabled;
        equations.push(eq);
    }
    let schema = SchemaDef {
        version: file.version,
        fields,
        equations,
        rules: file.rules,
    };
    schema.validate()?;
    Ok(schema)
}

// ---------------------------------------------------------------------------
// Builtin schema

/// The default transactional-document schema.
pub fn builtin_transactional_schema() -> SchemaDef {
    use FieldKind::*;
    use Level::*;

    let zero = Decimal::ZERO;
    let one = Decimal::ONE;
    let fields = vec![
        FieldDef::new("currency", Global, Text, "Currency code or symbol of the amounts"),
        FieldDef::new("menutype_count", Global, Integer, "Number of distinct menu items or articles"),
        FieldDef::new("subtotal", Global, Amount, "Subtotal as printed on the document"),
        FieldDef::new("base_taxable_amount", Global, Amount, "Amount on which the tax is computed"),
        FieldDef::new("non_taxable_amount", Global, Amount, "Part of the net total that is not taxed")
            .with_default(zero),
        FieldDef::new("tax_rate", Global, Rate, "Tax rate applied to the taxable base"),
        FieldDef::new("total_tax", Global, Amount, "Total tax amount"),
        FieldDef::new("net_total", Global, Amount, "Total before tax"),
        FieldDef::new("gross_total", Global, Amount, "Total including tax"),
        FieldDef::new("commission", Global, Amount, "Service charge or commission").with_default(zero),
        FieldDef::new("prior_balance", Global, Amount, "Balance carried over from earlier")
            .with_default(zero),
        FieldDef::new("due_amount", Global, Amount, "Amount due before discounts"),
        FieldDef::new("net_discounts", Global, AmountList, "Discount amounts applied to the total"),
        FieldDef::new("net_due_amount", Global, Amount, "Amount due after discounts"),
        FieldDef::new("name", LineItem, Text, "Name of the article"),
        FieldDef::new("quantity", LineItem, Amount, "Quantity of the article").with_default(one),
        FieldDef::new("unit_price", LineItem, Amount, "Price of a single unit"),
        FieldDef::new("net_total", LineItem, Amount, "Line total before tax"),
        FieldDef::new("tax_amount", LineItem, Amount, "Tax charged on the line"),
        FieldDef::new("gross_total", LineItem, Amount, "Line total including tax"),
        FieldDef::new("name", SubItem, Text, "Name of the sub item or option"),
        FieldDef::new("quantity", SubItem, Amount, "Quantity of the sub item").with_default(one),
        FieldDef::new("net_total", SubItem, Amount, "Sub item total before tax"),
    ];

    let equations = [
        ("E1", "gross_total = net_total + total_tax"),
        ("E2", "total_tax = base_taxable_amount * tax_rate"),
        ("E3", "base_taxable_amount = SUM(line_items.net_total)"),
        ("E4", "net_total = base_taxable_amount + non_taxable_amount"),
        ("E5", "due_amount = gross_total + commission + prior_balance"),
        ("E6", "net_due_amount = due_amount - SUM(net_discounts)"),
        ("E7", "line_items.net_total = line_items.quantity * line_items.unit_price"),
        ("E8", "line_items.gross_total = line_items.net_total + line_items.tax_amount"),
        ("E9", "line_items.net_total = SUM(line_items.sub_items.net_total)"),
    ]
    .into_iter()
    .map(|(id, expr)| parse_equation(id, expr).expect("builtin equation parses"))
    .collect();

    let rules = vec![
        StructuralRule {
            id: "R1".into(),
            kind: RuleKind::MinLineItems { min: 1 },
        },
        StructuralRule {
            id: "R2".into(),
            kind: RuleKind::RequiredOneOf {
                fields: vec!["gross_total".into(), "net_total".into()],
            },
        },
        StructuralRule {
            id: "R3".into(),
            kind: RuleKind::RateBounds {
                field: "tax_rate".into(),
                min: zero,
                max: one,
            },
        },
    ];

    let schema = SchemaDef {
        version: "transactional-1".into(),
        fields,
        equations,
        rules,
    };
    debug_assert!(schema.validate().is_ok());
    schema
}

// ---------------------------------------------------------------------------
// Output schema

fn title_case(name: &str) -> String {
    name.split('_')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(first) => first.to_uppercase().chain(c).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn field_property(f: &FieldDef) -> Value {
    let any_of = if f.kind.is_list() {
        json!([{"items": {"type": "string"}, "type": "array"}, {"type": "null"}])
    } else {
        json!([{"type": "string"}, {"type": "null"}])
    };
    json!({
        "anyOf": any_of,
        "default": null,
        "description": f.description,
        "title": title_case(&f.name),
    })
}

/// Renders the JSON Schema (draft 2020-12) the model output must follow.
///
/// Every field is a nullable string (lists: nullable string arrays). Child
/// containers are required arrays referencing the nested definitions.
pub fn to_output_schema(s: &SchemaDef) -> Value {
    let mut defs = Map::new();
    for level in Level::ALL.iter().rev().copied() {
        if !s.has_level(level) {
            continue;
        }
        let mut props = Map::new();
        for f in s.fields_at(level) {
            props.insert(f.name.clone(), field_property(f));
        }
        if let (Some(key), Some(child)) = (level.child_key(), level.child()) {
            if s.has_level(child) {
                props.insert(
                    key.to_string(),
                    json!({
                        "items": {"$ref": format!("#/$defs/{}", child.def_name())},
                        "title": title_case(key),
                        "type": "array",
                    }),
                );
            }
        }
        let required: Vec<Value> = props.keys().map(|k| Value::String(k.clone())).collect();
        defs.insert(
            level.def_name().to_string(),
            json!({
                "properties": props,
                "required": required,
                "title": level.def_name(),
                "type": "object",
            }),
        );
    }
    // Innermost definitions were inserted first; present the outermost first.
    let defs: Map<String, Value> = defs.into_iter().rev().collect();
    json!({
        "$schema": JSON_SCHEMA_DIALECT,
        "$defs": defs,
        "$ref": format!("#/$defs/{}", Level::Global.def_name()),
    })
}
