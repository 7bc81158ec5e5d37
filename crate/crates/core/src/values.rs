//! Typed values, locale-robust number coercion and explicit/implicit documents.
//!
//! Models return every field as a string (the *explicit* document). Coercing
//! those strings to decimals, integers and text gives the *implicit* document,
//! which the resolver then completes.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{FieldKind, Level, SchemaDef};

// ---------------------------------------------------------------------------
// Number parsing

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot read `{raw}` as a number: {reason}")]
pub struct NumberError {
    pub raw: String,
    pub reason: String,
}

fn number_error(raw: &str, reason: &str) -> NumberError {
    NumberError {
        raw: raw.to_string(),
        reason: reason.to_string(),
    }
}

fn is_sep(c: char) -> bool {
    c == '.' || c == ','
}

/// Splits `raw` into (negative, digit/separator core).
///
/// The core spans from the first to the last digit. A separator directly in
/// front of the first digit is kept (".5") unless it closes a word ("Rp.5").
fn numeric_core(raw: &str) -> Result<(bool, String), NumberError> {
    let chars: Vec<char> = raw.chars().collect();
    let first = chars
        .iter()
        .position(|c| c.is_ascii_digit())
        .ok_or_else(|| number_error(raw, "no digits"))?;
    let last = chars.iter().rposition(|c| c.is_ascii_digit()).unwrap();

    let mut start = first;
    if first > 0 && is_sep(chars[first - 1]) {
        let before = if first >= 2 { Some(chars[first - 2]) } else { None };
        if !matches!(before, Some(c) if c.is_alphanumeric()) {
            start = first - 1;
        }
    }

    let prefix = &chars[..start];
    let suffix = &chars[last + 1..];
    let negative = prefix.iter().any(|&c| c == '-' || c == '−')
        || (prefix.contains(&'(') && suffix.contains(&')'));

    let core: String = chars[start..=last]
        .iter()
        .filter(|&&c| c.is_ascii_digit() || is_sep(c))
        .collect();
    Ok((negative, core))
}

fn to_decimal(raw: &str, negative: bool, digits: &str) -> Result<Decimal, NumberError> {
    let text = if digits.starts_with('.') {
        format!("0{digits}")
    } else {
        digits.to_string()
    };
    let value = Decimal::from_str_exact(&text).map_err(|_| number_error(raw, "out of range"))?;
    Ok(if negative { -value } else { value })
}

/// Normalises the separators of a core to a plain dot-decimal string.
fn normalise_separators(raw: &str, core: &str, single_is_decimal: bool) -> Result<String, NumberError> {
    let dots = core.matches('.').count();
    let commas = core.matches(',').count();
    match (dots, commas) {
        (0, 0) => Ok(core.to_string()),
        (d, c) if d > 0 && c > 0 => {
            let last = core.rfind(is_sep).unwrap();
            let decimal = core[last..].chars().next().unwrap();
            let occurrences = if decimal == '.' { d } else { c };
            if occurrences > 1 {
                return Err(number_error(raw, "conflicting separators"));
            }
            let grouping = if decimal == '.' { ',' } else { '.' };
            if core[last..].contains(grouping) {
                return Err(number_error(raw, "conflicting separators"));
            }
            Ok(core.replace(grouping, "").replace(',', "."))
        }
        (d, c) => {
            let sep = if d > 0 { '.' } else { ',' };
            if d + c > 1 {
                // Repeated single separator: digit grouping only.
                return Ok(core.replace(sep, ""));
            }
            let pos = core.find(sep).unwrap();
            let (int_part, frac_part) = (&core[..pos], &core[pos + 1..]);
            let thousands = !single_is_decimal
                && frac_part.len() == 3
                && !int_part.is_empty()
                && int_part != "0";
            if thousands {
                Ok(format!("{int_part}{frac_part}"))
            } else {
                Ok(format!("{int_part}.{frac_part}"))
            }
        }
    }
}

/// Parses a monetary amount written with any common separator convention.
///
/// Rules, in order:
/// * currency symbols, letters and spaces around and inside the number are dropped;
/// * a leading `-` or a parenthesised value is negative;
/// * with both `.` and `,` present the rightmost kind is the decimal separator
///   and the other kind is digit grouping;
/// * a single kind repeated (`1.234.567`) is digit grouping;
/// * a single separator followed by exactly three digits, with a nonzero
///   integer part in front of it, is digit grouping (`18,000`);
/// * any other single separator is the decimal separator (`3,5`, `0.125`).
pub fn parse_amount(raw: &str) -> Result<Decimal, NumberError> {
    let (negative, core) = numeric_core(raw)?;
    let digits = normalise_separators(raw, &core, false)?;
    to_decimal(raw, negative, &digits)
}

/// Parses a tax rate into a fraction.
///
/// `10%` and `10` both read as 0.10: a percent sign divides by 100, and bare
/// values in (1, 100] are taken to be percentages. A single separator is
/// always decimal here. Values outside [0, 1] are returned as they are and
/// left to the rate-bound rule.
pub fn parse_rate(raw: &str) -> Result<Decimal, NumberError> {
    let (negative, core) = numeric_core(raw)?;
    let digits = normalise_separators(raw, &core, true)?;
    let value = to_decimal(raw, negative, &digits)?;
    let hundred = Decimal::ONE_HUNDRED;
    if raw.contains('%') || (value > Decimal::ONE && value <= hundred) {
        Ok((value / hundred).normalize())
    } else {
        Ok(value)
    }
}

/// Parses a whole number ("3", "1,200").
pub fn parse_integer(raw: &str) -> Result<i64, NumberError> {
    let value = parse_amount(raw)?;
    if !value.fract().is_zero() {
        return Err(number_error(raw, "not a whole number"));
    }
    i64::try_from(value).map_err(|_| number_error(raw, "out of range"))
}

/// `|a - b| <= rel_tol * max(|a|, |b|)`.
pub fn approx_equal(a: Decimal, b: Decimal, rel_tol: Decimal) -> bool {
    match a.checked_sub(b) {
        Some(diff) => diff.abs() <= rel_tol.saturating_mul(a.abs().max(b.abs())),
        None => false,
    }
}

/// Canonical dot-decimal form: no trailing zeros, no exponent.
pub fn canonical_decimal(d: Decimal) -> String {
    d.normalize().to_string()
}

// ---------------------------------------------------------------------------
// Documents

/// One object of a document: its own fields (in schema order) and its
/// children at the next level (`line_items` for the global object,
/// `sub_items` for a line item).
#[derive(Debug, Clone, PartialEq)]
pub struct Record<V> {
    pub fields: IndexMap<String, V>,
    pub children: Vec<Record<V>>,
}

impl<V> Default for Record<V> {
    fn default() -> Self {
        Record {
            fields: IndexMap::new(),
            children: Vec::new(),
        }
    }
}

impl<V> Record<V> {
    /// Records at `level` paired with their index path from the root.
    pub fn records_at(&self, level: Level) -> Vec<(Vec<usize>, &Record<V>)> {
        let mut out = vec![(Vec::new(), self)];
        for _ in 0..level.depth() {
            out = out
                .into_iter()
                .flat_map(|(path, r)| {
                    r.children.iter().enumerate().map(move |(i, c)| {
                        let mut p = path.clone();
                        p.push(i);
                        (p, c)
                    })
                })
                .collect();
        }
        out
    }

    pub fn get(&self, path: &[usize]) -> Option<&Record<V>> {
        path.iter().try_fold(self, |r, &i| r.children.get(i))
    }

    pub fn get_mut(&mut self, path: &[usize]) -> Option<&mut Record<V>> {
        path.iter().try_fold(self, |r, &i| r.children.get_mut(i))
    }
}

/// Human-readable location of a record, e.g. `line_items[1].sub_items[0]`.
pub fn record_location(path: &[usize]) -> String {
    let mut level = Level::Global;
    let mut out = String::new();
    for &i in path {
        let key = level.child_key().expect("path deeper than schema levels");
        if !out.is_empty() {
            out.push('.');
        }
        out.push_str(&format!("{key}[{i}]"));
        level = level.child().unwrap();
    }
    out
}

pub fn field_location(path: &[usize], field: &str) -> String {
    let rec = record_location(path);
    if rec.is_empty() {
        field.to_string()
    } else {
        format!("{rec}.{field}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExplicitValue {
    Scalar(Option<String>),
    List(Vec<String>),
}

impl ExplicitValue {
    /// Every non-null string carried by the value.
    pub fn strings(&self) -> Vec<&str> {
        match self {
            ExplicitValue::Scalar(Some(s)) => vec![s.as_str()],
            ExplicitValue::Scalar(None) => vec![],
            ExplicitValue::List(items) => items.iter().map(String::as_str).collect(),
        }
    }
}

/// String-valued extraction, shaped by a schema.
pub type ExplicitDocument = Record<ExplicitValue>;

#[derive(Debug, Error, PartialEq)]
#[error("{path}: {message}")]
pub struct DocumentError {
    pub path: String,
    pub message: String,
}

impl ExplicitDocument {
    /// Builds a document shaped by `schema` from JSON, leniently: missing keys
    /// become null, numbers become their string form, unknown keys are ignored.
    pub fn from_json(value: &Value, schema: &SchemaDef) -> Result<Self, DocumentError> {
        read_explicit(value, schema, Level::Global, &[])
    }

    /// Document with every field null and no children.
    pub fn empty(schema: &SchemaDef) -> Self {
        empty_record(schema, Level::Global)
    }

    /// Serialises in the model's output format: every key present.
    pub fn to_json(&self, schema: &SchemaDef) -> Value {
        write_explicit(self, schema, Level::Global)
    }

    /// Every non-null string leaf with its location.
    pub fn leaves(&self) -> Vec<(String, &str)> {
        let mut out = Vec::new();
        collect_leaves(self, &mut Vec::new(), &mut out);
        out
    }
}

fn collect_leaves<'a>(r: &'a ExplicitDocument, path: &mut Vec<usize>, out: &mut Vec<(String, &'a str)>) {
    for (name, v) in &r.fields {
        match v {
            ExplicitValue::Scalar(Some(s)) => out.push((field_location(path, name), s)),
            ExplicitValue::Scalar(None) => {}
            ExplicitValue::List(items) => {
                for (i, s) in items.iter().enumerate() {
                    out.push((format!("{}[{i}]", field_location(path, name)), s));
                }
            }
        }
    }
    for (i, c) in r.children.iter().enumerate() {
        path.push(i);
        collect_leaves(c, path, out);
        path.pop();
    }
}

pub(crate) fn empty_record(schema: &SchemaDef, level: Level) -> ExplicitDocument {
    let fields = schema
        .fields_at(level)
        .map(|f| {
            let v = if f.kind.is_list() {
                ExplicitValue::List(Vec::new())
            } else {
                ExplicitValue::Scalar(None)
            };
            (f.name.clone(), v)
        })
        .collect();
    Record {
        fields,
        children: Vec::new(),
    }
}

fn leaf_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn read_explicit(
    value: &Value,
    schema: &SchemaDef,
    level: Level,
    path: &[usize],
) -> Result<ExplicitDocument, DocumentError> {
    let obj = value.as_object().ok_or_else(|| DocumentError {
        path: record_location(path),
        message: "expected an object".into(),
    })?;
    let mut record = empty_record(schema, level);
    for f in schema.fields_at(level) {
        let v = match obj.get(&f.name) {
            None | Some(Value::Null) => continue,
            Some(v) => v,
        };
        let slot = if f.kind.is_list() {
            let items = v.as_array().ok_or_else(|| DocumentError {
                path: field_location(path, &f.name),
                message: "expected an array".into(),
            })?;
            ExplicitValue::List(items.iter().filter_map(leaf_string).collect())
        } else {
            ExplicitValue::Scalar(leaf_string(v))
        };
        record.fields.insert(f.name.clone(), slot);
    }
    if let (Some(key), Some(child)) = (level.child_key(), level.child()) {
        if schema.has_level(child) {
            if let Some(items) = obj.get(key).and_then(Value::as_array) {
                for (i, item) in items.iter().enumerate() {
                    let mut p = path.to_vec();
                    p.push(i);
                    record.children.push(read_explicit(item, schema, child, &p)?);
                }
            }
        }
    }
    Ok(record)
}

fn write_explicit(r: &ExplicitDocument, schema: &SchemaDef, level: Level) -> Value {
    let mut obj = Map::new();
    for f in schema.fields_at(level) {
        let v = match r.fields.get(&f.name) {
            Some(ExplicitValue::Scalar(Some(s))) => Value::String(s.clone()),
            Some(ExplicitValue::List(items)) => Value::Array(items.iter().cloned().map(Value::String).collect()),
            _ if f.kind.is_list() => Value::Array(vec![]),
            _ => Value::Null,
        };
        obj.insert(f.name.clone(), v);
    }
    if let (Some(key), Some(child)) = (level.child_key(), level.child()) {
        if schema.has_level(child) {
            let items = r.children.iter().map(|c| write_explicit(c, schema, child)).collect();
            obj.insert(key.to_string(), Value::Array(items));
        }
    }
    Value::Object(obj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extracted,
    Defaulted,
    Inferred,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Typed {
    Decimal(Decimal),
    Integer(i64),
    Text(String),
}

impl Typed {
    pub fn as_decimal(&self) -> Option<Decimal> {
        match self {
            Typed::Decimal(d) => Some(*d),
            Typed::Integer(i) => Some(Decimal::from(*i)),
            Typed::Text(_) => None,
        }
    }

    /// Canonical string form used for comparison and serialisation.
    pub fn canonical(&self) -> String {
        match self {
            Typed::Decimal(d) => canonical_decimal(*d),
            Typed::Integer(i) => i.to_string(),
            Typed::Text(s) => s.clone(),
        }
    }
}

impl fmt::Display for Typed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaf {
    pub value: Typed,
    pub provenance: Provenance,
}

impl Leaf {
    pub fn new(value: Typed, provenance: Provenance) -> Self {
        Leaf { value, provenance }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImplicitValue {
    Scalar(Option<Leaf>),
    List(Vec<Option<Leaf>>),
}

impl ImplicitValue {
    pub fn scalar(&self) -> Option<&Leaf> {
        match self {
            ImplicitValue::Scalar(l) => l.as_ref(),
            ImplicitValue::List(_) => None,
        }
    }
}

/// Typed, resolved counterpart of an [`ExplicitDocument`].
pub type ImplicitDocument = Record<ImplicitValue>;

impl ImplicitDocument {
    /// Every present leaf: (location, leaf).
    pub fn present_leaves(&self) -> Vec<(String, &Leaf)> {
        let mut out = Vec::new();
        collect_present(self, &mut Vec::new(), &mut out);
        out
    }

    /// `{"document": ..., "provenance": {...}}` with numbers as canonical
    /// dot-decimal strings.
    pub fn to_json(&self, schema: &SchemaDef) -> Value {
        let mut provenance = Map::new();
        for (loc, leaf) in self.present_leaves() {
            provenance.insert(loc, serde_json::to_value(leaf.provenance).unwrap());
        }
        let mut out = Map::new();
        out.insert("document".into(), write_implicit(self, schema, Level::Global));
        out.insert("provenance".into(), Value::Object(provenance));
        Value::Object(out)
    }
}

fn collect_present<'a>(r: &'a ImplicitDocument, path: &mut Vec<usize>, out: &mut Vec<(String, &'a Leaf)>) {
    for (name, v) in &r.fields {
        match v {
            ImplicitValue::Scalar(Some(l)) => out.push((field_location(path, name), l)),
            ImplicitValue::Scalar(None) => {}
            ImplicitValue::List(items) => {
                for (i, l) in items.iter().enumerate() {
                    if let Some(l) = l {
                        out.push((format!("{}[{i}]", field_location(path, name)), l));
                    }
                }
            }
        }
    }
    for (i, c) in r.children.iter().enumerate() {
        path.push(i);
        collect_present(c, path, out);
        path.pop();
    }
}

fn write_implicit(r: &ImplicitDocument, schema: &SchemaDef, level: Level) -> Value {
    let leaf = |l: &Option<Leaf>| match l {
        Some(l) => Value::String(l.value.canonical()),
        None => Value::Null,
    };
    let mut obj = Map::new();
    for (name, v) in &r.fields {
        let v = match v {
            ImplicitValue::Scalar(l) => leaf(l),
            ImplicitValue::List(items) => Value::Array(items.iter().map(leaf).collect()),
        };
        obj.insert(name.clone(), v);
    }
    if let (Some(key), Some(child)) = (level.child_key(), level.child()) {
        if schema.has_level(child) {
            let items = r.children.iter().map(|c| write_implicit(c, schema, child)).collect();
            obj.insert(key.to_string(), Value::Array(items));
        }
    }
    Value::Object(obj)
}

/// A string the schema expected to be a number but that does not read as one.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{path}: cannot coerce `{raw}` ({reason})")]
pub struct CoercionError {
    pub path: String,
    pub raw: String,
    pub reason: String,
}

fn coerce(kind: FieldKind, raw: &str) -> Result<Typed, NumberError> {
    match kind {
        FieldKind::Amount | FieldKind::AmountList => parse_amount(raw).map(Typed::Decimal),
        FieldKind::Rate => parse_rate(raw).map(Typed::Decimal),
        FieldKind::Integer => parse_integer(raw).map(Typed::Integer),
        FieldKind::Text | FieldKind::TextList => Ok(Typed::Text(raw.to_string())),
    }
}

/// Coerces every string leaf to its field's type.
///
/// Leaves that fail coercion are absent in the result and reported in the
/// error list; nothing else is lost.
pub fn materialize(doc: &ExplicitDocument, schema: &SchemaDef) -> (ImplicitDocument, Vec<CoercionError>) {
    let mut errors = Vec::new();
    let out = materialize_record(doc, schema, Level::Global, &mut Vec::new(), &mut errors);
    (out, errors)
}

fn materialize_record(
    r: &ExplicitDocument,
    schema: &SchemaDef,
    level: Level,
    path: &mut Vec<usize>,
    errors: &mut Vec<CoercionError>,
) -> ImplicitDocument {
    let mut fields = IndexMap::new();
    for f in schema.fields_at(level) {
        let mut convert = |loc: String, raw: &str| match coerce(f.kind, raw) {
            Ok(v) => Some(Leaf::new(v, Provenance::Extracted)),
            Err(e) => {
                errors.push(CoercionError {
                    path: loc,
                    raw: raw.to_string(),
                    reason: e.reason,
                });
                None
            }
        };
        let loc = field_location(path, &f.name);
        let value = match r.fields.get(&f.name) {
            Some(ExplicitValue::Scalar(Some(raw))) if !f.kind.is_list() => ImplicitValue::Scalar(convert(loc, raw)),
            Some(ExplicitValue::List(items)) if f.kind.is_list() => ImplicitValue::List(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, raw)| convert(format!("{loc}[{i}]"), raw))
                    .collect(),
            ),
            Some(ExplicitValue::Scalar(Some(raw))) => ImplicitValue::List(vec![convert(format!("{loc}[0]"), raw)]),
            _ if f.kind.is_list() => ImplicitValue::List(Vec::new()),
            _ => ImplicitValue::Scalar(None),
        };
        fields.insert(f.name.clone(), value);
    }
    let mut children = Vec::new();
    if let Some(child) = level.child() {
        for (i, c) in r.children.iter().enumerate() {
            path.push(i);
            children.push(materialize_record(c, schema, child, path, errors));
            path.pop();
        }
    }
    Record { fields, children }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
    }
}
