//! Three-level filter cascade over raw model output: syntactic, task
//! (verbatim spans) and domain (arithmetic constraints).

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::resolver::{apply_defaults, evaluate_constraints, resolve, ConstraintReport, ResolutionTrace, RuleCheck};
use crate::schema::{Level, SchemaDef};
use crate::values::{
    empty_record, field_location, materialize, record_location, CoercionError, ExplicitDocument, ExplicitValue,
    ImplicitDocument,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    NoJsonBlock,
    InvalidJson,
    MissingKey,
    WrongType,
    ExtraKey,
    NotVerbatim,
    CoercionFailed,
    EquationViolated,
    RuleFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, path: Option<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            kind,
            path,
            value: None,
            message: message.into(),
        }
    }

    fn with_value(mut self, value: &str) -> Self {
        self.value = Some(value.to_string());
        self
    }
}

/// How far a candidate got through the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeLevel {
    FailedSyntactic,
    FailedTask,
    FailedDomain,
    Passed,
}

/// A filter of the cascade, in order of strictness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterLevel {
    Syntactic,
    Task,
    Domain,
}

impl FilterLevel {
    pub const ALL: [FilterLevel; 3] = [FilterLevel::Syntactic, FilterLevel::Task, FilterLevel::Domain];

    pub fn name(self) -> &'static str {
        match self {
            FilterLevel::Syntactic => "syntactic",
            FilterLevel::Task => "task",
            FilterLevel::Domain => "domain",
        }
    }
}

impl CascadeLevel {
    /// Whether a candidate at this level survives `filter`.
    pub fn passes(self, filter: FilterLevel) -> bool {
        match filter {
            FilterLevel::Syntactic => self >= CascadeLevel::FailedTask,
            FilterLevel::Task => self >= CascadeLevel::FailedDomain,
            FilterLevel::Domain => self == CascadeLevel::Passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeVerdict {
    pub level_reached: CascadeLevel,
    /// Why the candidate failed; empty iff it passed.
    pub reasons: Vec<Diagnostic>,
    pub warnings: Vec<Diagnostic>,
    pub document: Option<ExplicitDocument>,
    pub domain: Option<DomainOutcome>,
}

/// Substring from the first `{` to the last `}`, inclusive.
pub fn extract_json_block(raw: &str) -> Result<&str, Diagnostic> {
    let start = raw.find('{');
    let end = raw.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if e > s => Ok(&raw[s..=e]),
        _ => Err(Diagnostic::new(
            DiagnosticKind::NoJsonBlock,
            None,
            "no `{ ... }` block in the output",
        )),
    }
}

/// Parses the output and checks it against the schema's output format.
///
/// On success returns the document plus warnings (keys the schema does not
/// know, which are dropped). On failure returns every problem found.
pub fn syntactic_validate(
    raw: &str,
    schema: &SchemaDef,
) -> Result<(ExplicitDocument, Vec<Diagnostic>), Vec<Diagnostic>> {
    let block = extract_json_block(raw).map_err(|d| vec![d])?;
    let value: Value = serde_json::from_str(block).map_err(|e| {
        vec![Diagnostic::new(
            DiagnosticKind::InvalidJson,
            None,
            format!("invalid JSON: {e}"),
        )]
    })?;
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let doc = check_object(&value, schema, Level::Global, &[], &mut errors, &mut warnings);
    if errors.is_empty() {
        Ok((doc, warnings))
    } else {
        Err(errors)
    }
}

fn check_object(
    value: &Value,
    schema: &SchemaDef,
    level: Level,
    path: &[usize],
    errors: &mut Vec<Diagnostic>,
    warnings: &mut Vec<Diagnostic>,
) -> ExplicitDocument {
    let mut record = empty_record(schema, level);
    let Some(obj) = value.as_object() else {
        let loc = record_location(path);
        errors.push(Diagnostic::new(
            DiagnosticKind::WrongType,
            (!loc.is_empty()).then_some(loc),
            "expected an object",
        ));
        return record;
    };

    for f in schema.fields_at(level) {
        let loc = field_location(path, &f.name);
        let Some(v) = obj.get(&f.name) else {
            errors.push(Diagnostic::new(
                DiagnosticKind::MissingKey,
                Some(loc),
                format!("missing key `{}`", f.name),
            ));
            continue;
        };
        let slot = if f.kind.is_list() {
            match v {
                Value::Null => ExplicitValue::List(Vec::new()),
                Value::Array(items) => {
                    let mut out = Vec::with_capacity(items.len());
                    for (i, item) in items.iter().enumerate() {
                        match item {
                            Value::String(s) => out.push(s.clone()),
                            other => errors.push(Diagnostic::new(
                                DiagnosticKind::WrongType,
                                Some(format!("{loc}[{i}]")),
                                format!("expected a string, found {}", type_name(other)),
                            )),
                        }
                    }
                    ExplicitValue::List(out)
                }
                other => {
                    errors.push(Diagnostic::new(
                        DiagnosticKind::WrongType,
                        Some(loc),
                        format!("expected a list of strings, found {}", type_name(other)),
                    ));
                    continue;
                }
            }
        } else {
            match v {
                Value::Null => ExplicitValue::Scalar(None),
                Value::String(s) => ExplicitValue::Scalar(Some(s.clone())),
                other => {
                    errors.push(Diagnostic::new(
                        DiagnosticKind::WrongType,
                        Some(loc),
                        format!("expected a string or null, found {}", type_name(other)),
                    ));
                    continue;
                }
            }
        };
        record.fields.insert(f.name.clone(), slot);
    }

    let child_key = match (level.child_key(), level.child()) {
        (Some(key), Some(child)) if schema.has_level(child) => Some((key, child)),
        _ => None,
    };
    if let Some((key, child)) = child_key {
        let loc = field_location(path, key);
        match obj.get(key) {
            None => errors.push(Diagnostic::new(
                DiagnosticKind::MissingKey,
                Some(loc),
                format!("missing key `{key}`"),
            )),
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let mut p = path.to_vec();
                    p.push(i);
                    record.children.push(check_object(item, schema, child, &p, errors, warnings));
                }
            }
            Some(other) => errors.push(Diagnostic::new(
                DiagnosticKind::WrongType,
                Some(loc),
                format!("expected a list, found {} (use an empty list)", type_name(other)),
            )),
        }
    }

    for key in obj.keys() {
        let known = schema.field(level, key).is_some() || child_key.is_some_and(|(k, _)| k == key);
        if !known {
            warnings.push(Diagnostic::new(
                DiagnosticKind::ExtraKey,
                Some(field_location(path, key)),
                format!("unknown key `{key}` dropped"),
            ));
        }
    }
    record
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "an object",
    }
}

/// Every extracted string must occur verbatim in the OCR text. Returns the
/// values that do not; an empty result means the document passes.
pub fn task_validate(doc: &ExplicitDocument, ocr_text: &str) -> Vec<Diagnostic> {
    doc.leaves()
        .into_iter()
        .filter(|(_, value)| !ocr_text.contains(value))
        .map(|(path, value)| {
            Diagnostic::new(
                DiagnosticKind::NotVerbatim,
                Some(path),
                "value does not occur verbatim in the OCR text",
            )
            .with_value(value)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainOutcome {
    pub report: ConstraintReport,
    pub resolved: ImplicitDocument,
    pub trace: ResolutionTrace,
    pub coercion_errors: Vec<CoercionError>,
}

/// Rule id under which coercion failures appear in a [`ConstraintReport`].
pub const COERCION_RULE: &str = "coercion";

/// Materialises, applies defaults, resolves and evaluates constraints.
///
/// A numeric value that was extracted but cannot be read as a number makes
/// the document invalid.
pub fn domain_validate(doc: &ExplicitDocument, schema: &SchemaDef, rel_tol: Decimal) -> DomainOutcome {
    let (implicit, coercion_errors) = materialize(doc, schema);
    let defaulted = apply_defaults(&implicit, schema);
    let (resolved, trace) = resolve(&defaulted, schema);
    let mut report = evaluate_constraints(&resolved, schema, rel_tol);
    if !coercion_errors.is_empty() {
        let detail = coercion_errors
            .iter()
            .map(|e| format!("{} = `{}`", e.path, e.raw))
            .collect::<Vec<_>>()
            .join(", ");
        report.push_rule(RuleCheck {
            rule: COERCION_RULE.into(),
            passed: false,
            detail: Some(detail),
        });
    }
    DomainOutcome {
        report,
        resolved,
        trace,
        coercion_errors,
    }
}

fn domain_reasons(outcome: &DomainOutcome) -> Vec<Diagnostic> {
    let mut reasons: Vec<Diagnostic> = outcome
        .coercion_errors
        .iter()
        .map(|e| {
            Diagnostic::new(DiagnosticKind::CoercionFailed, Some(e.path.clone()), e.reason.clone()).with_value(&e.raw)
        })
        .collect();
    for eq in outcome.report.violated() {
        let path = if eq.instance.is_empty() {
            eq.equation.clone()
        } else {
            format!("{}@{}", eq.equation, eq.instance)
        };
        let show = |d: Option<Decimal>| d.map(|d| d.normalize().to_string()).unwrap_or_default();
        reasons.push(Diagnostic::new(
            DiagnosticKind::EquationViolated,
            Some(path),
            format!("{} != {} (residual {})", show(eq.lhs), show(eq.rhs), show(eq.residual)),
        ));
    }
    for rule in outcome.report.failed_rules() {
        if rule.rule == COERCION_RULE {
            continue;
        }
        reasons.push(Diagnostic::new(
            DiagnosticKind::RuleFailed,
            Some(rule.rule.clone()),
            rule.detail.clone().unwrap_or_default(),
        ));
    }
    reasons
}

/// Runs syntactic, task and domain validation in order, stopping at the
/// first level that fails.
pub fn run_cascade(raw: &str, ocr_text: &str, schema: &SchemaDef, rel_tol: Decimal) -> CascadeVerdict {
    let (doc, warnings) = match syntactic_validate(raw, schema) {
        Ok(ok) => ok,
        Err(reasons) => {
            return CascadeVerdict {
                level_reached: CascadeLevel::FailedSyntactic,
                reasons,
                warnings: Vec::new(),
                document: None,
                domain: None,
            }
        }
    };
    let misses = task_validate(&doc, ocr_text);
    if !misses.is_empty() {
        return CascadeVerdict {
            level_reached: CascadeLevel::FailedTask,
            reasons: misses,
            warnings,
            document: Some(doc),
            domain: None,
        };
    }
    let outcome = domain_validate(&doc, schema, rel_tol);
    let (level_reached, reasons) = if outcome.report.valid {
        (CascadeLevel::Passed, Vec::new())
    } else {
        (CascadeLevel::FailedDomain, domain_reasons(&outcome))
    };
    debug_assert_eq!(level_reached == CascadeLevel::Passed, reasons.is_empty());
    CascadeVerdict {
        level_reached,
        reasons,
        warnings,
        document: Some(doc),
        domain: Some(outcome),
    }
}
