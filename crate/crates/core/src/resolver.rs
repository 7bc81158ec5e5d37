//! Defaults, fixpoint inference over the equation system, and constraint
//! evaluation.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::schema::{Equation, FieldKind, Level, PathRef, RuleKind, SchemaDef, Term};
use crate::values::{
    approx_equal, field_location, record_location, ImplicitDocument, ImplicitValue, Leaf, Provenance, Typed,
};

/// Scale to which quotients are rounded when solving a product for a factor.
pub const DIVISION_SCALE: u32 = 6;

/// Fills every absent leaf whose field carries a default.
pub fn apply_defaults(doc: &ImplicitDocument, schema: &SchemaDef) -> ImplicitDocument {
    let mut out = doc.clone();
    for level in Level::ALL {
        let paths: Vec<Vec<usize>> = out.records_at(level).into_iter().map(|(p, _)| p).collect();
        for f in schema.fields_at(level) {
            let Some(default) = f.default else { continue };
            let value = match f.kind {
                FieldKind::Integer => Typed::Integer(i64::try_from(default).unwrap_or_default()),
                _ => Typed::Decimal(default),
            };
            for path in &paths {
                let record = out.get_mut(path).unwrap();
                let slot = record
                    .fields
                    .entry(f.name.clone())
                    .or_insert(ImplicitValue::Scalar(None));
                if let ImplicitValue::Scalar(s @ None) = slot {
                    *s = Some(Leaf::new(value.clone(), Provenance::Defaulted));
                }
            }
        }
    }
    out
}

/// Address of one numeric leaf inside a document.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Scalar { record: Vec<usize>, field: String },
    Element { record: Vec<usize>, field: String, index: usize },
}

impl Slot {
    fn get(&self, doc: &ImplicitDocument) -> Option<Decimal> {
        match self {
            Slot::Scalar { record, field } => doc.get(record)?.fields.get(field)?.scalar()?.value.as_decimal(),
            Slot::Element { record, field, index } => match doc.get(record)?.fields.get(field)? {
                ImplicitValue::List(items) => items.get(*index)?.as_ref()?.value.as_decimal(),
                ImplicitValue::Scalar(_) => None,
            },
        }
    }

    fn set(&self, doc: &mut ImplicitDocument, value: Decimal) {
        let leaf = Some(Leaf::new(Typed::Decimal(value), Provenance::Inferred));
        match self {
            Slot::Scalar { record, field } => {
                let r = doc.get_mut(record).expect("slot record exists");
                r.fields.insert(field.clone(), ImplicitValue::Scalar(leaf));
            }
            Slot::Element { record, field, index } => {
                let r = doc.get_mut(record).expect("slot record exists");
                if let Some(ImplicitValue::List(items)) = r.fields.get_mut(field) {
                    items[*index] = leaf;
                }
            }
        }
    }

    fn location(&self) -> String {
        match self {
            Slot::Scalar { record, field } => field_location(record, field),
            Slot::Element { record, field, index } => format!("{}[{index}]", field_location(record, field)),
        }
    }
}

#[derive(Debug, Clone)]
enum InstanceTerm {
    Single(Slot),
    Product(Slot, Slot),
    Sum(Vec<Slot>),
}

/// One equation applied to one record.
#[derive(Debug, Clone)]
struct Instance {
    record: Vec<usize>,
    lhs: Slot,
    terms: Vec<(bool, InstanceTerm)>,
}

fn scalar_slot(record: &[usize], p: &PathRef) -> Slot {
    Slot::Scalar {
        record: record.to_vec(),
        field: p.field_name.clone(),
    }
}

/// Expands an equation over every record at its binding level. Instances that
/// aggregate over an empty child list are dropped: they can neither be solved
/// nor evaluated.
fn instances(eq: &Equation, doc: &ImplicitDocument) -> Vec<Instance> {
    let mut out = Vec::new();
    'records: for (path, record) in doc.records_at(eq.level) {
        let mut terms = Vec::with_capacity(eq.rhs.len());
        for t in &eq.rhs {
            let term = match &t.term {
                Term::Ref(p) if p.aggregate && p.level == eq.level => {
                    let n = match record.fields.get(&p.field_name) {
                        Some(ImplicitValue::List(items)) => items.len(),
                        _ => 0,
                    };
                    InstanceTerm::Sum(
                        (0..n)
                            .map(|index| Slot::Element {
                                record: path.clone(),
                                field: p.field_name.clone(),
                                index,
                            })
                            .collect(),
                    )
                }
                Term::Ref(p) if p.aggregate => {
                    if record.children.is_empty() {
                        continue 'records;
                    }
                    InstanceTerm::Sum(
                        (0..record.children.len())
                            .map(|i| {
                                let mut child = path.clone();
                                child.push(i);
                                scalar_slot(&child, p)
                            })
                            .collect(),
                    )
                }
                Term::Ref(p) => InstanceTerm::Single(scalar_slot(&path, p)),
                Term::Product(a, b) => InstanceTerm::Product(scalar_slot(&path, a), scalar_slot(&path, b)),
            };
            terms.push((t.negative, term));
        }
        out.push(Instance {
            lhs: scalar_slot(&path, &eq.lhs),
            record: path,
            terms,
        });
    }
    out
}

fn signed(negative: bool, v: Decimal) -> Decimal {
    if negative {
        -v
    } else {
        v
    }
}

fn term_value(term: &InstanceTerm, doc: &ImplicitDocument) -> Option<Decimal> {
    match term {
        InstanceTerm::Single(s) => s.get(doc),
        InstanceTerm::Product(a, b) => a.get(doc)?.checked_mul(b.get(doc)?),
        InstanceTerm::Sum(slots) => slots
            .iter()
            .try_fold(Decimal::ZERO, |acc, s| acc.checked_add(s.get(doc)?)),
    }
}

impl Instance {
    fn slots(&self) -> impl Iterator<Item = &Slot> {
        std::iter::once(&self.lhs).chain(self.terms.iter().flat_map(|(_, t)| match t {
            InstanceTerm::Single(s) => vec![s],
            InstanceTerm::Product(a, b) => vec![a, b],
            InstanceTerm::Sum(slots) => slots.iter().collect(),
        }))
    }

    /// (lhs, rhs) when every operand is present.
    fn sides(&self, doc: &ImplicitDocument) -> Option<(Decimal, Decimal)> {
        let lhs = self.lhs.get(doc)?;
        let (_, rhs) = self.sides_with(doc, None)?;
        Some((lhs, rhs))
    }

    /// The unique value of the single absent operand, if it is determined.
    fn solve(&self, doc: &ImplicitDocument) -> Option<(Slot, Decimal)> {
        let mut missing = self.slots().filter(|s| s.get(doc).is_none());
        let target = missing.next()?.clone();
        if missing.next().is_some() {
            return None;
        }
        if self.slots().filter(|s| **s == target).count() > 1 {
            return None;
        }

        if target == self.lhs {
            let (_, rhs) = self.sides_with(doc, None)?;
            return Some((target, rhs.normalize()));
        }

        let lhs = self.lhs.get(doc)?;
        let (idx, (negative, term)) = self
            .terms
            .iter()
            .enumerate()
            .find(|(_, (_, t))| match t {
                InstanceTerm::Single(s) => *s == target,
                InstanceTerm::Product(a, b) => *a == target || *b == target,
                InstanceTerm::Sum(slots) => slots.contains(&target),
            })?;
        let (_, rest) = self.sides_with(doc, Some(idx))?;
        // signed(term) = lhs - rest
        let term_total = signed(*negative, lhs.checked_sub(rest)?);
        let value = match term {
            InstanceTerm::Single(_) => term_total,
            InstanceTerm::Product(a, b) => {
                let cofactor = if *a == target { b } else { a }.get(doc)?;
                if cofactor.is_zero() {
                    return None;
                }
                term_total.checked_div(cofactor)?.round_dp(DIVISION_SCALE)
            }
            InstanceTerm::Sum(slots) => {
                let others = slots
                    .iter()
                    .filter(|s| **s != target)
                    .try_fold(Decimal::ZERO, |acc, s| acc.checked_add(s.get(doc)?))?;
                term_total.checked_sub(others)?
            }
        };
        Some((target, value.normalize()))
    }

    /// lhs and the rhs total leaving out term `skip`.
    fn sides_with(&self, doc: &ImplicitDocument, skip: Option<usize>) -> Option<(Option<Decimal>, Decimal)> {
        let rhs = self
            .terms
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .try_fold(Decimal::ZERO, |acc, (_, (neg, t))| {
                acc.checked_add(signed(*neg, term_value(t, doc)?))
            })?;
        Some((self.lhs.get(doc), rhs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub equation: String,
    pub field: String,
    #[serde(with = "rust_decimal::serde::str")]
    pub value: Decimal,
    pub iteration: usize,
}

/// Ordered record of every inferred value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolutionTrace {
    pub steps: Vec<TraceStep>,
}

impl ResolutionTrace {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Infers absent values until no equation can determine another one.
///
/// Present values are never overwritten; a derived value that disagrees with
/// an existing one is left for [`evaluate_constraints`] to report. Inference
/// is exact apart from quotients, which are rounded to [`DIVISION_SCALE`].
pub fn resolve(doc: &ImplicitDocument, schema: &SchemaDef) -> (ImplicitDocument, ResolutionTrace) {
    let mut out = doc.clone();
    let mut trace = ResolutionTrace::default();
    let mut iteration = 0;
    loop {
        iteration += 1;
        let mut changed = false;
        for eq in schema.active_equations() {
            for inst in instances(eq, &out) {
                if let Some((slot, value)) = inst.solve(&out) {
                    slot.set(&mut out, value);
                    trace.steps.push(TraceStep {
                        equation: eq.id.clone(),
                        field: slot.location(),
                        value,
                        iteration,
                    });
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (out, trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationStatus {
    Satisfied,
    Violated,
    NotEvaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationCheck {
    pub equation: String,
    /// Record the instance binds to; empty for global equations.
    pub instance: String,
    pub status: EquationStatus,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub lhs: Option<Decimal>,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub rhs: Option<Decimal>,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub residual: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub rule: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub equations: Vec<EquationCheck>,
    pub rules: Vec<RuleCheck>,
    pub valid: bool,
}

impl ConstraintReport {
    fn finish(equations: Vec<EquationCheck>, rules: Vec<RuleCheck>) -> Self {
        let valid = equations.iter().all(|e| e.status != EquationStatus::Violated) && rules.iter().all(|r| r.passed);
        ConstraintReport { equations, rules, valid }
    }

    /// Adds a failing rule entry and recomputes validity.
    pub fn push_rule(&mut self, check: RuleCheck) {
        self.rules.push(check);
        self.valid = self.equations.iter().all(|e| e.status != EquationStatus::Violated)
            && self.rules.iter().all(|r| r.passed);
    }

    pub fn violated(&self) -> impl Iterator<Item = &EquationCheck> {
        self.equations.iter().filter(|e| e.status == EquationStatus::Violated)
    }

    pub fn failed_rules(&self) -> impl Iterator<Item = &RuleCheck> {
        self.rules.iter().filter(|r| !r.passed)
    }
}

/// Checks every equation instance whose operands are all present, plus the
/// structural rules.
pub fn evaluate_constraints(doc: &ImplicitDocument, schema: &SchemaDef, rel_tol: Decimal) -> ConstraintReport {
    let mut equations = Vec::new();
    for eq in schema.active_equations() {
        let insts = instances(eq, doc);
        if insts.is_empty() {
            equations.push(EquationCheck {
                equation: eq.id.clone(),
                instance: String::new(),
                status: EquationStatus::NotEvaluable,
                lhs: None,
                rhs: None,
                residual: None,
            });
        }
        for inst in insts {
            let check = match inst.sides(doc) {
                Some((lhs, rhs)) => EquationCheck {
                    equation: eq.id.clone(),
                    instance: record_location(&inst.record),
                    status: if approx_equal(lhs, rhs, rel_tol) {
                        EquationStatus::Satisfied
                    } else {
                        EquationStatus::Violated
                    },
                    lhs: Some(lhs),
                    rhs: Some(rhs),
                    residual: lhs.checked_sub(rhs),
                },
                None => EquationCheck {
                    equation: eq.id.clone(),
                    instance: record_location(&inst.record),
                    status: EquationStatus::NotEvaluable,
                    lhs: None,
                    rhs: None,
                    residual: None,
                },
            };
            equations.push(check);
        }
    }

    let rules = schema.rules.iter().map(|rule| check_rule(&rule.id, &rule.kind, doc, schema)).collect();
    ConstraintReport::finish(equations, rules)
}

fn check_rule(id: &str, kind: &RuleKind, doc: &ImplicitDocument, schema: &SchemaDef) -> RuleCheck {
    let (passed, detail) = match kind {
        RuleKind::MinLineItems { min } => {
            let n = doc.children.len();
            (n >= *min, (n < *min).then(|| format!("{n} line items, need at least {min}")))
        }
        RuleKind::RequiredOneOf { fields } => {
            let ok = fields.iter().any(|f| {
                matches!(doc.fields.get(f).and_then(ImplicitValue::scalar),
                         Some(leaf) if leaf.provenance == Provenance::Extracted)
            });
            (ok, (!ok).then(|| format!("none of {} was extracted", fields.join(", "))))
        }
        RuleKind::RateBounds { field, min, max } => {
            let def = schema.resolve_path(field);
            let mut bad = Vec::new();
            if let Some(def) = def {
                for (path, record) in doc.records_at(def.level) {
                    let value = record
                        .fields
                        .get(&def.name)
                        .and_then(ImplicitValue::scalar)
                        .and_then(|l| l.value.as_decimal());
                    if let Some(v) = value {
                        if v < *min || v > *max {
                            bad.push(format!("{} = {v}", field_location(&path, &def.name)));
                        }
                    }
                }
            }
            (
                bad.is_empty(),
                (!bad.is_empty()).then(|| format!("{} outside [{min}, {max}]", bad.join(", "))),
            )
        }
    };
    RuleCheck {
        rule: id.to_string(),
        passed,
        detail,
    }
}
