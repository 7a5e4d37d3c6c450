//! Domain types and the pure matching and covering semantics.
//!
//! A [`Subscription`] is a conjunction of per-attribute [`Constraint`]s. A
//! [`PublicationHeader`] maps attribute names to [`AttributeValue`]s. Numeric
//! constraints are intervals with open, closed or missing bounds; text
//! constraints are equality only.
//!
//! Both subscriptions and headers have a canonical text form (constraints
//! sorted by attribute name, terms joined by `&`). That exact byte string is
//! what gets sealed and signed on the wire, so rendering must stay stable:
//!
//! ```text
//! price<50&symbol="HAL"          subscription
//! x>0&x<=10&y=2                  interval on x, point on y
//! vol=*                          any numeric value of vol
//! price=49.5&symbol="HAL"        header
//! ```

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Longest accepted text value, in bytes.
pub const MAX_TEXT_LEN: usize = 256;
/// Longest accepted attribute name, in bytes.
pub const MAX_ATTR_LEN: usize = 64;
/// Most attributes a single header may carry.
pub const MAX_HEADER_ATTRS: usize = 64;
/// Longest accepted identifier (client, subscription, publication), in bytes.
pub const MAX_ID_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("numeric value is not finite")]
    NonFinite,
    #[error("text value must be 1..={MAX_TEXT_LEN} bytes")]
    TextLength,
    #[error("invalid attribute name {0:?}")]
    AttributeName(String),
    #[error("invalid identifier {0:?}")]
    Identifier(String),
    #[error("interval lower bound exceeds upper bound")]
    InvertedInterval,
    #[error("constraint on {0:?} is unsatisfiable")]
    EmptyConstraint(String),
    #[error("constraints are on different attributes ({0:?} vs {1:?})")]
    AttributeMismatch(String, String),
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("header must carry 1..={MAX_HEADER_ATTRS} attributes, got {0}")]
    HeaderSize(usize),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: &'static str },
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
                let id = id.into();
                let ok = !id.is_empty()
                    && id.len() <= MAX_ID_LEN
                    && !id.chars().any(|c| c.is_control());
                if ok {
                    Ok(Self(id))
                } else {
                    Err(ModelError::Identifier(id))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }
    };
}

id_newtype!(
    /// Opaque client identity, visible outside the trusted boundary.
    ClientId
);
id_newtype!(
    /// Subscription identifier assigned by the publisher at admission.
    SubId
);
id_newtype!(
    /// Publication identifier.
    PubId
);

/// Attribute names: `[A-Za-z_][A-Za-z0-9_.]*`, at most [`MAX_ATTR_LEN`] bytes.
pub fn validate_attr_name(name: &str) -> Result<(), ModelError> {
    let mut chars = name.chars();
    let ok = name.len() <= MAX_ATTR_LEN
        && matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(ModelError::AttributeName(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeValue {
    Text(String),
    Number(f64),
}

impl AttributeValue {
    pub fn text(s: impl Into<String>) -> Result<Self, ModelError> {
        let v = AttributeValue::Text(s.into());
        v.validate()?;
        Ok(v)
    }

    pub fn number(x: f64) -> Result<Self, ModelError> {
        let v = AttributeValue::Number(x);
        v.validate()?;
        Ok(normalize_zero_value(v))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            AttributeValue::Text(s) if s.is_empty() || s.len() > MAX_TEXT_LEN => {
                Err(ModelError::TextLength)
            }
            AttributeValue::Number(x) if !x.is_finite() => Err(ModelError::NonFinite),
            _ => Ok(()),
        }
    }

    /// Rendering used inside canonical text: JSON-quoted text, shortest
    /// round-trip decimal for numbers.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut String) {
        match self {
            AttributeValue::Text(s) => write_text(out, s),
            AttributeValue::Number(x) => write_number(out, *x),
        }
    }
}

fn normalize_zero_value(v: AttributeValue) -> AttributeValue {
    match v {
        AttributeValue::Number(x) => AttributeValue::Number(normalize_zero(x)),
        other => other,
    }
}

/// `-0.0` renders as "-0"; fold it so equal values have one canonical form.
fn normalize_zero(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

fn write_number(out: &mut String, x: f64) {
    use fmt::Write;
    let _ = write!(out, "{}", normalize_zero(x));
}

fn write_text(out: &mut String, s: &str) {
    // serde_json string quoting never fails for a &str.
    out.push_str(&serde_json::to_string(s).expect("string serialization"));
}

/// One end of a numeric interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Unbounded,
    Inclusive(f64),
    Exclusive(f64),
}

impl Bound {
    fn value(self) -> Option<f64> {
        match self {
            Bound::Unbounded => None,
            Bound::Inclusive(v) | Bound::Exclusive(v) => Some(v),
        }
    }

    fn normalized(self) -> Self {
        match self {
            Bound::Inclusive(v) => Bound::Inclusive(normalize_zero(v)),
            Bound::Exclusive(v) => Bound::Exclusive(normalize_zero(v)),
            Bound::Unbounded => Bound::Unbounded,
        }
    }
}

/// Compare two lower bounds by tightness: `Greater` means `a` admits fewer values.
fn cmp_lower(a: Bound, b: Bound) -> Ordering {
    match (a, b) {
        (Bound::Unbounded, Bound::Unbounded) => Ordering::Equal,
        (Bound::Unbounded, _) => Ordering::Less,
        (_, Bound::Unbounded) => Ordering::Greater,
        (a, b) => {
            let (x, y) = (a.value().unwrap(), b.value().unwrap());
            x.partial_cmp(&y).unwrap().then_with(|| {
                match (matches!(a, Bound::Exclusive(_)), matches!(b, Bound::Exclusive(_))) {
                    (true, false) => Ordering::Greater,
                    (false, true) => Ordering::Less,
                    _ => Ordering::Equal,
                }
            })
        }
    }
}

/// Compare two upper bounds by tightness: `Greater` means `a` admits fewer values.
fn cmp_upper(a: Bound, b: Bound) -> Ordering {
    match (a, b) {
        (Bound::Unbounded, Bound::Unbounded) => Ordering::Equal,
        (Bound::Unbounded, _) => Ordering::Less,
        (_, Bound::Unbounded) => Ordering::Greater,
        (a, b) => {
            let (x, y) = (a.value().unwrap(), b.value().unwrap());
            y.partial_cmp(&x).unwrap().then_with(|| {
                match (matches!(a, Bound::Exclusive(_)), matches!(b, Bound::Exclusive(_))) {
                    (true, false) => Ordering::Greater,
                    (false, true) => Ordering::Less,
                    _ => Ordering::Equal,
                }
            })
        }
    }
}

/// Numeric interval. Never empty once constructed through [`Interval::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: Bound,
    hi: Bound,
}

impl Interval {
    pub const ANY: Interval = Interval {
        lo: Bound::Unbounded,
        hi: Bound::Unbounded,
    };

    pub fn new(lo: Bound, hi: Bound) -> Result<Self, ModelError> {
        for b in [lo, hi] {
            if let Some(v) = b.value() {
                if !v.is_finite() {
                    return Err(ModelError::NonFinite);
                }
            }
        }
        let iv = Interval {
            lo: lo.normalized(),
            hi: hi.normalized(),
        };
        if iv.is_empty() {
            return Err(ModelError::InvertedInterval);
        }
        Ok(iv)
    }

    pub fn point(v: f64) -> Result<Self, ModelError> {
        Self::new(Bound::Inclusive(v), Bound::Inclusive(v))
    }

    pub fn lo(&self) -> Bound {
        self.lo
    }

    pub fn hi(&self) -> Bound {
        self.hi
    }

    pub fn as_point(&self) -> Option<f64> {
        match (self.lo, self.hi) {
            (Bound::Inclusive(a), Bound::Inclusive(b)) if a == b => Some(a),
            _ => None,
        }
    }

    fn is_empty(&self) -> bool {
        match (self.lo.value(), self.hi.value()) {
            (Some(a), Some(b)) => {
                a > b
                    || (a == b
                        && !(matches!(self.lo, Bound::Inclusive(_))
                            && matches!(self.hi, Bound::Inclusive(_))))
            }
            _ => false,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let lo_ok = match self.lo {
            Bound::Unbounded => true,
            Bound::Inclusive(v) => x >= v,
            Bound::Exclusive(v) => x > v,
        };
        lo_ok
            && match self.hi {
                Bound::Unbounded => true,
                Bound::Inclusive(v) => x <= v,
                Bound::Exclusive(v) => x < v,
            }
    }

    /// `None` when the intersection is empty.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = if cmp_lower(self.lo, other.lo) == Ordering::Less {
            other.lo
        } else {
            self.lo
        };
        let hi = if cmp_upper(self.hi, other.hi) == Ordering::Less {
            other.hi
        } else {
            self.hi
        };
        let iv = Interval { lo, hi };
        (!iv.is_empty()).then_some(iv)
    }

    /// Every value in `other` is also in `self`.
    pub fn includes(&self, other: &Interval) -> bool {
        cmp_lower(self.lo, other.lo) != Ordering::Greater
            && cmp_upper(self.hi, other.hi) != Ordering::Greater
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Test {
    Range(Interval),
    Equals(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    attr: String,
    test: Test,
}

impl Constraint {
    pub fn new(attr: impl Into<String>, test: Test) -> Result<Self, ModelError> {
        let attr = attr.into();
        validate_attr_name(&attr)?;
        if let Test::Equals(s) = &test {
            AttributeValue::Text(s.clone()).validate()?;
        }
        Ok(Constraint { attr, test })
    }

    pub fn range(attr: impl Into<String>, lo: Bound, hi: Bound) -> Result<Self, ModelError> {
        Self::new(attr, Test::Range(Interval::new(lo, hi)?))
    }

    pub fn gt(attr: impl Into<String>, t: f64) -> Result<Self, ModelError> {
        Self::range(attr, Bound::Exclusive(t), Bound::Unbounded)
    }

    pub fn ge(attr: impl Into<String>, t: f64) -> Result<Self, ModelError> {
        Self::range(attr, Bound::Inclusive(t), Bound::Unbounded)
    }

    pub fn lt(attr: impl Into<String>, t: f64) -> Result<Self, ModelError> {
        Self::range(attr, Bound::Unbounded, Bound::Exclusive(t))
    }

    pub fn le(attr: impl Into<String>, t: f64) -> Result<Self, ModelError> {
        Self::range(attr, Bound::Unbounded, Bound::Inclusive(t))
    }

    pub fn eq_num(attr: impl Into<String>, t: f64) -> Result<Self, ModelError> {
        Self::new(attr, Test::Range(Interval::point(t)?))
    }

    pub fn eq_text(attr: impl Into<String>, t: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(attr, Test::Equals(t.into()))
    }

    pub fn attr(&self) -> &str {
        &self.attr
    }

    pub fn test(&self) -> &Test {
        &self.test
    }

    /// Is this an equality test (text equality or a numeric point)?
    pub fn is_equality(&self) -> bool {
        match &self.test {
            Test::Equals(_) => true,
            Test::Range(iv) => iv.as_point().is_some(),
        }
    }

    fn write_canonical(&self, out: &mut String) {
        let attr = &self.attr;
        match &self.test {
            Test::Equals(s) => {
                out.push_str(attr);
                out.push('=');
                write_text(out, s);
            }
            Test::Range(iv) => {
                if let Some(p) = iv.as_point() {
                    out.push_str(attr);
                    out.push('=');
                    write_number(out, p);
                    return;
                }
                let mut first = true;
                let mut term = |op: &str, v: f64, out: &mut String| {
                    if !first {
                        out.push('&');
                    }
                    first = false;
                    out.push_str(attr);
                    out.push_str(op);
                    write_number(out, v);
                };
                match iv.lo {
                    Bound::Inclusive(v) => term(">=", v, out),
                    Bound::Exclusive(v) => term(">", v, out),
                    Bound::Unbounded => {}
                }
                match iv.hi {
                    Bound::Inclusive(v) => term("<=", v, out),
                    Bound::Exclusive(v) => term("<", v, out),
                    Bound::Unbounded => {}
                }
                if first {
                    out.push_str(attr);
                    out.push_str("=*");
                }
            }
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_canonical(&mut s);
        f.write_str(&s)
    }
}

/// Does `v` satisfy `c`? A type mismatch is simply `false`.
pub fn eval_constraint(c: &Constraint, v: &AttributeValue) -> bool {
    match (&c.test, v) {
        (Test::Range(iv), AttributeValue::Number(x)) => iv.contains(*x),
        (Test::Equals(t), AttributeValue::Text(s)) => t == s,
        _ => false,
    }
}

/// Does `c` admit every value `c2` admits?
pub fn covers_constraint(c: &Constraint, c2: &Constraint) -> Result<bool, ModelError> {
    if c.attr != c2.attr {
        return Err(ModelError::AttributeMismatch(
            c.attr.clone(),
            c2.attr.clone(),
        ));
    }
    Ok(match (&c.test, &c2.test) {
        (Test::Range(a), Test::Range(b)) => a.includes(b),
        (Test::Equals(a), Test::Equals(b)) => a == b,
        _ => false,
    })
}

/// A conjunction of constraints.
///
/// Routing metadata (client and subscription ids) travels beside the
/// predicate rather than inside it, since only the predicate is sealed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subscription {
    constraints: Vec<Constraint>,
}

impl Subscription {
    /// Raw conjunction; may repeat attributes until [`canonicalize`] is applied.
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Subscription { constraints }
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.constraints.windows(2).all(|w| w[0].attr < w[1].attr)
    }

    pub fn get(&self, attr: &str) -> Option<&Constraint> {
        if self.is_canonical() {
            self.constraints
                .binary_search_by(|c| c.attr.as_str().cmp(attr))
                .ok()
                .map(|i| &self.constraints[i])
        } else {
            self.constraints.iter().find(|c| c.attr == attr)
        }
    }

    /// Canonical text. Only meaningful for canonical subscriptions.
    pub fn canonical_text(&self) -> String {
        let mut out = String::with_capacity(self.constraints.len() * 24);
        for (i, c) in self.constraints.iter().enumerate() {
            if i > 0 {
                out.push('&');
            }
            c.write_canonical(&mut out);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut constraints = Vec::new();
        for term in parse_terms(text)? {
            let test = match (term.op, term.value) {
                (Op::Eq, TermValue::Text(s)) => Test::Equals(s),
                (Op::Eq, TermValue::Number(x)) => Test::Range(Interval::point(x)?),
                (Op::Eq, TermValue::AnyNumber) => Test::Range(Interval::ANY),
                (Op::Gt, TermValue::Number(x)) => {
                    Test::Range(Interval::new(Bound::Exclusive(x), Bound::Unbounded)?)
                }
                (Op::Ge, TermValue::Number(x)) => {
                    Test::Range(Interval::new(Bound::Inclusive(x), Bound::Unbounded)?)
                }
                (Op::Lt, TermValue::Number(x)) => {
                    Test::Range(Interval::new(Bound::Unbounded, Bound::Exclusive(x))?)
                }
                (Op::Le, TermValue::Number(x)) => {
                    Test::Range(Interval::new(Bound::Unbounded, Bound::Inclusive(x))?)
                }
                _ => {
                    return Err(ModelError::Parse {
                        pos: term.pos,
                        msg: "ordering operator needs a number",
                    })
                }
            };
            constraints.push(Constraint::new(term.attr, test)?);
        }
        Ok(Subscription { constraints })
    }
}

impl fmt::Display for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// Intersect repeated attributes and sort by attribute name.
pub fn canonicalize(s: &Subscription) -> Result<Subscription, ModelError> {
    let mut sorted: Vec<&Constraint> = s.constraints.iter().collect();
    sorted.sort_by(|a, b| a.attr.cmp(&b.attr));
    let mut out: Vec<Constraint> = Vec::with_capacity(sorted.len());
    for c in sorted {
        match out.last_mut() {
            Some(prev) if prev.attr == c.attr => {
                let merged = match (&prev.test, &c.test) {
                    (Test::Range(a), Test::Range(b)) => a.intersect(b).map(Test::Range),
                    (Test::Equals(a), Test::Equals(b)) if a == b => Some(prev.test.clone()),
                    _ => None,
                };
                prev.test = merged.ok_or_else(|| ModelError::EmptyConstraint(c.attr.clone()))?;
            }
            _ => out.push(c.clone()),
        }
    }
    Ok(Subscription { constraints: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicationHeader {
    attrs: Vec<(String, AttributeValue)>,
}

impl PublicationHeader {
    pub fn new<I, K>(attrs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (K, AttributeValue)>,
        K: Into<String>,
    {
        let mut attrs: Vec<(String, AttributeValue)> = attrs
            .into_iter()
            .map(|(k, v)| (k.into(), normalize_zero_value(v)))
            .collect();
        if attrs.is_empty() || attrs.len() > MAX_HEADER_ATTRS {
            return Err(ModelError::HeaderSize(attrs.len()));
        }
        for (k, v) in &attrs {
            validate_attr_name(k)?;
            v.validate()?;
        }
        attrs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = attrs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ModelError::DuplicateAttribute(w[0].0.clone()));
        }
        Ok(PublicationHeader { attrs })
    }

    pub fn get(&self, attr: &str) -> Option<&AttributeValue> {
        self.attrs
            .binary_search_by(|(k, _)| k.as_str().cmp(attr))
            .ok()
            .map(|i| &self.attrs[i].1)
    }

    /// Attributes sorted by name.
    pub fn attrs(&self) -> &[(String, AttributeValue)] {
        &self.attrs
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn canonical_text(&self) -> String {
        let mut out = String::with_capacity(self.attrs.len() * 16);
        for (i, (k, v)) in self.attrs.iter().enumerate() {
            if i > 0 {
                out.push('&');
            }
            out.push_str(k);
            out.push('=');
            v.write_canonical(&mut out);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let terms = parse_terms(text)?;
        let mut attrs = Vec::with_capacity(terms.len());
        for term in terms {
            let v = match (term.op, term.value) {
                (Op::Eq, TermValue::Text(s)) => AttributeValue::Text(s),
                (Op::Eq, TermValue::Number(x)) => AttributeValue::Number(x),
                _ => {
                    return Err(ModelError::Parse {
                        pos: term.pos,
                        msg: "header terms must be attr=value",
                    })
                }
            };
            attrs.push((term.attr, v));
        }
        Self::new(attrs)
    }
}

impl fmt::Display for PublicationHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// A header plus an opaque payload that matching code never reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub id: PubId,
    pub header: PublicationHeader,
    pub payload: Vec<u8>,
}

/// Does the header satisfy every constraint? A missing attribute fails.
pub fn matches(h: &PublicationHeader, s: &Subscription) -> bool {
    s.constraints
        .iter()
        .all(|c| h.get(&c.attr).is_some_and(|v| eval_constraint(c, v)))
}

/// Does `s` cover `s2`, i.e. does every header matching `s2` also match `s`?
///
/// Both must be canonical. Extra constraints in `s2` only narrow it.
pub fn covers(s: &Subscription, s2: &Subscription) -> bool {
    let mut rest = s2.constraints.iter();
    'outer: for c in &s.constraints {
        for c2 in rest.by_ref() {
            match c2.attr.cmp(&c.attr) {
                Ordering::Less => continue,
                Ordering::Equal => {
                    if covers_constraint(c, c2).unwrap_or(false) {
                        continue 'outer;
                    }
                    return false;
                }
                Ordering::Greater => return false,
            }
        }
        return false;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Eq,
    Gt,
    Ge,
    Lt,
    Le,
}

#[derive(Debug)]
enum TermValue {
    Text(String),
    Number(f64),
    AnyNumber,
}

#[derive(Debug)]
struct Term {
    pos: usize,
    attr: String,
    op: Op,
    value: TermValue,
}

fn parse_terms(text: &str) -> Result<Vec<Term>, ModelError> {
    let bytes = text.as_bytes();
    let mut terms = Vec::with_capacity(bytes.iter().filter(|&&c| c == b'&').count() + 1);
    if text.is_empty() {
        return Ok(terms);
    }
    let err = |pos, msg| ModelError::Parse { pos, msg };
    let mut i = 0;
    loop {
        let start = i;
        while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || matches!(bytes[i], b'_' | b'.')) {
            i += 1;
        }
        if i == start {
            return Err(err(i, "expected attribute name"));
        }
        let attr = &text[start..i];
        validate_attr_name(attr)?;
        let (op, len) = match &bytes[i..] {
            [b'>', b'=', ..] => (Op::Ge, 2),
            [b'<', b'=', ..] => (Op::Le, 2),
            [b'>', ..] => (Op::Gt, 1),
            [b'<', ..] => (Op::Lt, 1),
            [b'=', ..] => (Op::Eq, 1),
            _ => return Err(err(i, "expected operator")),
        };
        i += len;
        let vpos = i;
        let value = match bytes.get(i) {
            Some(b'"') => {
                let mut j = i + 1;
                loop {
                    match bytes.get(j) {
                        None => return Err(err(j, "unterminated string")),
                        Some(b'\\') => j += 2,
                        Some(b'"') => break,
                        Some(_) => j += 1,
                    }
                }
                let inner = &bytes[i + 1..j];
                let s = if inner.iter().all(|&c| c >= 0x20 && c != b'\\') {
                    text[i + 1..j].to_string()
                } else {
                    serde_json::from_str(&text[i..=j]).map_err(|_| err(vpos, "invalid string literal"))?
                };
                i = j + 1;
                TermValue::Text(s)
            }
            Some(b'*') => {
                i += 1;
                TermValue::AnyNumber
            }
            Some(_) => {
                while i < bytes.len() && matches!(bytes[i], b'0'..=b'9' | b'-' | b'+' | b'.' | b'e' | b'E') {
                    i += 1;
                }
                let lit = &text[vpos..i];
                let x: f64 = lit.parse().map_err(|_| err(vpos, "invalid number"))?;
                if !x.is_finite() {
                    return Err(ModelError::NonFinite);
                }
                TermValue::Number(x)
            }
            None => return Err(err(i, "missing value")),
        };
        terms.push(Term {
            pos: start,
            attr: attr.to_string(),
            op,
            value,
        });
        match bytes.get(i) {
            None => break,
            Some(b'&') if i + 1 < bytes.len() => i += 1,
            Some(b'&') => return Err(err(i, "trailing separator")),
            Some(_) => return Err(err(i, "expected '&'")),
        }
    }
    Ok(terms)
}
