//! Scalar attribute values (the φ value space) and their JSON mapping.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value as Json;

/// Ordered attribute map; key order is irrelevant to identity because
/// canonical serialization sorts keys anyway.
pub type Attributes = BTreeMap<String, AttributeValue>;

/// A scalar attribute. Nested structures are flattened to dotted keys
/// before they ever become attribute values.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributeValue {
    Text(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    /// Explicitly unknown. Queries treat it exactly like an absent key.
    Missing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Text,
    Int,
    Float,
    Bool,
}

impl ValueKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" | "string" => Some(ValueKind::Text),
            "int" | "integer" => Some(ValueKind::Int),
            "float" | "number" => Some(ValueKind::Float),
            "bool" | "boolean" => Some(ValueKind::Bool),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Text => "text",
            ValueKind::Int => "int",
            ValueKind::Float => "float",
            ValueKind::Bool => "bool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValueError {
    #[error("non-finite float")]
    NonFinite,
    #[error("integer out of 64-bit signed range")]
    IntegerRange,
    #[error("nested value where a scalar was expected")]
    NotScalar,
}

impl AttributeValue {
    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            AttributeValue::Text(_) => Some(ValueKind::Text),
            AttributeValue::Int(_) => Some(ValueKind::Int),
            AttributeValue::Float(_) => Some(ValueKind::Float),
            AttributeValue::Bool(_) => Some(ValueKind::Bool),
            AttributeValue::Missing => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, AttributeValue::Missing)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttributeValue::Int(i) => Some(*i as f64),
            AttributeValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            AttributeValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, AttributeValue::Float(f) if !f.is_finite())
    }

    /// Whether this value can be stored under a parameter of `kind`.
    /// Integers are accepted where floats are declared.
    pub fn fits(&self, kind: ValueKind) -> bool {
        matches!(
            (self, kind),
            (AttributeValue::Text(_), ValueKind::Text)
                | (AttributeValue::Int(_), ValueKind::Int)
                | (AttributeValue::Int(_), ValueKind::Float)
                | (AttributeValue::Float(_), ValueKind::Float)
                | (AttributeValue::Bool(_), ValueKind::Bool)
        )
    }

    pub fn to_json(&self) -> Result<Json, ValueError> {
        Ok(match self {
            AttributeValue::Text(s) => Json::String(s.clone()),
            AttributeValue::Int(i) => Json::from(*i),
            AttributeValue::Float(f) => Json::Number(serde_json::Number::from_f64(*f).ok_or(ValueError::NonFinite)?),
            AttributeValue::Bool(b) => Json::Bool(*b),
            AttributeValue::Missing => Json::Null,
        })
    }

    pub fn from_json(json: &Json) -> Result<Self, ValueError> {
        match json {
            Json::Null => Ok(AttributeValue::Missing),
            Json::Bool(b) => Ok(AttributeValue::Bool(*b)),
            Json::String(s) => Ok(AttributeValue::Text(s.clone())),
            Json::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(AttributeValue::Int(i))
                } else if n.is_u64() {
                    Err(ValueError::IntegerRange)
                } else {
                    match n.as_f64() {
                        Some(f) if f.is_finite() => Ok(AttributeValue::Float(f)),
                        _ => Err(ValueError::NonFinite),
                    }
                }
            }
            Json::Array(_) | Json::Object(_) => Err(ValueError::NotScalar),
        }
    }

    /// Converts a TOML scalar. Datetimes are kept as their text form.
    pub fn from_toml(value: &toml::Value) -> Result<Self, ValueError> {
        match value {
            toml::Value::String(s) => Ok(AttributeValue::Text(s.clone())),
            toml::Value::Integer(i) => Ok(AttributeValue::Int(*i)),
            toml::Value::Float(f) if f.is_finite() => Ok(AttributeValue::Float(*f)),
            toml::Value::Float(_) => Err(ValueError::NonFinite),
            toml::Value::Boolean(b) => Ok(AttributeValue::Bool(*b)),
            toml::Value::Datetime(d) => Ok(AttributeValue::Text(d.to_string())),
            toml::Value::Array(_) | toml::Value::Table(_) => Err(ValueError::NotScalar),
        }
    }

    /// Plain rendering used in CSV cells and action templates (no quotes).
    pub fn render_plain(&self) -> String {
        match self {
            AttributeValue::Text(s) => s.clone(),
            AttributeValue::Missing => String::new(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for AttributeValue {
    /// DSL-literal rendering: text is quoted, MISSING prints as `MISSING`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Text(s) => write!(f, "{}", Json::String(s.clone())),
            AttributeValue::Int(i) => write!(f, "{i}"),
            AttributeValue::Float(x) => match serde_json::Number::from_f64(*x) {
                Some(n) => write!(f, "{n}"),
                None => write!(f, "{x}"),
            },
            AttributeValue::Bool(b) => write!(f, "{b}"),
            AttributeValue::Missing => f.write_str("MISSING"),
        }
    }
}

impl From<&str> for AttributeValue {
    fn from(s: &str) -> Self {
        AttributeValue::Text(s.to_owned())
    }
}

impl From<String> for AttributeValue {
    fn from(s: String) -> Self {
        AttributeValue::Text(s)
    }
}

impl From<i64> for AttributeValue {
    fn from(i: i64) -> Self {
        AttributeValue::Int(i)
    }
}

impl From<f64> for AttributeValue {
    fn from(f: f64) -> Self {
        AttributeValue::Float(f)
    }
}

impl From<bool> for AttributeValue {
    fn from(b: bool) -> Self {
        AttributeValue::Bool(b)
    }
}

impl Serialize for AttributeValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().map_err(serde::ser::Error::custom)?.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AttributeValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(deserializer)?;
        AttributeValue::from_json(&json).map_err(D::Error::custom)
    }
}

/// Flattens a JSON document into dotted scalar keys
/// (`{"a": {"b": 1}, "c": [2, 3]}` → `a.b`, `c.0`, `c.1`).
///
/// Returns the keys that could not be represented (non-finite or
/// out-of-range numbers) alongside the flattened map.
pub fn flatten_json(json: &Json) -> (Attributes, Vec<String>) {
    fn walk(prefix: &str, json: &Json, out: &mut Attributes, bad: &mut Vec<String>) {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_owned()
            } else {
                format!("{prefix}.{k}")
            }
        };
        match json {
            Json::Object(map) => {
                for (k, v) in map {
                    walk(&key(k), v, out, bad);
                }
            }
            Json::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(&key(&i.to_string()), v, out, bad);
                }
            }
            scalar => match AttributeValue::from_json(scalar) {
                Ok(v) => {
                    out.insert(prefix.to_owned(), v);
                }
                Err(_) => bad.push(prefix.to_owned()),
            },
        }
    }
    let mut out = Attributes::new();
    let mut bad = Vec::new();
    walk("", json, &mut out, &mut bad);
    (out, bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_numbers_keep_int_float_distinction() {
        let v: AttributeValue = serde_json::from_str("1").unwrap();
        assert_eq!(v, AttributeValue::Int(1));
        let v: AttributeValue = serde_json::from_str("1.0").unwrap();
        assert_eq!(v, AttributeValue::Float(1.0));
        assert_eq!(serde_json::to_string(&AttributeValue::Float(1.0)).unwrap(), "1.0");
        assert_eq!(serde_json::to_string(&AttributeValue::Float(0.1)).unwrap(), "0.1");
    }

    #[test]
    fn nan_is_rejected() {
        assert_eq!(AttributeValue::Float(f64::NAN).to_json(), Err(ValueError::NonFinite));
        assert!(serde_json::to_string(&AttributeValue::Float(f64::INFINITY)).is_err());
    }

    #[test]
    fn huge_unsigned_is_out_of_range() {
        let r: Result<AttributeValue, _> = serde_json::from_str("18446744073709551615");
        assert!(r.is_err());
    }

    #[test]
    fn flatten_nested() {
        let json: Json = serde_json::json!({"a": {"b": 1}, "c": [2.5, "x"], "d": null});
        let (flat, bad) = flatten_json(&json);
        assert!(bad.is_empty());
        assert_eq!(flat["a.b"], AttributeValue::Int(1));
        assert_eq!(flat["c.0"], AttributeValue::Float(2.5));
        assert_eq!(flat["c.1"], AttributeValue::Text("x".into()));
        assert_eq!(flat["d"], AttributeValue::Missing);
    }

    #[test]
    fn int_fits_float_param() {
        assert!(AttributeValue::Int(3).fits(ValueKind::Float));
        assert!(!AttributeValue::Float(3.0).fits(ValueKind::Int));
    }
}
