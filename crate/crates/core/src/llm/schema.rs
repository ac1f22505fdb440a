//! Structural schemas used both to instruct the model and to validate replies.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    String,
    Boolean,
    Number,
    Integer,
    Enum(Vec<String>),
    Array {
        items: Box<SchemaKind>,
        min_items: Option<usize>,
        max_items: Option<usize>,
    },
    Object(Vec<Field>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub kind: SchemaKind,
    pub required: bool,
}

impl Field {
    pub fn required(name: &str, kind: SchemaKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            required: true,
        }
    }

    pub fn optional(name: &str, kind: SchemaKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            required: false,
        }
    }
}

/// A named top-level object schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub name: String,
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaViolation {}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl SchemaSpec {
    pub fn new(name: &str, fields: Vec<Field>) -> Self {
        Self {
            name: name.to_string(),
            fields,
        }
    }

    /// Strict validation: missing required fields, unexpected fields, wrong
    /// kinds and unknown enum values all fail.
    pub fn validate(&self, value: &Value) -> Result<(), SchemaViolation> {
        validate_kind(&SchemaKind::Object(self.fields.clone()), value, "$")
    }

    /// JSON Schema rendering for the prompt. Keys come out sorted, so the
    /// text is stable across runs.
    pub fn to_json_schema(&self) -> Value {
        let mut v = kind_schema(&SchemaKind::Object(self.fields.clone()));
        v["title"] = json!(self.name);
        v
    }
}

fn validate_kind(kind: &SchemaKind, value: &Value, path: &str) -> Result<(), SchemaViolation> {
    let fail = |message: String| {
        Err(SchemaViolation {
            path: path.to_string(),
            message,
        })
    };
    match kind {
        SchemaKind::String => match value {
            Value::String(_) => Ok(()),
            v => fail(format!("expected string, got {}", kind_name(v))),
        },
        SchemaKind::Boolean => match value {
            Value::Bool(_) => Ok(()),
            v => fail(format!("expected boolean, got {}", kind_name(v))),
        },
        SchemaKind::Number => match value {
            Value::Number(_) => Ok(()),
            v => fail(format!("expected number, got {}", kind_name(v))),
        },
        SchemaKind::Integer => match value {
            Value::Number(n) if n.is_i64() || n.is_u64() => Ok(()),
            v => fail(format!("expected integer, got {}", kind_name(v))),
        },
        SchemaKind::Enum(options) => match value {
            Value::String(s) if options.contains(s) => Ok(()),
            Value::String(s) => fail(format!("`{s}` is not one of {options:?}")),
            v => fail(format!("expected one of {options:?}, got {}", kind_name(v))),
        },
        SchemaKind::Array {
            items,
            min_items,
            max_items,
        } => {
            let Value::Array(elems) = value else {
                return fail(format!("expected array, got {}", kind_name(value)));
            };
            if let Some(min) = min_items {
                if elems.len() < *min {
                    return fail(format!("expected at least {min} items, got {}", elems.len()));
                }
            }
            if let Some(max) = max_items {
                if elems.len() > *max {
                    return fail(format!("expected at most {max} items, got {}", elems.len()));
                }
            }
            for (i, e) in elems.iter().enumerate() {
                validate_kind(items, e, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        SchemaKind::Object(fields) => {
            let Value::Object(map) = value else {
                return fail(format!("expected object, got {}", kind_name(value)));
            };
            for f in fields {
                match map.get(&f.name) {
                    Some(v) => validate_kind(&f.kind, v, &format!("{path}.{}", f.name))?,
                    None if f.required => return fail(format!("missing required field `{}`", f.name)),
                    None => {}
                }
            }
            if let Some(extra) = map.keys().find(|k| !fields.iter().any(|f| &f.name == *k)) {
                return fail(format!("unexpected field `{extra}`"));
            }
            Ok(())
        }
    }
}

fn kind_schema(kind: &SchemaKind) -> Value {
    match kind {
        SchemaKind::String => json!({"type": "string"}),
        SchemaKind::Boolean => json!({"type": "boolean"}),
        SchemaKind::Number => json!({"type": "number"}),
        SchemaKind::Integer => json!({"type": "integer"}),
        SchemaKind::Enum(options) => json!({"type": "string", "enum": options}),
        SchemaKind::Array {
            items,
            min_items,
            max_items,
        } => {
            let mut v = json!({"type": "array", "items": kind_schema(items)});
            if let Some(n) = min_items {
                v["minItems"] = json!(n);
            }
            if let Some(n) = max_items {
                v["maxItems"] = json!(n);
            }
            v
        }
        SchemaKind::Object(fields) => {
            let mut props = Map::new();
            for f in fields {
                props.insert(f.name.clone(), kind_schema(&f.kind));
            }
            let required: Vec<&str> = fields
                .iter()
                .filter(|f| f.required)
                .map(|f| f.name.as_str())
                .collect();
            json!({
                "type": "object",
                "properties": props,
                "required": required,
                "additionalProperties": false,
            })
        }
    }
}

/// Finds the first balanced `{...}` span that parses as a JSON object.
/// Surrounding prose and code fences are ignored.
pub fn extract_json_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass_schema() -> SchemaSpec {
        SchemaSpec::new("verdict", vec![Field::required("pass", SchemaKind::Boolean)])
    }

    #[test]
    fn validates_kinds() {
        let s = pass_schema();
        assert!(s.validate(&json!({"pass": true})).is_ok());
        let err = s.validate(&json!({"pass": 1})).unwrap_err();
        assert_eq!(err.to_string(), "at $.pass: expected boolean, got number");
        assert!(s.validate(&json!({})).is_err());
        assert!(s.validate(&json!({"pass": true, "extra": 1})).is_err());
        assert!(s.validate(&json!([true])).is_err());
    }

    #[test]
    fn enums_and_arrays() {
        let s = SchemaSpec::new(
            "x",
            vec![Field::required(
                "items",
                SchemaKind::Array {
                    items: Box::new(SchemaKind::Object(vec![
                        Field::required("id", SchemaKind::Enum(vec!["a".into(), "b".into()])),
                        Field::optional("n", SchemaKind::Integer),
                    ])),
                    min_items: Some(1),
                    max_items: Some(2),
                },
            )],
        );
        assert!(s.validate(&json!({"items": [{"id": "a"}, {"id": "b", "n": 2}]})).is_ok());
        assert!(s.validate(&json!({"items": [{"id": "c"}]})).is_err());
        assert!(s.validate(&json!({"items": []})).is_err());
        assert!(s.validate(&json!({"items": [{"id": "a", "n": 1.5}]})).is_err());
        let err = s.validate(&json!({"items": [{"id": "a"}, {"id": "z"}]})).unwrap_err();
        assert_eq!(err.path, "$.items[1].id");
    }

    #[test]
    fn json_schema_rendering() {
        let v = pass_schema().to_json_schema();
        assert_eq!(v["required"], json!(["pass"]));
        assert_eq!(v["properties"]["pass"]["type"], "boolean");
        assert_eq!(v["title"], "verdict");
    }

    #[test]
    fn extracts_from_fences_and_prose() {
        let text = "Sure! Here you go:\n```json\n{\"pass\": false, \"s\": \"}{\"}\n```\nthanks";
        assert_eq!(extract_json_object(text), Some(json!({"pass": false, "s": "}{"})));
        assert_eq!(extract_json_object("{not json} then {\"a\": 1}"), Some(json!({"a": 1})));
        assert_eq!(extract_json_object("nothing here"), None);
        assert_eq!(extract_json_object("{\"open\": "), None);
    }
}
