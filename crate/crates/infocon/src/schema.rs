//! A small structural validator for the JSON Schema subset the shipped
//! schemas use: `type`, `properties`, `required`, `additionalProperties`
//! (boolean), `items`, `enum` and `minimum`.

use serde_json::Value;

/// Validate `value` against `schema`, returning the first violation as a
/// human-readable path + message.
pub fn validate(value: &Value, schema: &Value) -> Result<(), String> {
    check(value, schema, "$")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
        "number" => value.is_number(),
        other => type_name(value) == other,
    }
}

fn check(value: &Value, schema: &Value, path: &str) -> Result<(), String> {
    let Some(obj) = schema.as_object() else {
        return Err(format!("{path}: schema node is not an object"));
    };
    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(t) => type_matches(value, t),
            Value::Array(ts) => ts
                .iter()
                .filter_map(|t| t.as_str())
                .any(|t| type_matches(value, t)),
            _ => false,
        };
        if !ok {
            return Err(format!(
                "{path}: expected type {ty}, found {}",
                type_name(value)
            ));
        }
    }
    if let Some(allowed) = obj.get("enum").and_then(|e| e.as_array()) {
        if !allowed.contains(value) {
            return Err(format!("{path}: value {value} not in enum"));
        }
    }
    if let Some(min) = obj.get("minimum").and_then(|m| m.as_f64()) {
        if let Some(x) = value.as_f64() {
            if x < min {
                return Err(format!("{path}: {x} below minimum {min}"));
            }
        }
    }
    if let (Some(props), Some(map)) = (
        obj.get("properties").and_then(|p| p.as_object()),
        value.as_object(),
    ) {
        if let Some(required) = obj.get("required").and_then(|r| r.as_array()) {
            for name in required.iter().filter_map(|n| n.as_str()) {
                if !map.contains_key(name) {
                    return Err(format!("{path}: missing required field `{name}`"));
                }
            }
        }
        let additional = obj
            .get("additionalProperties")
            .and_then(|a| a.as_bool())
            .unwrap_or(true);
        for (key, val) in map {
            match props.get(key) {
                Some(sub) => check(val, sub, &format!("{path}.{key}"))?,
                None if !additional => {
                    return Err(format!("{path}: unexpected field `{key}`"));
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (obj.get("items"), value.as_array()) {
        for (i, val) in arr.iter().enumerate() {
            check(val, items, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn accepts_and_rejects() {
        let schema = json!({
            "type": "object",
            "required": ["name", "values"],
            "additionalProperties": false,
            "properties": {
                "name": {"type": "string"},
                "values": {"type": "array", "items": {"type": "number", "minimum": 0.0}},
                "mode": {"type": "string", "enum": ["a", "b"]}
            }
        });
        assert!(validate(&json!({"name": "x", "values": [1.0, 2.5]}), &schema).is_ok());
        assert!(validate(&json!({"name": "x", "values": [1.0], "mode": "a"}), &schema).is_ok());
        let err = validate(&json!({"name": "x"}), &schema).unwrap_err();
        assert!(err.contains("values"));
        let err = validate(&json!({"name": "x", "values": [-1.0]}), &schema).unwrap_err();
        assert!(err.contains("minimum"));
        let err = validate(&json!({"name": "x", "values": [], "zzz": 1}), &schema).unwrap_err();
        assert!(err.contains("zzz"));
        let err = validate(&json!({"name": "x", "values": [], "mode": "c"}), &schema).unwrap_err();
        assert!(err.contains("enum"));
    }

    #[test]
    fn integer_vs_number() {
        let schema = json!({"type": "integer"});
        assert!(validate(&json!(3), &schema).is_ok());
        assert!(validate(&json!(3.5), &schema).is_err());
        let schema = json!({"type": "number"});
        assert!(validate(&json!(3), &schema).is_ok());
    }
}
