//! Canonical JSON bytes: object keys sorted bytewise, no whitespace,
//! integers in base 10, floats in shortest round-trip form.
//!
//! Key order is enforced here rather than relying on `serde_json::Map`
//! ordering, which changes if any crate in the graph turns on
//! `preserve_order`.

use serde_json::Value as Json;

pub fn to_bytes(value: &Json) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    write(value, &mut out);
    out
}

pub fn to_string(value: &Json) -> String {
    // canonical output is built from valid UTF-8 pieces only
    String::from_utf8(to_bytes(value)).expect("canonical JSON is UTF-8")
}

fn write(value: &Json, out: &mut Vec<u8>) {
    match value {
        Json::Null => out.extend_from_slice(b"null"),
        Json::Bool(true) => out.extend_from_slice(b"true"),
        Json::Bool(false) => out.extend_from_slice(b"false"),
        Json::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Json::String(s) => write_str(s, out),
        Json::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write(item, out);
            }
            out.push(b']');
        }
        Json::Object(map) => {
            let mut entries: Vec<(&String, &Json)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_str(k, out);
                out.push(b':');
                write(v, out);
            }
            out.push(b'}');
        }
    }
}

fn write_str(s: &str, out: &mut Vec<u8>) {
    // serde_json's string escaping is deterministic and minimal
    let quoted = serde_json::to_string(s).expect("string serialization cannot fail");
    out.extend_from_slice(quoted.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_nested_keys_without_whitespace() {
        let v = json!({"b": 1, "a": {"d": [1.5, null], "c": "x"}});
        assert_eq!(to_string(&v), r#"{"a":{"c":"x","d":[1.5,null]},"b":1}"#);
    }

    #[test]
    fn escapes_control_characters() {
        assert_eq!(to_string(&json!("a\"\n")), r#""a\"\n""#);
    }
}
