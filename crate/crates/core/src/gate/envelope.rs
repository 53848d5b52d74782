use serde_json::{Map, Value};
use thiserror::Error;

use crate::canonical::parse_strict;
use crate::hash::RequestId;

const FIELDS: [&str; 5] = ["args", "op", "originSkillId", "reasoning", "requestId"];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed envelope: {0}")]
pub struct EnvelopeError(pub String);

/// A tool call as emitted by the agent.
///
/// `op` is kept as raw text: an out-of-vocabulary token is still a request
/// the gate must see, classify and deny.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestEnvelope {
    pub op: String,
    pub args: Map<String, Value>,
    pub reasoning: String,
    pub request_id: Option<RequestId>,
    pub origin_skill_id: String,
}

impl RequestEnvelope {
    pub fn new(op: impl Into<String>, target: impl Into<String>, origin: impl Into<String>) -> RequestEnvelope {
        let mut args = Map::new();
        args.insert("target".into(), Value::String(target.into()));
        RequestEnvelope {
            op: op.into(),
            args,
            reasoning: String::new(),
            request_id: None,
            origin_skill_id: origin.into(),
        }
    }

    pub fn with_arg(mut self, key: &str, value: impl Into<Value>) -> RequestEnvelope {
        self.args.insert(key.into(), value.into());
        self
    }

    pub fn with_reasoning(mut self, reasoning: impl Into<String>) -> RequestEnvelope {
        self.reasoning = reasoning.into();
        self
    }

    pub fn target(&self) -> Option<&str> {
        self.args.get("target").and_then(Value::as_str)
    }

    pub fn arg_str(&self, key: &str) -> Option<&str> {
        self.args.get(key).and_then(Value::as_str)
    }

    /// Strict JSON form: `{"op","args","reasoning","originSkillId","requestId"?}`.
    pub fn parse(bytes: &[u8]) -> Result<RequestEnvelope, EnvelopeError> {
        let value = parse_strict(bytes).map_err(|e| EnvelopeError(e.message().to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(EnvelopeError("not an object".into()));
        };
        if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(EnvelopeError(format!("unknown field {k:?}")));
        }
        let op = take_str(&mut obj, "op")?;
        let args = match obj.remove("args") {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(EnvelopeError("args must be an object".into())),
            None => return Err(EnvelopeError("missing args".into())),
        };
        let reasoning = match obj.remove("reasoning") {
            None => String::new(),
            Some(Value::String(s)) => s,
            Some(_) => return Err(EnvelopeError("reasoning must be a string".into())),
        };
        let request_id = match obj.remove("requestId") {
            None => None,
            Some(Value::String(s)) => Some(s.parse().map_err(EnvelopeError)?),
            Some(_) => return Err(EnvelopeError("requestId must be a string".into())),
        };
        let origin_skill_id = take_str(&mut obj, "originSkillId")?;
        Ok(RequestEnvelope {
            op,
            args,
            reasoning,
            request_id,
            origin_skill_id,
        })
    }

    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("op".into(), Value::String(self.op.clone()));
        obj.insert("args".into(), Value::Object(self.args.clone()));
        obj.insert("reasoning".into(), Value::String(self.reasoning.clone()));
        obj.insert("originSkillId".into(), Value::String(self.origin_skill_id.clone()));
        if let Some(id) = &self.request_id {
            obj.insert("requestId".into(), Value::String(id.to_hex()));
        }
        Value::Object(obj)
    }
}

fn take_str(obj: &mut Map<String, Value>, key: &str) -> Result<String, EnvelopeError> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(EnvelopeError(format!("{key} must be a string"))),
        None => Err(EnvelopeError(format!("missing {key}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut e = RequestEnvelope::new("fs.write.irrev", "a.txt", "s").with_arg("mode", "delete");
        e.request_id = Some(RequestId([1; 16]));
        let bytes = serde_json::to_vec(&e.to_value()).unwrap();
        assert_eq!(RequestEnvelope::parse(&bytes).unwrap(), e);
    }

    #[test]
    fn rejects_unknown_and_polluted() {
        assert!(RequestEnvelope::parse(br#"{"op":"x","args":{},"originSkillId":"s","extra":1}"#).is_err());
        assert!(RequestEnvelope::parse(br#"{"op":"x","args":{"__proto__":{}},"originSkillId":"s"}"#).is_err());
        assert!(RequestEnvelope::parse(br#"{"op":"x","args":{},"originSkillId":"s"}"#).is_ok());
    }
}
