use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of a document's compact JSON form. Object keys come out
/// sorted, so equal documents hash equally.
pub fn content_hash(doc: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(doc).expect("JSON values serialize")))
}

const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub tick: Option<u64>,
    pub stage: String,
    pub status: String,
    /// Hash of the artifact this event published.
    pub artifact: Option<String>,
    /// Hash of the artifact it was computed from.
    pub input: Option<String>,
    pub detail: Value,
    /// Hash of the previous event.
    pub prev: String,
    pub hash: String,
}

/// Append-only, hash-chained log. Holds no wall-clock data, so replaying
/// the same inputs reproduces it byte for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn append(
        &mut self,
        tick: Option<u64>,
        stage: &str,
        status: &str,
        artifact: Option<String>,
        input: Option<String>,
        detail: Value,
    ) -> &Event {
        let prev = self.events.last().map_or_else(|| GENESIS.to_string(), |e| e.hash.clone());
        let mut e = Event {
            seq: self.events.len() as u64,
            tick,
            stage: stage.into(),
            status: status.into(),
            artifact,
            input,
            detail,
            prev,
            hash: String::new(),
        };
        e.hash = Self::event_hash(&e);
        self.events.push(e);
        self.events.last().expect("just pushed")
    }

    fn event_hash(e: &Event) -> String {
        let mut doc = serde_json::to_value(e).expect("events serialize");
        doc.as_object_mut().expect("event is an object").remove("hash");
        content_hash(&doc)
    }

    /// One compact JSON event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    /// Recomputes every hash and link; returns the first broken sequence number.
    pub fn verify(&self) -> Result<(), u64> {
        let mut prev = GENESIS.to_string();
        for e in &self.events {
            if e.prev != prev || e.hash != Self::event_hash(e) {
                return Err(e.seq);
            }
            prev = e.hash.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn chain_detects_tampering() {
        let mut log = EventLog::default();
        log.append(Some(0), "pf", "ok", Some("a".into()), None, json!({"x": 1}));
        log.append(Some(0), "se", "ok", Some("b".into()), Some("a".into()), json!({}));
        assert_eq!(log.verify(), Ok(()));
        assert_eq!(log.events[1].prev, log.events[0].hash);
        let mut bad = log.clone();
        bad.events[0].detail = json!({"x": 2});
        assert_eq!(bad.verify(), Err(0));
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": [1.5, 2]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": [1.5, 2], "b": 1}"#).unwrap();
        assert_eq!(content_hash(&a), content_hash(&b));
    }
}
