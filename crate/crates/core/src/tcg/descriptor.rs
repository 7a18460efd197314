//! Tool descriptors, trajectories and results: the keys and values of the cache.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TcgError;

/// Separates the fields of a single descriptor key.
pub const UNIT_SEP: char = '\u{1F}';
/// Separates descriptor keys inside an encoded trajectory.
pub const RECORD_SEP: char = '\u{1E}';

/// One tool invocation: name, canonical arguments and whether it may mutate
/// sandbox state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct ToolDescriptor {
    #[serde(rename = "tool")]
    tool_name: String,
    args_canonical: String,
    mutates_state: bool,
}

#[derive(Deserialize)]
struct RawDescriptor {
    tool: String,
    #[serde(default)]
    args_canonical: String,
    mutates_state: bool,
}

impl TryFrom<RawDescriptor> for ToolDescriptor {
    type Error = TcgError;

    fn try_from(r: RawDescriptor) -> Result<Self, TcgError> {
        ToolDescriptor::new(r.tool, r.args_canonical, r.mutates_state)
    }
}

impl ToolDescriptor {
    /// Builds a descriptor from an already-canonical argument string.
    pub fn new(
        tool_name: impl Into<String>,
        args_canonical: impl Into<String>,
        mutates_state: bool,
    ) -> Result<Self, TcgError> {
        let tool_name = tool_name.into();
        let args_canonical = args_canonical.into();
        if tool_name.is_empty() {
            return Err(TcgError::InvalidDescriptor("empty tool name".into()));
        }
        if has_separator(&tool_name) || has_separator(&args_canonical) {
            return Err(TcgError::InvalidDescriptor(format!(
                "separator character in descriptor for tool {tool_name:?}"
            )));
        }
        Ok(Self { tool_name, args_canonical, mutates_state })
    }

    /// Builds a descriptor from structured arguments, canonicalizing them.
    pub fn from_args(
        tool_name: impl Into<String>,
        args: &Value,
        mutates_state: bool,
    ) -> Result<Self, TcgError> {
        Self::new(tool_name, canonical_args(args), mutates_state)
    }

    pub fn tool_name(&self) -> &str {
        &self.tool_name
    }

    pub fn args_canonical(&self) -> &str {
        &self.args_canonical
    }

    pub fn mutates_state(&self) -> bool {
        self.mutates_state
    }

    /// Parses the canonical argument text back into JSON.
    pub fn args(&self) -> Option<Value> {
        if self.args_canonical.is_empty() {
            return Some(Value::Object(Default::default()));
        }
        serde_json::from_str(&self.args_canonical).ok()
    }

    /// `tool_name US args_canonical US (M|P)`.
    pub fn key(&self) -> String {
        let mut out = String::with_capacity(self.tool_name.len() + self.args_canonical.len() + 4);
        self.write_key(&mut out);
        out
    }

    fn write_key(&self, out: &mut String) {
        out.push_str(&self.tool_name);
        out.push(UNIT_SEP);
        out.push_str(&self.args_canonical);
        out.push(UNIT_SEP);
        out.push(if self.mutates_state { 'M' } else { 'P' });
    }

    /// Inverse of [`ToolDescriptor::key`].
    pub fn from_key(key: &str) -> Result<Self, TcgError> {
        let mut parts = key.split(UNIT_SEP);
        let (Some(name), Some(args), Some(flag), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TcgError::InvalidDescriptor(format!("malformed descriptor key {key:?}")));
        };
        let mutates_state = match flag {
            "M" => true,
            "P" => false,
            other => {
                return Err(TcgError::InvalidDescriptor(format!("bad statefulness flag {other:?}")))
            }
        };
        Self::new(name, args, mutates_state)
    }
}

impl fmt::Display for ToolDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.tool_name, self.args_canonical)
    }
}

fn has_separator(s: &str) -> bool {
    s.contains(UNIT_SEP) || s.contains(RECORD_SEP)
}

/// Canonical text form of a JSON argument structure: object keys sorted
/// lexicographically, no insignificant whitespace, numbers in shortest
/// round-trip form.
pub fn canonical_args(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        // serde_json renders strings with escaping for control characters and
        // floats via ryu (shortest round-trip).
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// An ordered sequence of tool calls; the cache key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    steps: Vec<ToolDescriptor>,
}

impl Trajectory {
    pub fn new(steps: Vec<ToolDescriptor>) -> Self {
        Self { steps }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> &[ToolDescriptor] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&ToolDescriptor> {
        self.steps.last()
    }

    pub fn push(&mut self, step: ToolDescriptor) {
        self.steps.push(step);
    }

    /// A copy extended by one step.
    pub fn with(&self, step: ToolDescriptor) -> Self {
        let mut steps = Vec::with_capacity(self.steps.len() + 1);
        steps.extend_from_slice(&self.steps);
        steps.push(step);
        Self { steps }
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self { steps: self.steps[..len].to_vec() }
    }

    /// Descriptor keys joined by the record separator.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                out.push(RECORD_SEP);
            }
            step.write_key(&mut out);
        }
        out
    }

    pub fn decode(encoded: &str) -> Result<Self, TcgError> {
        if encoded.is_empty() {
            return Ok(Self::empty());
        }
        encoded.split(RECORD_SEP).map(ToolDescriptor::from_key).collect::<Result<Vec<_>, _>>().map(Self::new)
    }

    /// Stable 64-bit hash of the encoded key. Used for routing and logging,
    /// never for equality.
    pub fn key_hash(&self) -> u64 {
        fnv1a64(self.encode().as_bytes())
    }

    /// The subsequence of state-mutating steps, order preserved.
    pub fn filter_stateful(&self) -> Self {
        Self { steps: self.steps.iter().filter(|d| d.mutates_state).cloned().collect() }
    }
}

impl FromIterator<ToolDescriptor> for Trajectory {
    fn from_iter<I: IntoIterator<Item = ToolDescriptor>>(iter: I) -> Self {
        Self { steps: iter.into_iter().collect() }
    }
}

/// Free-function form of [`Trajectory::filter_stateful`].
pub fn filter_stateful(trajectory: &Trajectory) -> Trajectory {
    trajectory.filter_stateful()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in data {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    ToolError,
}

/// The outcome of executing one tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    #[serde(rename = "payload_b64", with = "b64")]
    pub payload: Vec<u8>,
    pub status: ResultStatus,
    pub exec_ms: f64,
}

impl ToolResult {
    pub fn ok(payload: impl Into<Vec<u8>>, exec_ms: f64) -> Self {
        Self { payload: payload.into(), status: ResultStatus::Ok, exec_ms: exec_ms.max(0.0) }
    }

    pub fn tool_error(message: impl Into<Vec<u8>>, exec_ms: f64) -> Self {
        Self { payload: message.into(), status: ResultStatus::ToolError, exec_ms: exec_ms.max(0.0) }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResultStatus::Ok
    }

    /// Payload and status equality; execution time is ignored.
    pub fn same_value(&self, other: &ToolResult) -> bool {
        self.status == other.status && self.payload == other.payload
    }

    pub fn payload_lossy(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn d(name: &str, mutates: bool) -> ToolDescriptor {
        ToolDescriptor::new(name, "", mutates).unwrap()
    }

    #[test]
    fn deserialization_validates() {
        let ok: ToolDescriptor = serde_json::from_str(r#"{"tool":"ls","args_canonical":"{}","mutates_state":false}"#).unwrap();
        assert_eq!(ok.tool_name(), "ls");
        assert!(serde_json::from_str::<ToolDescriptor>(r#"{"tool":"","mutates_state":false}"#).is_err());
        assert!(serde_json::from_str::<ToolDescriptor>("{\"tool\":\"a\\u001eb\",\"mutates_state\":true}").is_err());
        let back: ToolDescriptor = serde_json::from_str(&serde_json::to_string(&ok).unwrap()).unwrap();
        assert_eq!(back, ok);
    }

    #[test]
    fn canonical_args_sorts_keys_and_strips_whitespace() {
        let a: Value = serde_json::from_str(r#"{ "path": "foo",  "content": "x", "n": {"b": 1, "a": 2.5} }"#).unwrap();
        let b = json!({"n": {"a": 2.5, "b": 1}, "content": "x", "path": "foo"});
        assert_eq!(canonical_args(&a), canonical_args(&b));
        assert_eq!(canonical_args(&a), r#"{"content":"x","n":{"a":2.5,"b":1},"path":"foo"}"#);
    }

    #[test]
    fn canonical_numbers_are_shortest_round_trip() {
        assert_eq!(canonical_args(&json!({"x": 0.1})), r#"{"x":0.1}"#);
        assert_eq!(canonical_args(&json!({"x": 1e21})), r#"{"x":1e+21}"#);
    }

    #[test]
    fn control_characters_in_args_are_escaped() {
        let desc = ToolDescriptor::from_args("write", &json!({"content": "a\u{1F}b\u{1E}"}), true).unwrap();
        assert!(!desc.args_canonical().contains(UNIT_SEP));
    }

    #[test]
    fn rejects_separator_in_name() {
        assert!(ToolDescriptor::new("a\u{1F}b", "", true).is_err());
        assert!(ToolDescriptor::new("a\u{1E}b", "", true).is_err());
        assert!(ToolDescriptor::new("", "", true).is_err());
    }

    #[test]
    fn statefulness_is_part_of_the_key() {
        assert_ne!(d("read", true).key(), d("read", false).key());
    }

    #[test]
    fn filter_stateful_drops_preserving_tools() {
        let q = Trajectory::new(vec![d("F1", true), d("S1", false), d("F2", true), d("S2", false)]);
        assert_eq!(filter_stateful(&q), Trajectory::new(vec![d("F1", true), d("F2", true)]));
        let all_s = Trajectory::new(vec![d("S1", false), d("S2", false)]);
        assert!(filter_stateful(&all_s).is_empty());
        // reordered stateless tail filters to the same spine
        let a = Trajectory::new(vec![d("t1", true), d("t2", true), d("t3", false), d("t4", false)]);
        let b = Trajectory::new(vec![d("t1", true), d("t2", true), d("t4", false), d("t3", false)]);
        assert_eq!(a.filter_stateful(), b.filter_stateful());
        assert_eq!(a.filter_stateful().len(), 2);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_trajectory_round_trips() {
        assert_eq!(Trajectory::decode("").unwrap(), Trajectory::empty());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn descriptor() -> impl Strategy<Value = ToolDescriptor> {
            ("[a-z]{1,6}", "[ -~]{0,8}", any::<bool>())
                .prop_map(|(n, a, m)| ToolDescriptor::new(n, a, m).unwrap())
        }

        proptest! {
            #[test]
            fn encoding_is_injective_and_decodable(
                a in prop::collection::vec(descriptor(), 0..6),
                b in prop::collection::vec(descriptor(), 0..6),
            ) {
                let ta = Trajectory::new(a);
                let tb = Trajectory::new(b);
                prop_assert_eq!(Trajectory::decode(&ta.encode()).unwrap(), ta.clone());
                prop_assert_eq!(ta == tb, ta.encode() == tb.encode());
            }
        }
    }
}
