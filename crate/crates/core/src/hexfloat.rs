//! Serde adapters that write `f64` as the 16-digit hex of its bit pattern,
//! so model files reload bit-exactly.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn encode(value: f64) -> String {
    format!("{:016x}", value.to_bits())
}

pub fn decode(text: &str) -> Result<f64, String> {
    u64::from_str_radix(text, 16)
        .map(f64::from_bits)
        .map_err(|e| format!("bad hex double `{text}`: {e}"))
}

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&encode(*value))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    let text = String::deserialize(deserializer)?;
    decode(&text).map_err(de::Error::custom)
}

pub mod vec {
    use serde::ser::SerializeSeq;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(values.len()))?;
        for v in values {
            seq.serialize_element(&super::encode(*v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        let texts = Vec::<String>::deserialize(deserializer)?;
        texts
            .iter()
            .map(|t| super::decode(t).map_err(de::Error::custom))
            .collect()
    }
}
