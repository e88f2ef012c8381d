//! Transactional sandbox runtime for agent-issued shell commands.
//!
//! Every command is classified by a [`policy::PolicySet`]. Blacklisted
//! commands are refused, whitelisted read-only commands run directly, and
//! everything else runs inside a transaction: the workspace is snapshotted,
//! the command executes, and the workspace is either kept (exit 0) or restored
//! byte-for-byte from the snapshot.

pub mod policy;
pub mod snapshot;
pub mod bench;
pub mod executor;
pub mod journal;
pub mod service;
pub mod transaction;

/// Serde adapter storing byte buffers as standard base64 text.
pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter storing a `Duration` as fractional milliseconds.
pub(crate) mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Duration::try_from_secs_f64(ms / 1000.0).map_err(serde::de::Error::custom)
    }
}
