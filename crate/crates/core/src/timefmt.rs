//! RFC 3339 timestamps at whole-second precision with a `Z` suffix.

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(at: &DateTime<Utc>, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&at.to_rfc3339_opts(SecondsFormat::Secs, true))
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<DateTime<Utc>, D::Error> {
    let text = String::deserialize(deserializer)?;
    let at = DateTime::parse_from_rfc3339(&text)
        .map_err(serde::de::Error::custom)?
        .with_timezone(&Utc);
    if at.nanosecond() != 0 {
        return Err(serde::de::Error::custom(
            "timestamp must have whole-second precision",
        ));
    }
    Ok(at)
}
