//! Serde adapter for [`Amount`] in text config formats.
//!
//! TOML integers stop at `i64::MAX`, well below realistic wei amounts, so
//! amounts are accepted either as integers or as decimal strings and written
//! back as integers when they fit.

use serde::de::{self, Visitor};
use serde::{Deserializer, Serializer};

use crate::Amount;

pub fn serialize<S: Serializer>(v: &Amount, s: S) -> Result<S::Ok, S::Error> {
    match i64::try_from(*v) {
        Ok(small) => s.serialize_i64(small),
        Err(_) => s.serialize_str(&v.to_string()),
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Amount, D::Error> {
    d.deserialize_any(AmountVisitor)
}

struct AmountVisitor;

impl<'de> Visitor<'de> for AmountVisitor {
    type Value = Amount;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a non-negative integer or decimal string")
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Amount, E> {
        Amount::try_from(v).map_err(|_| E::custom("amount must be non-negative"))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Amount, E> {
        Ok(v.into())
    }

    fn visit_u128<E: de::Error>(self, v: u128) -> Result<Amount, E> {
        Ok(v)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Amount, E> {
        let t = v.trim().replace('_', "");
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(E::custom(format!("invalid amount {v:?}")));
        }
        t.parse().map_err(|_| E::custom(format!("amount {v:?} out of range")))
    }
}

/// Same adapter for `Option<Amount>`.
pub mod option {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super")] Amount);

    pub fn serialize<S: Serializer>(v: &Option<Amount>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Amount>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    use crate::Amount;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct T {
        #[serde(with = "super")]
        a: Amount,
    }

    #[test]
    fn integers_and_strings() {
        let t: T = toml::from_str("a = 42").unwrap();
        assert_eq!(t.a, 42);
        let t: T = toml::from_str("a = \"100_000_000_000_000_000_000\"").unwrap();
        assert_eq!(t.a, 10u128.pow(20));
        assert!(toml::from_str::<T>("a = -1").is_err());
        assert!(toml::from_str::<T>("a = \"1e5\"").is_err());
    }

    #[test]
    fn round_trip() {
        for a in [0, 7, i64::MAX as Amount, i64::MAX as Amount + 1, Amount::MAX] {
            let s = toml::to_string(&T { a }).unwrap();
            assert_eq!(toml::from_str::<T>(&s).unwrap().a, a);
            let j = serde_json::to_string(&T { a }).unwrap();
            assert_eq!(serde_json::from_str::<T>(&j).unwrap().a, a);
        }
    }
}
