//! Byte fields as hex in human-readable formats and raw bytes otherwise.

use serde::{de::Error, Deserialize, Deserializer, Serializer};

fn put<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    if s.is_human_readable() {
        s.serialize_str(&hex::encode(bytes))
    } else {
        s.serialize_bytes(bytes)
    }
}

fn take<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    if d.is_human_readable() {
        let text = String::deserialize(d)?;
        // One spelling per value: uppercase digits would decode to the same bytes.
        if text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(D::Error::custom("hex must be lowercase"));
        }
        hex::decode(&text).map_err(D::Error::custom)
    } else {
        Vec::<u8>::deserialize(d)
    }
}

fn fixed<E: Error, const N: usize>(raw: Vec<u8>) -> Result<[u8; N], E> {
    raw.try_into().map_err(|_| E::custom(format!("expected {N} bytes")))
}

pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
    put(bytes, s)
}

pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
    fixed(take(d)?)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        put(bytes, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        take(d)
    }
}

struct Wrap<'a>(&'a [u8]);

impl serde::Serialize for Wrap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        put(self.0, s)
    }
}

struct Unwrap(Vec<u8>);

impl<'de> Deserialize<'de> for Unwrap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        take(d).map(Unwrap)
    }
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer, const N: usize>(bytes: &Option<[u8; N]>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => s.serialize_some(&Wrap(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<Option<[u8; N]>, D::Error> {
        Option::<Unwrap>::deserialize(d)?.map(|u| fixed(u.0)).transpose()
    }
}

pub mod option_vec {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => s.serialize_some(&Wrap(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Ok(Option::<Unwrap>::deserialize(d)?.map(|u| u.0))
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct T {
        #[serde(with = "super")]
        a: [u8; 3],
        #[serde(with = "super::vec")]
        b: Vec<u8>,
        #[serde(with = "super::option")]
        c: Option<[u8; 2]>,
        #[serde(with = "super::option_vec")]
        d: Option<Vec<u8>>,
    }

    #[test]
    fn text_is_hex_and_binary_is_raw() {
        let t = T {
            a: [1, 2, 0xff],
            b: vec![9],
            c: Some([0xab, 0xcd]),
            d: None,
        };
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"a":"0102ff","b":"09","c":"abcd","d":null}"#);
        assert_eq!(serde_json::from_str::<T>(&json).unwrap(), t);
        let bin = bincode::serialize(&t).unwrap();
        assert_eq!(bincode::deserialize::<T>(&bin).unwrap(), t);
        assert!(bin.len() < json.len());
        assert!(serde_json::from_str::<T>(&json.replace("ff", "FF")).is_err());
    }
}
