use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256, Sha512_256};

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};

/// A 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s).ok()?;
        Some(Digest(raw.try_into().ok()?))
    }

    /// Copy of this digest with one bit flipped.
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        self.0[(bit / 8) % 32] ^= 1 << (bit % 8);
        self
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

impl Encode for Digest {
    fn encode(&self, w: &mut Writer) {
        w.fixed(&self.0);
    }
}

impl Decode for Digest {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(Digest(r.fixed()?))
    }
}

/// Collision-resistant 256-bit hash used for every digest in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HashAlg {
    #[default]
    Sha256,
    Sha512_256,
}

impl Encode for HashAlg {
    fn encode(&self, w: &mut Writer) {
        w.u8(match self {
            HashAlg::Sha256 => 0,
            HashAlg::Sha512_256 => 1,
        });
    }
}

impl Decode for HashAlg {
    fn decode(r: &mut Reader) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(HashAlg::Sha256),
            1 => Ok(HashAlg::Sha512_256),
            _ => Err(CodecError::Invalid("hash algorithm")),
        }
    }
}

impl HashAlg {
    pub fn digest(self, bytes: &[u8]) -> Digest {
        let out: [u8; 32] = match self {
            HashAlg::Sha256 => Sha256::digest(bytes).into(),
            HashAlg::Sha512_256 => Sha512_256::digest(bytes).into(),
        };
        Digest(out)
    }

    /// Start a domain-separated tuple digest.
    pub fn tuple(self, domain: &str) -> TupleHasher {
        let mut w = Writer::with_capacity(128);
        w.str(domain);
        TupleHasher { alg: self, w }
    }
}

/// Hashes a tuple of fields using the canonical length-prefixed layout:
/// `len(domain) ‖ domain ‖ len(f1) ‖ f1 ‖ len(f2) ‖ f2 …` where every field
/// is framed with a `u32` big-endian length.
pub struct TupleHasher {
    alg: HashAlg,
    w: Writer,
}

impl TupleHasher {
    pub fn field(mut self, bytes: &[u8]) -> Self {
        self.w.bytes(bytes);
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.field(&v.to_be_bytes())
    }

    pub fn digest(self, d: &Digest) -> Self {
        self.field(&d.0)
    }

    pub fn encoded<T: Encode + ?Sized>(self, v: &T) -> Self {
        let bytes = v.to_bytes();
        self.field(&bytes)
    }

    pub fn finish(self) -> Digest {
        self.alg.digest(self.w.as_slice())
    }
}
