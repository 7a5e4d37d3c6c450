//! Sealing, signatures and the line-oriented wire framing.
//!
//! Symmetric envelopes are AES-128-CTR with a random 16-byte IV prepended to
//! the ciphertext. Asymmetric envelopes are RSA-2048 OAEP(SHA-256) for short
//! plaintexts and a hybrid (one-shot AES key under RSA, body under AES) past
//! the OAEP capacity. Signatures are RSASSA-PKCS1-v1_5 over SHA-256.

use aes::cipher::{KeyIvInit, StreamCipher};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{CryptoRng, RngCore};
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Verifier};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ClientId, PubId, SubId};

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;

pub const SYM_KEY_LEN: usize = 16;
pub const IV_LEN: usize = 16;
pub const RSA_BITS: usize = 2048;
/// OAEP(SHA-256) capacity of a 2048-bit modulus: 256 - 2*32 - 2.
pub const OAEP_CAPACITY: usize = 190;

const MODE_DIRECT: u8 = 0x01;
const MODE_HYBRID: u8 = 0x02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("decryption failed")]
    Auth,
    #[error("key error: {0}")]
    Key(String),
}

/// AES-128 key shared by the publisher and the router.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; SYM_KEY_LEN]);

impl SymKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; SYM_KEY_LEN];
        rng.fill_bytes(&mut k);
        SymKey(k)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let k: [u8; SYM_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Key(format!("symmetric key must be {SYM_KEY_LEN} bytes")))?;
        Ok(SymKey(k))
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
        let raw = B64
            .decode(s.trim())
            .map_err(|e| CryptoError::Key(e.to_string()))?;
        Self::from_bytes(&raw)
    }
}

impl std::fmt::Debug for SymKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymKey(..)")
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    private: RsaPrivateKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, CryptoError> {
        let private =
            RsaPrivateKey::new(rng, RSA_BITS).map_err(|e| CryptoError::Key(e.to_string()))?;
        Ok(KeyPair { private })
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.private.to_public_key())
    }

    pub fn to_pem(&self) -> Result<String, CryptoError> {
        self.private
            .to_pkcs8_pem(LineEnding::LF)
            .map(|p| p.to_string())
            .map_err(|e| CryptoError::Key(e.to_string()))
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        let private =
            RsaPrivateKey::from_pkcs8_pem(pem).map_err(|e| CryptoError::Key(e.to_string()))?;
        Ok(KeyPair { private })
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeyPair(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey(RsaPublicKey);

impl PublicKey {
    pub fn to_pem(&self) -> Result<String, CryptoError> {
        self.0
            .to_public_key_pem(LineEnding::LF)
            .map_err(|e| CryptoError::Key(e.to_string()))
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        RsaPublicKey::from_public_key_pem(pem)
            .map(PublicKey)
            .map_err(|e| CryptoError::Key(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Sym,
    Asym,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherEnvelope {
    pub scheme: Scheme,
    /// Present for `Sym` only.
    pub iv: Option<Vec<u8>>,
    pub ct: Vec<u8>,
    pub sig: Option<Vec<u8>>,
}

impl CipherEnvelope {
    /// Wire bytes: `iv || ct` for symmetric envelopes, `ct` otherwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IV_LEN + self.ct.len());
        if let Some(iv) = &self.iv {
            out.extend_from_slice(iv);
        }
        out.extend_from_slice(&self.ct);
        out
    }

    pub fn from_bytes(scheme: Scheme, bytes: &[u8]) -> Result<Self, CryptoError> {
        match scheme {
            Scheme::Sym => {
                if bytes.len() < IV_LEN {
                    return Err(CryptoError::Malformed("missing iv"));
                }
                let (iv, ct) = bytes.split_at(IV_LEN);
                Ok(CipherEnvelope {
                    scheme,
                    iv: Some(iv.to_vec()),
                    ct: ct.to_vec(),
                    sig: None,
                })
            }
            Scheme::Asym => Ok(CipherEnvelope {
                scheme,
                iv: None,
                ct: bytes.to_vec(),
                sig: None,
            }),
        }
    }
}

fn ctr_apply(key: &[u8; SYM_KEY_LEN], iv: &[u8; IV_LEN], buf: &mut [u8]) {
    Aes128Ctr::new(key.into(), iv.into()).apply_keystream(buf);
}

pub fn sym_seal<R: RngCore + CryptoRng>(rng: &mut R, k: &SymKey, plaintext: &[u8]) -> CipherEnvelope {
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    let mut ct = plaintext.to_vec();
    ctr_apply(&k.0, &iv, &mut ct);
    CipherEnvelope {
        scheme: Scheme::Sym,
        iv: Some(iv.to_vec()),
        ct,
        sig: None,
    }
}

pub fn sym_open(k: &SymKey, env: &CipherEnvelope) -> Result<Vec<u8>, CryptoError> {
    if env.scheme != Scheme::Sym {
        return Err(CryptoError::Malformed("not a symmetric envelope"));
    }
    let iv: [u8; IV_LEN] = env
        .iv
        .as_deref()
        .and_then(|iv| iv.try_into().ok())
        .ok_or(CryptoError::Malformed("iv must be 16 bytes"))?;
    let mut pt = env.ct.clone();
    ctr_apply(&k.0, &iv, &mut pt);
    Ok(pt)
}

/// Seal bytes in the symmetric wire layout (`iv || ct`).
pub fn sym_seal_bytes<R: RngCore + CryptoRng>(rng: &mut R, k: &SymKey, plaintext: &[u8]) -> Vec<u8> {
    sym_seal(rng, k, plaintext).to_bytes()
}

pub fn sym_open_bytes(k: &SymKey, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if bytes.len() < IV_LEN {
        return Err(CryptoError::Malformed("missing iv"));
    }
    let (iv, ct) = bytes.split_at(IV_LEN);
    let mut pt = ct.to_vec();
    ctr_apply(&k.0, iv.try_into().expect("split at IV_LEN"), &mut pt);
    Ok(pt)
}

pub fn asym_seal<R: RngCore + CryptoRng>(
    rng: &mut R,
    pk: &PublicKey,
    plaintext: &[u8],
) -> Result<CipherEnvelope, CryptoError> {
    let oaep = || Oaep::new::<Sha256>();
    let mut ct;
    if plaintext.len() <= OAEP_CAPACITY {
        ct = vec![MODE_DIRECT];
        ct.extend(
            pk.0.encrypt(rng, oaep(), plaintext)
                .map_err(|e| CryptoError::Key(e.to_string()))?,
        );
    } else {
        let one_shot = SymKey::generate(rng);
        ct = vec![MODE_HYBRID];
        ct.extend(
            pk.0.encrypt(rng, oaep(), &one_shot.0)
                .map_err(|e| CryptoError::Key(e.to_string()))?,
        );
        ct.extend(sym_seal_bytes(rng, &one_shot, plaintext));
    }
    Ok(CipherEnvelope {
        scheme: Scheme::Asym,
        iv: None,
        ct,
        sig: None,
    })
}

pub fn asym_open(kp: &KeyPair, env: &CipherEnvelope) -> Result<Vec<u8>, CryptoError> {
    if env.scheme != Scheme::Asym {
        return Err(CryptoError::Malformed("not an asymmetric envelope"));
    }
    let modulus = RSA_BITS / 8;
    let oaep = || Oaep::new::<Sha256>();
    match env.ct.split_first() {
        Some((&MODE_DIRECT, rest)) => kp.private.decrypt(oaep(), rest).map_err(|_| CryptoError::Auth),
        Some((&MODE_HYBRID, rest)) if rest.len() >= modulus + IV_LEN => {
            let (wrapped, body) = rest.split_at(modulus);
            let key = kp
                .private
                .decrypt(oaep(), wrapped)
                .map_err(|_| CryptoError::Auth)?;
            let key = SymKey::from_bytes(&key).map_err(|_| CryptoError::Auth)?;
            sym_open_bytes(&key, body).map_err(|_| CryptoError::Auth)
        }
        _ => Err(CryptoError::Auth),
    }
}

pub fn sign<R: RngCore + CryptoRng>(rng: &mut R, kp: &KeyPair, msg: &[u8]) -> Vec<u8> {
    SigningKey::<Sha256>::new(kp.private.clone())
        .sign_with_rng(rng, msg)
        .to_vec()
}

pub fn verify(pk: &PublicKey, msg: &[u8], sig: &[u8]) -> bool {
    let Ok(sig) = Signature::try_from(sig) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(pk.0.clone())
        .verify(msg, &sig)
        .is_ok()
}

fn signing_bytes(tag: &[u8], fields: &[&[u8]]) -> Vec<u8> {
    let mut out = tag.to_vec();
    for f in fields {
        out.extend_from_slice(&(f.len() as u32).to_be_bytes());
        out.extend_from_slice(f);
    }
    out
}

/// Bytes covered by a SUBREG signature: sub id, client id, reply address and
/// ciphertext, each length-prefixed, in that order.
pub fn subreg_signing_bytes(sub: &SubId, client: &ClientId, reply: &str, ct: &[u8]) -> Vec<u8> {
    signing_bytes(
        b"SUBREG",
        &[sub.as_str().as_bytes(), client.as_str().as_bytes(), reply.as_bytes(), ct],
    )
}

/// Bytes covered by one signature over a batch of SUBREG records: the record
/// count and a SHA-256 digest of each record's length-prefixed signing bytes.
/// `None` if any record is not a SUBREG.
pub fn subreg_batch_signing_bytes(batch: &[Record]) -> Option<Vec<u8>> {
    let mut h = Sha256::new();
    for r in batch {
        let Record::SubReg { sub, client, reply, ct, .. } = r else { return None };
        let b = subreg_signing_bytes(sub, client, reply, ct);
        h.update((b.len() as u32).to_be_bytes());
        h.update(&b);
    }
    let count = (batch.len() as u32).to_be_bytes();
    Some(signing_bytes(b"SUBREGBATCH", &[&count, &h.finalize()]))
}

pub fn unsub_signing_bytes(sub: &SubId) -> Vec<u8> {
    signing_bytes(b"UNSUB", &[sub.as_str().as_bytes()])
}

/// One wire record. Binary fields hold raw bytes; framing Base64-encodes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    SubReq {
        client: ClientId,
        reply: String,
        ct: Vec<u8>,
    },
    SubReg {
        sub: SubId,
        client: ClientId,
        reply: String,
        ct: Vec<u8>,
        sig: Vec<u8>,
    },
    Unsub {
        sub: SubId,
        sig: Vec<u8>,
    },
    Pub {
        id: PubId,
        hdr: Vec<u8>,
        payload: Vec<u8>,
    },
    Deliver {
        id: PubId,
        payload: Vec<u8>,
    },
    Ack {
        reference: String,
        msg: String,
    },
    Err {
        reference: String,
        msg: String,
    },
}

impl Record {
    pub fn type_tag(&self) -> &'static str {
        match self {
            Record::SubReq { .. } => "SUBREQ",
            Record::SubReg { .. } => "SUBREG",
            Record::Unsub { .. } => "UNSUB",
            Record::Pub { .. } => "PUB",
            Record::Deliver { .. } => "DELIVER",
            Record::Ack { .. } => "ACK",
            Record::Err { .. } => "ERR",
        }
    }

    pub fn ack(reference: impl Into<String>, msg: impl Into<String>) -> Self {
        Record::Ack {
            reference: reference.into(),
            msg: msg.into(),
        }
    }

    pub fn err(reference: impl Into<String>, msg: impl Into<String>) -> Self {
        Record::Err {
            reference: reference.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad frame field `{field}`: {reason}")]
pub struct FrameError {
    pub field: String,
    pub reason: String,
}

impl FrameError {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        FrameError {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Encode a record as one JSON line, without the trailing newline.
pub fn encode_frame(r: &Record) -> String {
    let mut m = Map::new();
    m.insert("t".into(), r.type_tag().into());
    let mut put = |k: &str, v: String| {
        m.insert(k.into(), Value::String(v));
    };
    match r {
        Record::SubReq { client, reply, ct } => {
            put("client", client.to_string());
            put("reply", reply.clone());
            put("ct", B64.encode(ct));
        }
        Record::SubReg {
            sub,
            client,
            reply,
            ct,
            sig,
        } => {
            put("sub", sub.to_string());
            put("client", client.to_string());
            put("reply", reply.clone());
            put("ct", B64.encode(ct));
            put("sig", B64.encode(sig));
        }
        Record::Unsub { sub, sig } => {
            put("sub", sub.to_string());
            put("sig", B64.encode(sig));
        }
        Record::Pub { id, hdr, payload } => {
            put("pub", id.to_string());
            put("hdr", B64.encode(hdr));
            put("payload", B64.encode(payload));
        }
        Record::Deliver { id, payload } => {
            put("pub", id.to_string());
            put("payload", B64.encode(payload));
        }
        Record::Ack { reference, msg } | Record::Err { reference, msg } => {
            put("ref", reference.clone());
            put("msg", msg.clone());
        }
    }
    Value::Object(m).to_string()
}

pub fn decode_frame(line: &str) -> Result<Record, FrameError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let v: Value =
        serde_json::from_str(line).map_err(|e| FrameError::new("frame", e.to_string()))?;
    let m = v
        .as_object()
        .ok_or_else(|| FrameError::new("frame", "not a JSON object"))?;
    let text = |k: &str| -> Result<String, FrameError> {
        m.get(k)
            .ok_or_else(|| FrameError::new(k, "missing"))?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| FrameError::new(k, "not a string"))
    };
    let bin = |k: &str| -> Result<Vec<u8>, FrameError> {
        B64.decode(text(k)?)
            .map_err(|e| FrameError::new(k, e.to_string()))
    };
    let client = || ClientId::new(text("client")?).map_err(|e| FrameError::new("client", e.to_string()));
    let sub = || SubId::new(text("sub")?).map_err(|e| FrameError::new("sub", e.to_string()));
    let pub_id = || PubId::new(text("pub")?).map_err(|e| FrameError::new("pub", e.to_string()));
    Ok(match text("t")?.as_str() {
        "SUBREQ" => Record::SubReq {
            client: client()?,
            reply: text("reply")?,
            ct: bin("ct")?,
        },
        "SUBREG" => Record::SubReg {
            sub: sub()?,
            client: client()?,
            reply: text("reply")?,
            ct: bin("ct")?,
            sig: bin("sig")?,
        },
        "UNSUB" => Record::Unsub {
            sub: sub()?,
            sig: bin("sig")?,
        },
        "PUB" => Record::Pub {
            id: pub_id()?,
            hdr: bin("hdr")?,
            payload: bin("payload")?,
        },
        "DELIVER" => Record::Deliver {
            id: pub_id()?,
            payload: bin("payload")?,
        },
        "ACK" => Record::Ack {
            reference: text("ref")?,
            msg: text("msg")?,
        },
        "ERR" => Record::Err {
            reference: text("ref")?,
            msg: text("msg")?,
        },
        other => return Err(FrameError::new("t", format!("unknown type {other:?}"))),
    })
}
