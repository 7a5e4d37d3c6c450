//! Publisher- and producer-side record construction.

use rand::{CryptoRng, RngCore};

use crate::envelope::{
    asym_open, sign, subreg_batch_signing_bytes, subreg_signing_bytes, sym_seal_bytes, unsub_signing_bytes, CipherEnvelope,
    CryptoError, KeyPair, PublicKey, Record, Scheme, SymKey,
};
use crate::model::{canonicalize, ClientId, ModelError, PubId, PublicationHeader, SubId, Subscription};
use crate::router::ProvisioningBlob;

/// Secrets held by the data publisher: its RSA key pair (clients encrypt to
/// it, registrations are signed with it) and the key shared with the router.
#[derive(Clone)]
pub struct PublisherSecrets {
    pub keys: KeyPair,
    pub sk: SymKey,
}

impl std::fmt::Debug for PublisherSecrets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PublisherSecrets(..)")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("not UTF-8")]
    Utf8,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PublisherSecrets {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, CryptoError> {
        Ok(PublisherSecrets {
            keys: KeyPair::generate(rng)?,
            sk: SymKey::generate(rng),
        })
    }

    pub fn public(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn provisioning_blob(&self, version: u64) -> ProvisioningBlob {
        ProvisioningBlob {
            sym_key: self.sk.clone(),
            verify_key: self.keys.public(),
            version,
        }
    }

    /// Open a client's sealed subscription and canonicalize it.
    pub fn open_request(&self, ct: &[u8]) -> Result<Subscription, OpenError> {
        let env = CipherEnvelope::from_bytes(Scheme::Asym, ct)?;
        let pt = asym_open(&self.keys, &env)?;
        let text = std::str::from_utf8(&pt).map_err(|_| OpenError::Utf8)?;
        let s = Subscription::parse(text)?;
        if s.is_empty() {
            return Err(OpenError::Model(ModelError::Parse {
                pos: 0,
                msg: "empty subscription".into(),
            }));
        }
        Ok(canonicalize(&s)?)
    }

    /// Seal `s` under the shared key and sign the registration.
    pub fn registration<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        sub: SubId,
        client: ClientId,
        reply: String,
        s: &Subscription,
    ) -> Record {
        let ct = sym_seal_bytes(rng, &self.sk, s.canonical_text().as_bytes());
        let sig = sign(rng, &self.keys, &subreg_signing_bytes(&sub, &client, &reply, &ct));
        Record::SubReg {
            sub,
            client,
            reply,
            ct,
            sig,
        }
    }

    /// Seal many subscriptions and sign them together; the records' own `sig`
    /// fields are left empty. See [`RouterHandle::ecall_register_batch`].
    ///
    /// [`RouterHandle::ecall_register_batch`]: crate::router::RouterHandle::ecall_register_batch
    pub fn registration_batch<'a, R, I>(&self, rng: &mut R, items: I) -> (Vec<Record>, Vec<u8>)
    where
        R: RngCore + CryptoRng,
        I: IntoIterator<Item = (SubId, ClientId, String, &'a Subscription)>,
    {
        let records: Vec<Record> = items
            .into_iter()
            .map(|(sub, client, reply, s)| Record::SubReg {
                sub,
                client,
                reply,
                ct: sym_seal_bytes(rng, &self.sk, s.canonical_text().as_bytes()),
                sig: Vec::new(),
            })
            .collect();
        let msg = subreg_batch_signing_bytes(&records).expect("all records are SUBREG");
        let sig = sign(rng, &self.keys, &msg);
        (records, sig)
    }

    pub fn invalidation<R: RngCore + CryptoRng>(&self, rng: &mut R, sub: SubId) -> Record {
        let sig = sign(rng, &self.keys, &unsub_signing_bytes(&sub));
        Record::Unsub { sub, sig }
    }
}

/// Client side: seal a subscription for the publisher.
pub fn subscription_request<R: RngCore + CryptoRng>(
    rng: &mut R,
    publisher: &PublicKey,
    client: ClientId,
    reply: String,
    s: &Subscription,
) -> Result<Record, CryptoError> {
    let env = crate::envelope::asym_seal(rng, publisher, s.canonical_text().as_bytes())?;
    Ok(Record::SubReq {
        client,
        reply,
        ct: env.to_bytes(),
    })
}

/// Producer side: seal the header, pass the payload through.
pub fn publication<R: RngCore + CryptoRng>(
    rng: &mut R,
    sk: &SymKey,
    id: PubId,
    header: &PublicationHeader,
    payload: Vec<u8>,
) -> Record {
    Record::Pub {
        id,
        hdr: sym_seal_bytes(rng, sk, header.canonical_text().as_bytes()),
        payload,
    }
}
