use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_core::envelope::*;
use scbr_core::model::{ClientId, PubId, SubId};

fn keypair() -> &'static KeyPair {
    static K: OnceLock<KeyPair> = OnceLock::new();
    K.get_or_init(|| KeyPair::generate(&mut ChaCha20Rng::seed_from_u64(1)).unwrap())
}

fn id_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.:-]{1,20}"
}

fn record() -> impl Strategy<Value = Record> {
    let bytes = || prop::collection::vec(any::<u8>(), 0..300);
    prop_oneof![
        (id_strategy(), ".{0,30}", bytes()).prop_map(|(c, reply, ct)| Record::SubReq {
            client: ClientId::new(c).unwrap(),
            reply,
            ct
        }),
        (id_strategy(), id_strategy(), ".{0,30}", bytes(), bytes()).prop_map(|(s, c, reply, ct, sig)| {
            Record::SubReg {
                sub: SubId::new(s).unwrap(),
                client: ClientId::new(c).unwrap(),
                reply,
                ct,
                sig,
            }
        }),
        (id_strategy(), bytes()).prop_map(|(s, sig)| Record::Unsub { sub: SubId::new(s).unwrap(), sig }),
        (id_strategy(), bytes(), bytes()).prop_map(|(p, hdr, payload)| Record::Pub {
            id: PubId::new(p).unwrap(),
            hdr,
            payload
        }),
        (id_strategy(), bytes()).prop_map(|(p, payload)| Record::Deliver { id: PubId::new(p).unwrap(), payload }),
        (".{0,20}", ".{0,40}").prop_map(|(r, m)| Record::ack(r, m)),
        (".{0,20}", ".{0,40}").prop_map(|(r, m)| Record::err(r, m)),
    ]
}

proptest! {
    #[test]
    fn sym_seal_open_inverse(data in prop::collection::vec(any::<u8>(), 0..4096), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = SymKey::generate(&mut rng);
        let env = sym_seal(&mut rng, &k, &data);
        prop_assert_eq!(env.ct.len(), data.len());
        prop_assert_eq!(sym_open(&k, &env).unwrap(), data.clone());
        prop_assert_eq!(sym_open_bytes(&k, &env.to_bytes()).unwrap(), data);
    }

    #[test]
    fn frame_round_trip(r in record()) {
        let line = encode_frame(&r);
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(decode_frame(&line).unwrap(), r);
    }

    #[test]
    fn decode_never_panics(line in ".{0,200}") {
        let _ = decode_frame(&line);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn asym_seal_open_inverse(data in prop::collection::vec(any::<u8>(), 0..2048), seed in any::<u64>()) {
        let kp = keypair();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let env = asym_seal(&mut rng, &kp.public(), &data).unwrap();
        prop_assert_eq!(asym_open(kp, &env).unwrap(), data);
    }
}

#[test]
fn one_megabyte_round_trips() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let data: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
    let k = SymKey::generate(&mut rng);
    assert_eq!(sym_open(&k, &sym_seal(&mut rng, &k, &data)).unwrap(), data);
    let kp = keypair();
    assert_eq!(asym_open(kp, &asym_seal(&mut rng, &kp.public(), &data).unwrap()).unwrap(), data);
    let frame = Record::Deliver {
        id: PubId::new("p").unwrap(),
        payload: data.clone(),
    };
    assert_eq!(decode_frame(&encode_frame(&frame)).unwrap(), frame);
}

#[test]
fn signature_binds_every_field() {
    let kp = keypair();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let (s, c) = (SubId::new("s1").unwrap(), ClientId::new("c1").unwrap());
    let sig = sign(&mut rng, kp, &subreg_signing_bytes(&s, &c, "addr", b"ct"));
    let pk = kp.public();
    assert!(verify(&pk, &subreg_signing_bytes(&s, &c, "addr", b"ct"), &sig));
    let s2 = SubId::new("s2").unwrap();
    let c2 = ClientId::new("c2").unwrap();
    assert!(!verify(&pk, &subreg_signing_bytes(&s2, &c, "addr", b"ct"), &sig));
    assert!(!verify(&pk, &subreg_signing_bytes(&s, &c2, "addr", b"ct"), &sig));
    assert!(!verify(&pk, &subreg_signing_bytes(&s, &c, "addr2", b"ct"), &sig));
    assert!(!verify(&pk, &subreg_signing_bytes(&s, &c, "addr", b"cu"), &sig));
    // Swapping client and sub ids also breaks it.
    let swapped = subreg_signing_bytes(&SubId::new("c1").unwrap(), &ClientId::new("s1").unwrap(), "addr", b"ct");
    assert!(!verify(&pk, &swapped, &sig));
}
