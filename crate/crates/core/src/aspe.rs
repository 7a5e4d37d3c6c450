//! Asymmetric scalar-product-preserving encryption baseline.
//!
//! A publication value `x` becomes `u = (x, 1, rho1, rho2)` and is sent as
//! `Mᵀu`; a bound `x > t` becomes `v = r(1, -t, 0, 0)` and is sent as `M⁻¹v`.
//! Then `(Mᵀu)·(M⁻¹v) = u·v = r(x - t)`, whose sign decides the comparison.
//! Equalities also carry hashed tokens checked against a Bloom filter first.
//!
//! Values reach 1e8, so products reach 1e16 and plain `f64` cancellation
//! would swamp the sign. Vectors, `M⁻¹` and dot products are kept in
//! double-double (about 106 significant bits).

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::model::{
    AttributeValue, Bound, ClientId, PublicationHeader, SubId, Subscription, Test,
};

pub const DIM: usize = 4;
pub const MAX_CONDITION: f64 = 1e4;
pub const BLOOM_BITS: usize = 256;
pub const BLOOM_HASHES: usize = 4;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> DD {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    DD { hi: s, lo: err }
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> DD {
    let s = a + b;
    DD { hi: s, lo: b - (s - a) }
}

#[inline]
fn two_prod(a: f64, b: f64) -> DD {
    let p = a * b;
    DD { hi: p, lo: a.mul_add(b, -p) }
}

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> DD {
        DD { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn add(self, o: DD) -> DD {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    #[inline]
    pub fn neg(self) -> DD {
        DD { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    pub fn sub(self, o: DD) -> DD {
        self.add(o.neg())
    }

    #[inline]
    pub fn mul(self, o: DD) -> DD {
        let p = two_prod(self.hi, o.hi);
        let lo = p.lo + (self.hi * o.lo + self.lo * o.hi);
        quick_two_sum(p.hi, lo)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

pub type Vec4 = [DD; DIM];

pub fn dot(a: &Vec4, b: &Vec4) -> DD {
    let mut acc = DD::ZERO;
    for i in 0..DIM {
        acc = acc.add(a[i].mul(b[i]));
    }
    acc
}

/// Key matrix `M` and its inverse.
#[derive(Debug, Clone)]
pub struct AspeKeyPair {
    m: [[f64; DIM]; DIM],
    m_inv: [[DD; DIM]; DIM],
}

fn condition_number(m: &[[f64; DIM]; DIM]) -> f64 {
    let mat = Matrix4::from_fn(|i, j| m[i][j]);
    let sv = mat.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn refine_inverse(m: &[[f64; DIM]; DIM], x0: [[f64; DIM]; DIM]) -> [[DD; DIM]; DIM] {
    let mut x = x0.map(|row| row.map(DD::from_f64));
    // Newton: X <- X + X(I - MX); each step roughly squares the error.
    for _ in 0..3 {
        let mut r = [[DD::ZERO; DIM]; DIM];
        for i in 0..DIM {
            for j in 0..DIM {
                let mut acc = DD::from_f64(if i == j { 1.0 } else { 0.0 });
                for k in 0..DIM {
                    acc = acc.sub(DD::from_f64(m[i][k]).mul(x[k][j]));
                }
                r[i][j] = acc;
            }
        }
        let mut next = x;
        for i in 0..DIM {
            for j in 0..DIM {
                let mut acc = x[i][j];
                for k in 0..DIM {
                    acc = acc.add(x[i][k].mul(r[k][j]));
                }
                next[i][j] = acc;
            }
        }
        x = next;
    }
    x
}

impl AspeKeyPair {
    /// Deterministic for a fixed seed. Draws entries uniformly from (-1, 1)
    /// until the matrix has condition number at most [`MAX_CONDITION`].
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        loop {
            let mut m = [[0.0; DIM]; DIM];
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            if condition_number(&m) > MAX_CONDITION {
                continue;
            }
            let Some(inv) = Matrix4::from_fn(|i, j| m[i][j]).try_inverse() else {
                continue;
            };
            let x0 = std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)]));
            return AspeKeyPair {
                m,
                m_inv: refine_inverse(&m, x0),
            };
        }
    }

    /// Test hook: `M = I`, so encrypted vectors equal their plaintexts.
    #[doc(hidden)]
    pub fn identity() -> Self {
        let m = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }));
        AspeKeyPair {
            m,
            m_inv: m.map(|row| row.map(DD::from_f64)),
        }
    }

    pub fn matrix(&self) -> [[f64; DIM]; DIM] {
        self.m
    }

    pub fn inverse(&self) -> [[f64; DIM]; DIM] {
        self.m_inv.map(|row| row.map(DD::to_f64))
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.m)
    }

    /// `Mᵀu`, exact products accumulated in double-double.
    pub fn encrypt_pub_vector(&self, u: &[f64; DIM]) -> Vec4 {
        std::array::from_fn(|i| {
            let mut acc = DD::ZERO;
            for (j, &uj) in u.iter().enumerate() {
                acc = acc.add(two_prod(self.m[j][i], uj));
            }
            acc
        })
    }

    /// `M⁻¹v` for a double-double `v`.
    pub fn encrypt_sub_vector(&self, v: &Vec4) -> Vec4 {
        std::array::from_fn(|i| {
            let mut acc = DD::ZERO;
            for (j, vj) in v.iter().enumerate() {
                acc = acc.add(self.m_inv[i][j].mul(*vj));
            }
            acc
        })
    }

    /// Test hook: `(Mᵀ)⁻¹ û`, recovering the plaintext publication vector.
    #[doc(hidden)]
    pub fn recover_pub_vector(&self, uhat: &Vec4) -> [f64; DIM] {
        std::array::from_fn(|i| {
            let mut acc = DD::ZERO;
            for (j, u) in uhat.iter().enumerate() {
                acc = acc.add(self.m_inv[j][i].mul(*u));
            }
            acc.to_f64()
        })
    }
}

pub type Token = [u8; 32];

/// `SHA-256(attr || 0x00 || canonical value)`.
pub fn token(attr: &str, value: &AttributeValue) -> Token {
    let mut h = Sha256::new();
    h.update(attr.as_bytes());
    h.update([0u8]);
    h.update(value.canonical().as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Bloom([u64; BLOOM_BITS / 64]);

impl Bloom {
    fn positions(t: &Token) -> impl Iterator<Item = usize> + '_ {
        t[..BLOOM_HASHES].iter().map(|&b| b as usize)
    }

    pub fn insert(&mut self, t: &Token) {
        for p in Self::positions(t) {
            self.0[p / 64] |= 1 << (p % 64);
        }
    }

    pub fn contains(&self, t: &Token) -> bool {
        Self::positions(t).all(|p| self.0[p / 64] & (1 << (p % 64)) != 0)
    }

    /// Expected false-positive rate after `n` insertions.
    pub fn expected_fp_rate(n: usize) -> f64 {
        let (k, m) = (BLOOM_HASHES as f64, BLOOM_BITS as f64);
        (1.0 - (-k * n as f64 / m).exp()).powf(k)
    }
}

#[derive(Debug, Clone)]
pub struct EncodedPublication {
    /// Numeric attributes with their encrypted vectors, sorted by name.
    vectors: Vec<(String, Vec4)>,
    bloom: Bloom,
    /// Tokens of every attribute, sorted, for exact text-equality checks.
    tokens: Vec<Token>,
}

impl EncodedPublication {
    pub fn vector(&self, attr: &str) -> Option<&Vec4> {
        self.vectors
            .binary_search_by(|(a, _)| a.as_str().cmp(attr))
            .ok()
            .map(|i| &self.vectors[i].1)
    }

    pub fn bloom(&self) -> &Bloom {
        &self.bloom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Gt,
    Lt,
}

#[derive(Debug, Clone)]
pub struct EncodedConstraint {
    pub attr: String,
    pub direction: Direction,
    pub strict: bool,
    pub vhat: Vec4,
}

#[derive(Debug, Clone, Default)]
pub struct EncodedSubscription {
    pub constraints: Vec<EncodedConstraint>,
    /// Tokens for every equality (text or numeric point), used by the prefilter.
    pub bloom_tokens: Vec<Token>,
    /// Text equalities, confirmed exactly against publication tokens.
    pub text_tokens: Vec<Token>,
    /// Attributes that must carry a number but are otherwise unconstrained.
    pub numeric_present: Vec<String>,
}

pub fn encrypt_pub<R: Rng>(k: &AspeKeyPair, rng: &mut R, h: &PublicationHeader) -> EncodedPublication {
    let mut bloom = Bloom::default();
    let mut tokens = Vec::with_capacity(h.len());
    let mut vectors = Vec::new();
    for (attr, value) in h.attrs() {
        let t = token(attr, value);
        bloom.insert(&t);
        tokens.push(t);
        if let AttributeValue::Number(x) = value {
            let u = [*x, 1.0, rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3)];
            vectors.push((attr.clone(), k.encrypt_pub_vector(&u)));
        }
    }
    tokens.sort_unstable();
    EncodedPublication {
        vectors,
        bloom,
        tokens,
    }
}

fn bound_vector<R: Rng>(k: &AspeKeyPair, rng: &mut R, dir: Direction, t: f64) -> Vec4 {
    let r: f64 = rng.gen_range(0.5..2.0);
    // x > t: r(1, -t, 0, 0); x < t: the negation.
    let s = match dir {
        Direction::Gt => r,
        Direction::Lt => -r,
    };
    let v = [DD::from_f64(s), two_prod(-s, t), DD::ZERO, DD::ZERO];
    k.encrypt_sub_vector(&v)
}

/// Encode a canonical subscription.
pub fn encrypt_sub<R: Rng>(k: &AspeKeyPair, rng: &mut R, s: &Subscription) -> EncodedSubscription {
    let mut out = EncodedSubscription::default();
    for c in s.constraints() {
        let attr = c.attr();
        match c.test() {
            Test::Equals(text) => {
                let t = token(attr, &AttributeValue::Text(text.clone()));
                out.bloom_tokens.push(t);
                out.text_tokens.push(t);
            }
            Test::Range(iv) => {
                if let Some(p) = iv.as_point() {
                    out.bloom_tokens.push(token(attr, &AttributeValue::Number(p)));
                }
                let bounds = [(Direction::Gt, iv.lo()), (Direction::Lt, iv.hi())];
                let before = out.constraints.len();
                for (dir, b) in bounds {
                    let (t, strict) = match b {
                        Bound::Unbounded => continue,
                        Bound::Inclusive(t) => (t, false),
                        Bound::Exclusive(t) => (t, true),
                    };
                    out.constraints.push(EncodedConstraint {
                        attr: attr.to_string(),
                        direction: dir,
                        strict,
                        vhat: bound_vector(k, rng, dir, t),
                    });
                }
                if out.constraints.len() == before {
                    out.numeric_present.push(attr.to_string());
                }
            }
        }
    }
    out
}

/// `false` only if some equality token is certainly absent.
pub fn prefilter(ep: &EncodedPublication, tokens: &[Token]) -> bool {
    tokens.iter().all(|t| ep.bloom.contains(t))
}

/// Sign test with the relative tolerance `1e-9 (1 + |d|)`.
#[inline]
fn passes(d: f64, strict: bool) -> bool {
    let eps = 1e-9 * (1.0 + d.abs());
    if strict {
        d > eps
    } else {
        d >= -eps
    }
}

pub fn aspe_match(ep: &EncodedPublication, es: &EncodedSubscription) -> bool {
    if !prefilter(ep, &es.bloom_tokens) {
        return false;
    }
    if !es
        .text_tokens
        .iter()
        .all(|t| ep.tokens.binary_search(t).is_ok())
    {
        return false;
    }
    if !es.numeric_present.iter().all(|a| ep.vector(a).is_some()) {
        return false;
    }
    es.constraints.iter().all(|c| match ep.vector(&c.attr) {
        Some(uhat) => passes(dot(uhat, &c.vhat).to_f64(), c.strict),
        None => false,
    })
}

/// Linear-scan matcher over encoded subscriptions.
#[derive(Debug, Default)]
pub struct AspeEngine {
    subs: Vec<(EncodedSubscription, ClientId, SubId)>,
}

impl AspeEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, es: EncodedSubscription, client: ClientId, sub: SubId) {
        self.subs.push((es, client, sub));
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn match_pub(&self, ep: &EncodedPublication) -> Vec<(ClientId, SubId)> {
        let mut out: Vec<(ClientId, SubId)> = self
            .subs
            .iter()
            .filter(|(es, _, _)| aspe_match(ep, es))
            .map(|(_, c, s)| (c.clone(), s.clone()))
            .collect();
        out.sort();
        out
    }

    pub fn count_matches(&self, ep: &EncodedPublication) -> usize {
        self.subs.iter().filter(|(es, _, _)| aspe_match(ep, es)).count()
    }

    /// Bytes held by stored subscriptions, counted like the containment index:
    /// struct sizes plus heap string and vector contents.
    pub fn footprint_bytes(&self) -> usize {
        use std::mem::size_of;
        self.subs
            .iter()
            .map(|(es, c, s)| {
                size_of::<(EncodedSubscription, ClientId, SubId)>()
                    + c.as_str().len()
                    + s.as_str().len()
                    + es.constraints
                        .iter()
                        .map(|k| size_of::<EncodedConstraint>() + k.attr.len())
                        .sum::<usize>()
                    + (es.bloom_tokens.len() + es.text_tokens.len()) * size_of::<Token>()
                    + es.numeric_present.iter().map(|a| size_of::<String>() + a.len()).sum::<usize>()
            })
            .sum()
    }
}
