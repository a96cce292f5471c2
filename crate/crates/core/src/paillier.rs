//! Paillier encryption with `g = n + 1`, a fixed-point codec, and PLDA
//! comparison against an encrypted reference.

use std::cell::Cell;
use std::io::{BufRead, Read, Write};

use nalgebra::DVector;
use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{expect_magic, read_u32, read_u64, write_u32, HETP_MAGIC, VERSION};
use crate::plda::ScoringForm;
use crate::rng;

pub const DEFAULT_KEY_BITS: usize = 3072;
pub const DEFAULT_SCALE_BITS: u32 = 24;
const MR_ROUNDS: usize = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub encryptions: u64,
    pub additions: u64,
    pub scalar_muls: u64,
    pub decryptions: u64,
}

thread_local! {
    static OPS: Cell<OpCounts> = const { Cell::new(OpCounts { encryptions: 0, additions: 0, scalar_muls: 0, decryptions: 0 }) };
}

fn count(f: impl FnOnce(&mut OpCounts)) {
    OPS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Operations performed on this thread since the last reset.
pub fn op_counts() -> OpCounts {
    OPS.with(|c| c.get())
}

pub fn reset_op_counts() {
    OPS.with(|c| c.set(OpCounts::default()));
}

fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bits = bound.bits() as usize;
    let mut bytes = vec![0u8; bits.div_ceil(8)];
    let excess = bytes.len() * 8 - bits;
    loop {
        rng.fill_bytes(&mut bytes);
        bytes[0] &= 0xff >> excess;
        let v = BigUint::from_bytes_be(&bytes);
        if &v < bound {
            return v;
        }
    }
}

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251,
];

/// Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n1 = n - 1u32;
    let r = n1.trailing_zeros().expect("n > 2 so n − 1 > 0");
    let d = &n1 >> r;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n1 {
            continue;
        }
        for _ in 1..r {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits with the top two bits set.
fn random_prime<R: RngCore + ?Sized>(bits: usize, rng: &mut R) -> Result<BigUint> {
    let attempts = 200 * bits;
    let mut bytes = vec![0u8; bits.div_ceil(8)];
    let excess = bytes.len() * 8 - bits;
    for _ in 0..attempts {
        rng.fill_bytes(&mut bytes);
        bytes[0] &= 0xff >> excess;
        let mut c = BigUint::from_bytes_be(&bytes);
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MR_ROUNDS, rng) {
            return Ok(c);
        }
    }
    Err(Error::PrimeGeneration(attempts))
}

fn digest_id(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_sq: BigUint,
    g: BigUint,
    id: u64,
}

impl PublicKey {
    fn new(n: BigUint) -> Self {
        let id = digest_id(&[b"paillier", &n.to_bytes_be()]);
        Self {
            n_sq: &n * &n,
            g: &n + 1u32,
            n,
            id,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_sq
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_bits(&self) -> usize {
        self.n.bits() as usize
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_id != self.id {
            return Err(Error::KeyMismatch {
                expected: self.id,
                found: c.key_id,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
}

impl Keypair {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn key_bits(&self) -> usize {
        self.public.key_bits()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: u64,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

/// Deterministic keypair for `seed`; the modulus has exactly `key_bits` bits.
pub fn keygen(key_bits: usize, seed: u64) -> Result<Keypair> {
    if key_bits < 64 {
        return Err(Error::Config(format!("key size {key_bits} below the 64-bit minimum")));
    }
    let mut rng = rng::stream(seed, "paillier-keygen", key_bits as u64);
    let (pb, qb) = (key_bits / 2, key_bits - key_bits / 2);
    for _ in 0..16 {
        let p = random_prime(pb, &mut rng)?;
        let q = random_prime(qb, &mut rng)?;
        if p == q {
            continue;
        }
        let kp = from_primes(&p, &q)?;
        debug_assert_eq!(kp.key_bits(), key_bits);
        return Ok(kp);
    }
    Err(Error::PrimeGeneration(16))
}

/// Keypair from explicit primes. Intended for tests with toy parameters.
pub fn from_primes(p: &BigUint, q: &BigUint) -> Result<Keypair> {
    let two = BigUint::from(2u32);
    if p == q || p <= &two || q <= &two {
        return Err(Error::Config("Paillier needs two distinct odd primes".into()));
    }
    let n = p * q;
    let phi = (p - 1u32) * (q - 1u32);
    if !n.gcd(&phi).is_one() {
        return Err(Error::Config("gcd(n, φ(n)) ≠ 1".into()));
    }
    let lambda = (p - 1u32).lcm(&(q - 1u32));
    let mu = (&lambda % &n)
        .modinv(&n)
        .ok_or_else(|| Error::Config("λ not invertible modulo n".into()))?;
    Ok(Keypair {
        public: PublicKey::new(n),
        lambda,
        mu,
    })
}

/// `E(m) = (1 + m·n)·r^n mod n²` for a caller-supplied nonce `r ∈ Z*_n`.
pub fn encrypt_with_nonce(pk: &PublicKey, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
    if m >= &pk.n {
        return Err(Error::PlaintextOutOfRange);
    }
    if r.is_zero() || r >= &pk.n || !r.gcd(&pk.n).is_one() {
        return Err(Error::Config("nonce must be a unit modulo n".into()));
    }
    count(|c| c.encryptions += 1);
    let gm = (m * &pk.n + 1u32) % &pk.n_sq;
    let value = gm * r.modpow(&pk.n, &pk.n_sq) % &pk.n_sq;
    Ok(Ciphertext { value, key_id: pk.id })
}

pub fn encrypt<R: RngCore + ?Sized>(pk: &PublicKey, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
    loop {
        let r = random_below(&pk.n, rng);
        if !r.is_zero() && r.gcd(&pk.n).is_one() {
            return encrypt_with_nonce(pk, m, &r);
        }
    }
}

pub fn decrypt(kp: &Keypair, c: &Ciphertext) -> Result<BigUint> {
    let pk = &kp.public;
    pk.check(c)?;
    if c.value >= pk.n_sq {
        return Err(Error::Format("ciphertext not reduced modulo n²".into()));
    }
    count(|o| o.decryptions += 1);
    let u = c.value.modpow(&kp.lambda, &pk.n_sq);
    let l = (u - 1u32) / &pk.n;
    Ok(l * &kp.mu % &pk.n)
}

pub fn hom_add(pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    pk.check(a)?;
    pk.check(b)?;
    count(|c| c.additions += 1);
    Ok(Ciphertext {
        value: &a.value * &b.value % &pk.n_sq,
        key_id: pk.id,
    })
}

/// `E(k·a mod n)`; negative `k` goes through the ciphertext inverse so the
/// exponent stays short.
pub fn hom_scalar_mul(pk: &PublicKey, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext> {
    pk.check(c)?;
    count(|o| o.scalar_muls += 1);
    let (base, exp) = if k.is_negative() {
        let inv = c
            .value
            .modinv(&pk.n_sq)
            .ok_or_else(|| Error::Protocol("ciphertext not invertible modulo n²".into()))?;
        (inv, k.magnitude().clone())
    } else {
        (c.value.clone(), k.magnitude().clone())
    };
    Ok(Ciphertext {
        value: base.modpow(&exp, &pk.n_sq),
        key_id: pk.id,
    })
}

/// Signed fixed-point value embedded in `[0, n)`; raws above `n/2` are negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPoint {
    pub raw: BigUint,
    pub scale_bits: u32,
}

/// `round(x·2^s)` as a signed integer.
pub fn quantize(x: f64, scale_bits: u32) -> Result<BigInt> {
    if !x.is_finite() {
        return Err(Error::Overflow(format!("non-finite value {x}")));
    }
    let scaled = (x * 2f64.powi(scale_bits as i32)).round();
    BigInt::from_f64(scaled).ok_or_else(|| Error::Overflow(format!("{x} at scale {scale_bits}")))
}

/// Maps a signed integer into `[0, n)`, refusing magnitudes of `n/2` or more.
pub fn embed(v: &BigInt, n: &BigUint) -> Result<BigUint> {
    let half = n >> 1;
    if v.magnitude() >= &half {
        return Err(Error::Overflow(format!("magnitude {} bits exceeds n/2", v.bits())));
    }
    Ok(match v.sign() {
        Sign::Minus => n - v.magnitude(),
        _ => v.magnitude().clone(),
    })
}

/// Inverse of [`embed`].
pub fn lift(raw: &BigUint, n: &BigUint) -> BigInt {
    if raw > &(n >> 1) {
        -BigInt::from(n - raw)
    } else {
        BigInt::from(raw.clone())
    }
}

pub fn encode(x: f64, scale_bits: u32, n: &BigUint) -> Result<FixedPoint> {
    Ok(FixedPoint {
        raw: embed(&quantize(x, scale_bits)?, n)?,
        scale_bits,
    })
}

pub fn decode(fp: &FixedPoint, n: &BigUint) -> f64 {
    decode_raw(&fp.raw, fp.scale_bits, n)
}

pub fn decode_raw(raw: &BigUint, scale_bits: u32, n: &BigUint) -> f64 {
    let v = lift(raw, n).to_f64().unwrap_or(f64::NAN);
    v / 2f64.powi(scale_bits as i32)
}

/// Encrypted reference for one scoring form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectedTemplate {
    pub key_id: u64,
    pub form_id: u64,
    pub scale_bits: u32,
    /// Reference coordinates at scale `s`.
    pub enc_x: Vec<Ciphertext>,
    /// `x_refᵀQx_ref + cᵀx_ref` at scale `2s`.
    pub enc_self_quad: Ciphertext,
}

impl ProtectedTemplate {
    pub fn dim(&self) -> usize {
        self.enc_x.len()
    }
}

fn frob(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.norm()
}

/// Bound on `|score(x, x')|` when both sides have norm at most `r`. For
/// vectors of different norms the score is bounded by the larger of the two
/// single-norm bounds.
fn score_bound(form: &ScoringForm, r: f64) -> f64 {
    2.0 * (frob(&form.q) + frob(&form.p)) * r * r + 2.0 * form.c.norm() * r + form.k0.abs()
}

fn check_headroom(form: &ScoringForm, r: f64, scale_bits: u32, n: &BigUint) -> Result<()> {
    let bound = score_bound(form, r) + 1.0;
    // every term and partial sum stays below n/2 at scale 2s
    let needed = bound.log2().max(0.0) + 2.0 * scale_bits as f64 + 2.0 + (form.dim() as f64).log2();
    if needed >= n.bits() as f64 - 1.0 {
        return Err(Error::Overflow(format!(
            "score bound {bound:.3e} at scale 2·{scale_bits} needs {needed:.0} bits, modulus has {}",
            n.bits()
        )));
    }
    Ok(())
}

pub fn protect_reference<R: RngCore + ?Sized>(
    pk: &PublicKey,
    form: &ScoringForm,
    x_ref: &DVector<f64>,
    scale_bits: u32,
    rng: &mut R,
) -> Result<ProtectedTemplate> {
    if x_ref.len() != form.dim() {
        return Err(Error::dim(form.dim(), x_ref.len(), "reference dimension"));
    }
    check_headroom(form, x_ref.norm(), scale_bits, &pk.n)?;
    let enc_x = x_ref
        .iter()
        .map(|&v| encrypt(pk, &encode(v, scale_bits, &pk.n)?.raw, rng))
        .collect::<Result<Vec<_>>>()?;
    let self_quad = encode(form.self_term(x_ref), 2 * scale_bits, &pk.n)?;
    Ok(ProtectedTemplate {
        key_id: pk.id,
        form_id: form.id(),
        scale_bits,
        enc_x,
        enc_self_quad: encrypt(pk, &self_quad.raw, rng)?,
    })
}

/// Encrypted PLDA LLR at scale `2s`: `D` scalar multiplications, `D + 1`
/// additions and one encryption.
pub fn he_plda_score<R: RngCore + ?Sized>(
    pk: &PublicKey,
    form: &ScoringForm,
    template: &ProtectedTemplate,
    x_probe: &DVector<f64>,
    scale_bits: u32,
    rng: &mut R,
) -> Result<Ciphertext> {
    if template.key_id != pk.id {
        return Err(Error::KeyMismatch {
            expected: pk.id,
            found: template.key_id,
        });
    }
    if template.form_id != form.id() {
        return Err(Error::FormMismatch {
            expected: form.id(),
            found: template.form_id,
        });
    }
    if template.scale_bits != scale_bits {
        return Err(Error::Config(format!(
            "template scale {} differs from requested {scale_bits}",
            template.scale_bits
        )));
    }
    let d = form.dim();
    if template.dim() != d || x_probe.len() != d {
        return Err(Error::dim(d, x_probe.len(), "probe dimension"));
    }
    check_headroom(form, x_probe.norm(), scale_bits, &pk.n)?;
    let probe_term = form.self_term(x_probe) + form.k0;
    let px2 = &form.p * x_probe * 2.0;
    let mut acc = hom_add(
        pk,
        &template.enc_self_quad,
        &encrypt(pk, &encode(probe_term, 2 * scale_bits, &pk.n)?.raw, rng)?,
    )?;
    for (enc, &w) in template.enc_x.iter().zip(px2.iter()) {
        let term = hom_scalar_mul(pk, enc, &quantize(w, scale_bits)?)?;
        acc = hom_add(pk, &acc, &term)?;
    }
    Ok(acc)
}

/// Decrypts and decodes an LLR produced by [`he_plda_score`].
pub fn decrypt_score(kp: &Keypair, c: &Ciphertext, scale_bits: u32) -> Result<f64> {
    Ok(decode_raw(&decrypt(kp, c)?, 2 * scale_bits, &kp.public.n))
}

/// Worst-case decoding error of [`he_plda_score`] for a given probe.
pub fn score_tolerance(form: &ScoringForm, x_probe: &DVector<f64>, scale_bits: u32) -> f64 {
    let s = scale_bits as i32;
    let l1 = (&form.p * x_probe * 2.0).lp_norm(1);
    form.dim() as f64 * 2f64.powi(-s) * (l1 + 1.0) + 2f64.powi(-2 * s + 1)
}

const KEY_HEADER: &str = "paillier-key 1";

fn write_fields<W: Write>(w: &mut W, kind: &str, fields: &[(&str, String)]) -> Result<()> {
    writeln!(w, "{KEY_HEADER}")?;
    writeln!(w, "kind {kind}")?;
    for (k, v) in fields {
        writeln!(w, "{k} {v}")?;
    }
    Ok(())
}

pub fn write_public_key<W: Write>(w: &mut W, pk: &PublicKey) -> Result<()> {
    write_fields(
        w,
        "public",
        &[
            ("key_bits", pk.key_bits().to_string()),
            ("n", pk.n.to_string()),
            ("g", pk.g.to_string()),
        ],
    )
}

pub fn write_keypair<W: Write>(w: &mut W, kp: &Keypair) -> Result<()> {
    let pk = &kp.public;
    write_fields(
        w,
        "private",
        &[
            ("key_bits", pk.key_bits().to_string()),
            ("n", pk.n.to_string()),
            ("g", pk.g.to_string()),
            ("lambda", kp.lambda.to_string()),
            ("mu", kp.mu.to_string()),
        ],
    )
}

fn read_fields<R: BufRead>(r: &mut R) -> Result<std::collections::HashMap<String, String>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(l)) if l.trim() == KEY_HEADER => {}
        _ => return Err(Error::Format("not a Paillier key file".into())),
    }
    let mut out = std::collections::HashMap::new();
    for l in lines {
        let l = l?;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = l
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad key line {l:?}")))?;
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn big_field(fields: &std::collections::HashMap<String, String>, k: &str) -> Result<BigUint> {
    fields
        .get(k)
        .ok_or_else(|| Error::Format(format!("missing key field {k}")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad integer in key field {k}")))
}

fn public_from(fields: &std::collections::HashMap<String, String>) -> Result<PublicKey> {
    let n = big_field(fields, "n")?;
    let pk = PublicKey::new(n);
    if big_field(fields, "g")? != pk.g {
        return Err(Error::Format("only g = n + 1 is supported".into()));
    }
    if let Some(b) = fields.get("key_bits") {
        if b.parse::<usize>().ok() != Some(pk.key_bits()) {
            return Err(Error::Format("key_bits does not match modulus".into()));
        }
    }
    Ok(pk)
}

/// Reads the public part of either key file kind.
pub fn read_public_key<R: BufRead>(r: &mut R) -> Result<PublicKey> {
    public_from(&read_fields(r)?)
}

pub fn read_keypair<R: BufRead>(r: &mut R) -> Result<Keypair> {
    let fields = read_fields(r)?;
    if fields.get("kind").map(String::as_str) != Some("private") {
        return Err(Error::Format("key file holds no private key".into()));
    }
    let public = public_from(&fields)?;
    let lambda = big_field(&fields, "lambda")?;
    let mu = big_field(&fields, "mu")?;
    if (&lambda % &public.n).modinv(&public.n).as_ref() != Some(&mu) {
        return Err(Error::Format("μ is not λ⁻¹ mod n".into()));
    }
    Ok(Keypair { public, lambda, mu })
}

fn write_big<W: Write>(w: &mut W, v: &BigUint) -> Result<()> {
    let bytes = v.to_bytes_be();
    write_u32(w, bytes.len())?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_big<R: Read>(r: &mut R, limit: usize) -> Result<BigUint> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(Error::FrameTooLarge(len));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Ok(BigUint::from_bytes_be(&bytes))
}

const MAX_CIPHERTEXT_BYTES: usize = 1 << 16;

impl ProtectedTemplate {
    /// `HETP`, version, key id, form id, D, scale, then `D + 1` ciphertexts
    /// (coordinates first, self term last) as length-prefixed big-endian bytes.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&HETP_MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&self.key_id.to_be_bytes())?;
        w.write_all(&self.form_id.to_be_bytes())?;
        write_u32(w, self.dim())?;
        write_u32(w, self.scale_bits as usize)?;
        for c in self.enc_x.iter().chain(std::iter::once(&self.enc_self_quad)) {
            write_big(w, &c.value)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, HETP_MAGIC)?;
        let key_id = read_u64(r)?;
        let form_id = read_u64(r)?;
        let d = read_u32(r)? as usize;
        let scale_bits = read_u32(r)?;
        let mut cts = (0..=d)
            .map(|_| {
                Ok(Ciphertext {
                    value: read_big(r, MAX_CIPHERTEXT_BYTES)?,
                    key_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_self_quad = cts.pop().expect("d + 1 ciphertexts read");
        Ok(Self {
            key_id,
            form_id,
            scale_bits,
            enc_x: cts,
            enc_self_quad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_spd;
    use crate::plda::{plda_score, scoring_form, PldaModel};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn key512() -> &'static Keypair {
        static K: OnceLock<Keypair> = OnceLock::new();
        K.get_or_init(|| keygen(512, 7).unwrap())
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn modpow_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
        let mut acc = 1;
        b %= m;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % m;
            }
            b = b * b % m;
            e >>= 1;
        }
        acc
    }

    #[test]
    fn toy_key_matches_textbook_arithmetic() {
        let kp = from_primes(&big(5), &big(7)).unwrap();
        assert_eq!(kp.public.n(), &big(35));
        assert_eq!(kp.lambda(), &big(12));
        assert_eq!(kp.mu(), &big(3));
        let (n, n2) = (35u64, 1225u64);
        for m in 0..n {
            for r in (1..n).filter(|r| r % 5 != 0 && r % 7 != 0) {
                let c = encrypt_with_nonce(&kp.public, &big(m), &big(r)).unwrap();
                let textbook = modpow_u64(n + 1, m, n2) * modpow_u64(r, n, n2) % n2;
                assert_eq!(c.value(), &big(textbook));
                let u = modpow_u64(textbook, 12, n2);
                let ug = modpow_u64(n + 1, 12, n2);
                // L(c^λ)/L(g^λ) mod n by brute-force division
                let (lc, lg) = ((u - 1) / n, (ug - 1) / n);
                let inv = (1..n).find(|i| lg * i % n == 1).unwrap();
                assert_eq!(decrypt(&kp, &c).unwrap(), big(lc * inv % n));
                assert_eq!(decrypt(&kp, &c).unwrap(), big(m));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = encrypt(&kp.public, &big(12), &mut rng).unwrap();
        assert_eq!(decrypt(&kp, &c).unwrap(), big(12));
    }

    #[test]
    fn keygen_sizes_and_determinism() {
        let kp = key512();
        assert_eq!(kp.key_bits(), 512);
        assert_eq!(kp.public.g(), &(kp.public.n() + 1u32));
        let a = keygen(96, 3).unwrap();
        assert_eq!(a, keygen(96, 3).unwrap());
        assert_ne!(a.public.n(), keygen(96, 4).unwrap().public.n());
        assert_eq!(keygen(97, 3).unwrap().key_bits(), 97);
        assert!(keygen(32, 1).is_err());
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in 0u64..3000 {
            let prime = v >= 2 && (2..).take_while(|d| d * d <= v).all(|d| v % d != 0);
            assert_eq!(is_probable_prime(&big(v), 20, &mut rng), prime, "{v}");
        }
        // Carmichael numbers
        for v in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&big(v), 20, &mut rng));
        }
        assert!(is_probable_prime(&((BigUint::one() << 127) - 1u32), 20, &mut rng));
    }

    #[test]
    fn boundary_plaintexts() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n1 = kp.public.n() - 1u32;
        for m in [BigUint::zero(), n1.clone()] {
            let c = encrypt(&kp.public, &m, &mut rng).unwrap();
            assert_eq!(decrypt(kp, &c).unwrap(), m);
        }
        assert!(matches!(
            encrypt(&kp.public, kp.public.n(), &mut rng),
            Err(Error::PlaintextOutOfRange)
        ));
    }

    #[test]
    fn encryption_is_randomised() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = encrypt(&kp.public, &big(5), &mut rng).unwrap();
        let b = encrypt(&kp.public, &big(5), &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn homomorphic_examples() {
        let kp = key512();
        let pk = &kp.public;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = encrypt(pk, &big(3), &mut rng).unwrap();
        let b = encrypt(pk, &big(4), &mut rng).unwrap();
        assert_eq!(decrypt(kp, &hom_add(pk, &a, &b).unwrap()).unwrap(), big(7));
        assert_eq!(decrypt(kp, &hom_scalar_mul(pk, &a, &BigInt::zero()).unwrap()).unwrap(), big(0));
        let neg = hom_scalar_mul(pk, &a, &BigInt::from(-2)).unwrap();
        assert_eq!(decrypt(kp, &neg).unwrap(), pk.n() - 6u32);

        let other = keygen(128, 9).unwrap();
        let c = encrypt(&other.public, &big(1), &mut rng).unwrap();
        assert!(matches!(hom_add(pk, &a, &c), Err(Error::KeyMismatch { .. })));
        assert!(matches!(decrypt(kp, &c), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn codec_examples() {
        let n = key512().public.n();
        assert_eq!(encode(0.0, 24, n).unwrap().raw, BigUint::zero());
        assert_eq!(encode(-1.0, 4, n).unwrap().raw, n - 16u32);
        assert_eq!(decode(&encode(-1.0, 4, n).unwrap(), n), -1.0);
        assert_eq!(decode(&encode(0.3, 4, n).unwrap(), n), 5.0 / 16.0);
        let small = big(1000);
        assert!(matches!(encode(40.0, 4, &small), Err(Error::Overflow(_))));
        assert!(encode(f64::NAN, 4, n).is_err());
    }

    fn unit_form() -> ScoringForm {
        let m = PldaModel::new(DVector::zeros(1), DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        scoring_form(&m).unwrap()
    }

    #[test]
    fn scalar_model_encrypted_constant() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = unit_form();
        let zero = DVector::zeros(1);
        let t = protect_reference(&kp.public, &f, &zero, 24, &mut rng).unwrap();
        assert_eq!(decrypt(kp, &t.enc_self_quad).unwrap(), BigUint::zero());
        let c = he_plda_score(&kp.public, &f, &t, &zero, 24, &mut rng).unwrap();
        let got = decrypt_score(kp, &c, 24).unwrap();
        let eps = score_tolerance(&f, &zero, 24);
        assert!((got - 0.5 * (4.0f64 / 3.0).ln()).abs() <= eps);
    }

    #[test]
    fn zero_form_decrypts_to_zero() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = ScoringForm::zeros(3);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let t = protect_reference(&kp.public, &f, &x, 24, &mut rng).unwrap();
        let c = he_plda_score(&kp.public, &f, &t, &x, 24, &mut rng).unwrap();
        assert_eq!(decrypt_score(kp, &c, 24).unwrap(), 0.0);
    }

    #[test]
    fn template_reproduces_encoded_reference() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = unit_form();
        let x = DVector::from_vec(vec![-0.625]);
        let t = protect_reference(&kp.public, &f, &x, 24, &mut rng).unwrap();
        assert_eq!(decrypt(kp, &t.enc_x[0]).unwrap(), encode(-0.625, 24, kp.public.n()).unwrap().raw);
    }

    fn random_form(d: usize, rng: &mut ChaCha8Rng) -> ScoringForm {
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-0.2..0.2));
        let m = PldaModel::new(mean, random_spd(d, 0.1, rng), random_spd(d, 0.1, rng)).unwrap();
        scoring_form(&m).unwrap()
    }

    fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        v.normalize()
    }

    #[test]
    fn encrypted_scores_track_plaintext_with_exact_op_counts() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [1, 4, 16] {
            let f = random_form(d, &mut rng);
            let (a, b) = (unit_vector(d, &mut rng), unit_vector(d, &mut rng));
            let t = protect_reference(&kp.public, &f, &a, 24, &mut rng).unwrap();
            reset_op_counts();
            let c = he_plda_score(&kp.public, &f, &t, &b, 24, &mut rng).unwrap();
            let ops = op_counts();
            assert_eq!(
                ops,
                OpCounts {
                    encryptions: 1,
                    additions: d as u64 + 1,
                    scalar_muls: d as u64,
                    decryptions: 0
                }
            );
            let got = decrypt_score(kp, &c, 24).unwrap();
            let want = plda_score(&f, &a, &b).unwrap();
            assert!((got - want).abs() <= score_tolerance(&f, &b, 24), "d={d}: {got} vs {want}");
        }
    }

    #[test]
    fn mismatched_form_or_key_rejected() {
        let kp = key512();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_form(2, &mut rng);
        let g = random_form(2, &mut rng);
        let x = unit_vector(2, &mut rng);
        let t = protect_reference(&kp.public, &f, &x, 24, &mut rng).unwrap();
        assert!(matches!(
            he_plda_score(&kp.public, &g, &t, &x, 24, &mut rng),
            Err(Error::FormMismatch { .. })
        ));
        let other = keygen(512, 99).unwrap();
        assert!(matches!(
            he_plda_score(&other.public, &f, &t, &x, 24, &mut rng),
            Err(Error::KeyMismatch { .. })
        ));
        assert!(he_plda_score(&kp.public, &f, &t, &x, 20, &mut rng).is_err());
    }

    #[test]
    fn headroom_violation_detected() {
        let kp = keygen(128, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = unit_form();
        let x = DVector::from_vec(vec![1e6]);
        assert!(matches!(
            protect_reference(&kp.public, &f, &x, 48, &mut rng),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn key_files_roundtrip() {
        let kp = keygen(128, 5).unwrap();
        let mut buf = Vec::new();
        write_keypair(&mut buf, &kp).unwrap();
        assert_eq!(read_keypair(&mut buf.as_slice()).unwrap(), kp);
        assert_eq!(read_public_key(&mut buf.as_slice()).unwrap(), kp.public);
        let mut pubbuf = Vec::new();
        write_public_key(&mut pubbuf, &kp.public).unwrap();
        assert!(String::from_utf8(pubbuf.clone()).unwrap().contains(&format!("n {}", kp.public.n())));
        assert!(read_keypair(&mut pubbuf.as_slice()).is_err());
        assert_eq!(read_public_key(&mut pubbuf.as_slice()).unwrap(), kp.public);
    }

    #[test]
    fn template_file_roundtrip() {
        let kp = keygen(128, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_form(3, &mut rng);
        let t = protect_reference(&kp.public, &f, &unit_vector(3, &mut rng), 16, &mut rng).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"HETP\x01");
        assert_eq!(ProtectedTemplate::read(&mut buf.as_slice()).unwrap(), t);
        assert!(ProtectedTemplate::read(&mut &buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn roundtrip_and_homomorphism(seed in any::<u64>(), k in any::<i64>()) {
            let kp = key512();
            let pk = &kp.public;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_below(pk.n(), &mut rng);
            let b = random_below(pk.n(), &mut rng);
            let ca = encrypt(pk, &a, &mut rng).unwrap();
            let cb = encrypt(pk, &b, &mut rng).unwrap();
            prop_assert_eq!(decrypt(kp, &ca).unwrap(), a.clone());
            prop_assert_eq!(decrypt(kp, &hom_add(pk, &ca, &cb).unwrap()).unwrap(), (&a + &b) % pk.n());
            let kb = BigInt::from(k);
            let expected = (BigInt::from(a) * &kb).mod_floor(&BigInt::from(pk.n().clone()));
            let got = decrypt(kp, &hom_scalar_mul(pk, &ca, &kb).unwrap()).unwrap();
            prop_assert_eq!(BigInt::from(got), expected);
        }

        #[test]
        fn codec_precision(x in -100.0f64..100.0) {
            let n = key512().public.n();
            let back = decode(&encode(x, 24, n).unwrap(), n);
            prop_assert!((back - x).abs() <= 2f64.powi(-24));
            prop_assert_eq!(back, (x * 2f64.powi(24)).round() / 2f64.powi(24));
        }
    }
}
