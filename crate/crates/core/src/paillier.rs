//! Paillier cryptosystem with signed-value encoding.
//!
//! Plaintexts live in `Z_n`; this module encodes signed integers into the
//! half range (negative `v` maps to `n + v`), which keeps sums of
//! per-client `{-1, +1}` updates recoverable with the correct sign as long
//! as `n > 2K`. Ciphertext products decrypt to plaintext sums, which is
//! the only homomorphic operation the aggregation protocol needs.
//!
//! This is a simulator component, not production cryptography: arithmetic
//! is not constant-time and no side-channel hardening is attempted.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SafeLmError};
use crate::exec;
use crate::seeds;

/// Allowed modulus sizes for `keygen`.
pub const ALLOWED_KEY_BITS: [u64; 4] = [256, 512, 1024, 2048];

/// Miller-Rabin rounds used for prime generation and validation.
const MILLER_RABIN_ROUNDS: u32 = 40;

/// Public key `(n, g)` with `n^2` cached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    pub n: BigUint,
    pub g: BigUint,
    pub n_squared: BigUint,
    pub bits: u64,
}

/// Secret key `(lambda, mu)` with `lambda = lcm(p-1, q-1)` and
/// `mu = L(g^lambda mod n^2)^{-1} mod n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierSecretKey {
    pub lambda: BigUint,
    pub mu: BigUint,
}

/// A Paillier ciphertext: a unit in `Z_{n^2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub value: BigUint,
}

/// A signed plaintext; must satisfy `|value| < n/2` for the key in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedPlain(pub i64);

impl From<i64> for SignedPlain {
    fn from(v: i64) -> Self {
        SignedPlain(v)
    }
}

impl PaillierPublicKey {
    /// Map a signed value into `Z_n` (negatives wrap to `n + v`).
    fn encode(&self, m: SignedPlain) -> Result<BigUint> {
        let mag = BigUint::from(m.0.unsigned_abs());
        // |m| < n/2, i.e. 2|m| < n.
        if (&mag << 1) >= self.n {
            return Err(SafeLmError::PlaintextRange { value: m.0 });
        }
        if m.0 >= 0 {
            Ok(mag)
        } else {
            Ok(&self.n - mag)
        }
    }

    /// Map an element of `Z_n` back to the signed range.
    fn decode(&self, m: &BigUint) -> i64 {
        let half = &self.n >> 1;
        if m > &half {
            let mag = &self.n - m;
            -biguint_to_i64(&mag)
        } else {
            biguint_to_i64(m)
        }
    }
}

/// Generate a keypair with an `n` of exactly `bits` bits.
///
/// `p` and `q` are distinct random probable primes of `bits/2` each
/// (Miller-Rabin, 40 rounds) drawn from a ChaCha stream seeded by `seed`,
/// so a fixed seed reproduces the same keypair.
pub fn keygen(bits: u64, seed: u64) -> Result<(PaillierPublicKey, PaillierSecretKey)> {
    if !ALLOWED_KEY_BITS.contains(&bits) {
        return Err(SafeLmError::invalid(format!(
            "key size {bits} not in {ALLOWED_KEY_BITS:?}"
        )));
    }
    let mut rng = seeds::rng(seed, &[seeds::purpose::KEYGEN]);
    let half = bits / 2;
    loop {
        let p = random_prime(half, &mut rng)?;
        let q = random_prime(half, &mut rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        // Retry until the product carries into the full width.
        if n.bits() != bits {
            continue;
        }
        return assemble_keypair(&p, &q, bits);
    }
}

/// Build a keypair from explicit primes. Intended for small test keys
/// where `keygen` would be wasteful or where a specific `n` is needed.
pub fn from_primes(p: &BigUint, q: &BigUint) -> Result<(PaillierPublicKey, PaillierSecretKey)> {
    if p == q {
        return Err(SafeLmError::KeyGeneration("p and q must differ".into()));
    }
    let mut rng = seeds::rng(0, &[seeds::purpose::KEYGEN]);
    for prime in [p, q] {
        if !is_probable_prime(prime, MILLER_RABIN_ROUNDS, &mut rng) {
            return Err(SafeLmError::KeyGeneration(format!("{prime} is not prime")));
        }
    }
    let n = p * q;
    let bits = n.bits();
    assemble_keypair(p, q, bits)
}

fn assemble_keypair(
    p: &BigUint,
    q: &BigUint,
    bits: u64,
) -> Result<(PaillierPublicKey, PaillierSecretKey)> {
    let one = BigUint::one();
    let n = p * q;
    let n_squared = &n * &n;
    let g = &n + &one;
    let lambda = (p - &one).lcm(&(q - &one));

    // mu = L(g^lambda mod n^2)^{-1} mod n, computed generically even
    // though g = n + 1 admits a shortcut; keygen runs once per experiment.
    let g_lambda = g.modpow(&lambda, &n_squared);
    let l_value = l_function(&g_lambda, &n)?;
    let mu = mod_inverse(&l_value, &n)
        .ok_or_else(|| SafeLmError::KeyGeneration("L(g^lambda) not invertible mod n".into()))?;

    Ok((
        PaillierPublicKey {
            n,
            g,
            n_squared,
            bits,
        },
        PaillierSecretKey { lambda, mu },
    ))
}

/// `L(x) = (x - 1) / n`; errors if `n` does not divide `x - 1`.
fn l_function(x: &BigUint, n: &BigUint) -> Result<BigUint> {
    let x_minus_1 = x - BigUint::one();
    let (quot, rem) = x_minus_1.div_rem(n);
    if !rem.is_zero() {
        return Err(SafeLmError::CorruptCiphertext);
    }
    Ok(quot)
}

/// Encrypt `m` with fresh randomness drawn from a stream seeded by `seed`.
pub fn encrypt(pk: &PaillierPublicKey, m: SignedPlain, seed: u64) -> Result<Ciphertext> {
    let mut rng = seeds::rng(seed, &[seeds::purpose::ENCRYPT]);
    encrypt_with_rng(pk, m, &mut rng)
}

/// Encrypt `m` taking randomness from the caller's stream.
pub fn encrypt_with_rng(
    pk: &PaillierPublicKey,
    m: SignedPlain,
    rng: &mut ChaCha12Rng,
) -> Result<Ciphertext> {
    let encoded = pk.encode(m)?;
    let r = random_unit(&pk.n, rng);
    Ok(raw_encrypt(pk, &encoded, &r, true))
}

/// Encryption core. With `shortcut` and `g = n + 1`, `g^m mod n^2`
/// collapses to `1 + m*n`; otherwise a full modular exponentiation runs.
/// Both routes produce ciphertexts that decrypt identically.
pub(crate) fn raw_encrypt(
    pk: &PaillierPublicKey,
    encoded: &BigUint,
    r: &BigUint,
    shortcut: bool,
) -> Ciphertext {
    let g_m = if shortcut && pk.g == &pk.n + BigUint::one() {
        (BigUint::one() + encoded * &pk.n) % &pk.n_squared
    } else {
        pk.g.modpow(encoded, &pk.n_squared)
    };
    let r_n = r.modpow(&pk.n, &pk.n_squared);
    Ciphertext {
        value: (g_m * r_n) % &pk.n_squared,
    }
}

/// Decrypt: `m = L(c^lambda mod n^2) * mu mod n`, then signed-decode.
pub fn decrypt(
    sk: &PaillierSecretKey,
    pk: &PaillierPublicKey,
    c: &Ciphertext,
) -> Result<SignedPlain> {
    if c.value >= pk.n_squared || c.value.gcd(&pk.n_squared) != BigUint::one() {
        return Err(SafeLmError::CorruptCiphertext);
    }
    let c_lambda = c.value.modpow(&sk.lambda, &pk.n_squared);
    let l_value = l_function(&c_lambda, &pk.n)?;
    let m = (l_value * &sk.mu) % &pk.n;
    Ok(SignedPlain(pk.decode(&m)))
}

/// Homomorphic sum: the product of ciphertexts mod `n^2` decrypts to the
/// sum of the underlying plaintexts.
pub fn hom_sum(pk: &PaillierPublicKey, cts: &[Ciphertext]) -> Result<Ciphertext> {
    if cts.is_empty() {
        return Err(SafeLmError::invalid("hom_sum of an empty ciphertext list"));
    }
    let mut acc = cts[0].value.clone();
    for ct in &cts[1..] {
        acc = (acc * &ct.value) % &pk.n_squared;
    }
    Ok(Ciphertext { value: acc })
}

/// Encrypt a vector of signed values, one ciphertext per coordinate, with
/// per-coordinate randomness derived from `seed`. Coordinates are
/// independent, so this parallelizes across the vector.
pub fn encrypt_vector(
    pk: &PaillierPublicKey,
    values: &[i64],
    seed: u64,
) -> Result<Vec<Ciphertext>> {
    let results = exec::par_map_n(values.len(), |j| {
        let mut rng = seeds::rng(seed, &[seeds::purpose::ENCRYPT, j as u64]);
        encrypt_with_rng(pk, SignedPlain(values[j]), &mut rng)
    });
    results.into_iter().collect()
}

/// Decrypt a ciphertext vector coordinate-wise.
pub fn decrypt_vector(
    sk: &PaillierSecretKey,
    pk: &PaillierPublicKey,
    cts: &[Ciphertext],
) -> Result<Vec<i64>> {
    let results = exec::par_map(cts, |c| decrypt(sk, pk, c).map(|m| m.0));
    results.into_iter().collect()
}

/// Coordinate-wise homomorphic sum of equal-length ciphertext vectors.
pub fn hom_sum_vectors(
    pk: &PaillierPublicKey,
    vectors: &[Vec<Ciphertext>],
) -> Result<Vec<Ciphertext>> {
    if vectors.is_empty() {
        return Err(SafeLmError::invalid("hom_sum of an empty vector list"));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(SafeLmError::Protocol(
            "ciphertext vectors have mismatched lengths".into(),
        ));
    }
    let results = exec::par_map_n(d, |j| {
        let column: Vec<Ciphertext> = vectors.iter().map(|v| v[j].clone()).collect();
        hom_sum(pk, &column)
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------
// Serialization: keys as a JSON document of hex fields, ciphertext
// vectors as arrays of hex strings.
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct KeyDocument {
    pub n: String,
    pub g: String,
    pub lambda: String,
    pub mu: String,
    pub bits: u64,
}

pub fn keypair_to_document(pk: &PaillierPublicKey, sk: &PaillierSecretKey) -> KeyDocument {
    KeyDocument {
        n: pk.n.to_str_radix(16),
        g: pk.g.to_str_radix(16),
        lambda: sk.lambda.to_str_radix(16),
        mu: sk.mu.to_str_radix(16),
        bits: pk.bits,
    }
}

pub fn keypair_from_document(doc: &KeyDocument) -> Result<(PaillierPublicKey, PaillierSecretKey)> {
    let n = biguint_from_hex(&doc.n)?;
    let g = biguint_from_hex(&doc.g)?;
    let n_squared = &n * &n;
    Ok((
        PaillierPublicKey {
            n,
            g,
            n_squared,
            bits: doc.bits,
        },
        PaillierSecretKey {
            lambda: biguint_from_hex(&doc.lambda)?,
            mu: biguint_from_hex(&doc.mu)?,
        },
    ))
}

pub fn ciphertexts_to_hex(cts: &[Ciphertext]) -> Vec<String> {
    cts.iter().map(|c| c.value.to_str_radix(16)).collect()
}

pub fn ciphertexts_from_hex(hex: &[String]) -> Result<Vec<Ciphertext>> {
    hex.iter()
        .map(|h| biguint_from_hex(h).map(|value| Ciphertext { value }))
        .collect()
}

fn biguint_from_hex(s: &str) -> Result<BigUint> {
    BigUint::parse_bytes(s.as_bytes(), 16)
        .ok_or_else(|| SafeLmError::invalid(format!("malformed hex big integer: {s}")))
}

fn biguint_to_i64(v: &BigUint) -> i64 {
    let digits = v.to_u64_digits();
    match digits.len() {
        0 => 0,
        1 => digits[0] as i64,
        // Signed plaintexts in this simulator are client counts and small
        // sums; anything wider than 63 bits is a protocol bug upstream.
        _ => panic!("decoded plaintext exceeds i64 range"),
    }
}

// ---------------------------------------------------------------------
// Big-integer helpers: uniform sampling, modular inverse, Miller-Rabin.
// ---------------------------------------------------------------------

/// Uniform sample from `[0, bound)` by rejection on masked random bytes.
fn random_below(bound: &BigUint, rng: &mut impl RngCore) -> BigUint {
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64 * 8 - bits) as u32;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        buf[0] >>= excess;
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Uniform unit of `Z_n`: nonzero and coprime to `n`.
fn random_unit(n: &BigUint, rng: &mut impl RngCore) -> BigUint {
    loop {
        let r = random_below(n, rng);
        if !r.is_zero() && r.gcd(n) == BigUint::one() {
            return r;
        }
    }
}

/// Modular inverse via extended Euclid; `None` when gcd != 1.
fn mod_inverse(a: &BigUint, modulus: &BigUint) -> Option<BigUint> {
    let a = BigInt::from_biguint(Sign::Plus, a.clone());
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let ext = a.extended_gcd(&m);
    if ext.gcd != BigInt::one() {
        return None;
    }
    let mut inv = ext.x % &m;
    if inv.sign() == Sign::Minus {
        inv += &m;
    }
    inv.to_biguint()
}

/// Miller-Rabin with `rounds` random bases.
fn is_probable_prime(n: &BigUint, rounds: u32, rng: &mut impl RngCore) -> bool {
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    if *n < two {
        return false;
    }
    if *n == two || *n == three {
        return true;
    }
    if n.is_even() {
        return false;
    }

    // n - 1 = d * 2^s with d odd
    let n_minus_1 = n - BigUint::one();
    let mut d = n_minus_1.clone();
    let mut s = 0u64;
    while d.is_even() {
        d >>= 1;
        s += 1;
    }

    'witness: for _ in 0..rounds {
        // a uniform in [2, n-2]
        let span = n - &three;
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x == BigUint::one() || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random probable prime with exactly `bits` bits (top and low bit set).
fn random_prime(bits: u64, rng: &mut impl RngCore) -> Result<BigUint> {
    let max_attempts = 200 * bits;
    for _ in 0..max_attempts {
        let bytes = bits.div_ceil(8) as usize;
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let mut candidate = BigUint::from_bytes_be(&buf);
        // Trim to width, then pin the top bit (exact size) and low bit (odd).
        candidate &= (BigUint::one() << bits) - BigUint::one();
        candidate |= BigUint::one() << (bits - 1);
        candidate |= BigUint::one();
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(SafeLmError::KeyGeneration(format!(
        "no {bits}-bit prime found after {max_attempts} attempts"
    )))
}
