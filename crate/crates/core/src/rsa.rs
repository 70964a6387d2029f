//! Classical (non-CRT) RSA primitives for the windowed signer: key
//! generation, base-2^t digit decomposition, position sets and position
//! exponents, table precomputation, and the 2^t-ary signing loop, together
//! with an independent binary square-and-multiply oracle used by the tests.

use std::collections::BTreeSet;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

const MILLER_RABIN_ROUNDS: u32 = 40;
const KEYGEN_MAX_ATTEMPTS: u32 = 4096;

/// Full RSA key material for a simulated device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub p: BigUint,
    pub q: BigUint,
    /// Modulus N = p * q.
    pub n_mod: BigUint,
    pub e: BigUint,
    pub d: BigUint,
    /// phi(N) = (p-1)(q-1)
    pub phi: BigUint,
    /// lambda(N) = lcm(p-1, q-1)
    pub lambda: BigUint,
    /// Bit length of N.
    pub n_bits: u64,
}

/// How the public exponent is chosen during key generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EPolicy {
    Fixed(BigUint),
    RandomCoprime,
}

impl EPolicy {
    pub fn fixed(e: u64) -> Self {
        EPolicy::Fixed(BigUint::from(e))
    }
}

impl KeyPair {
    /// Assembles a keypair from two primes and a public exponent, computing
    /// d = e^{-1} mod phi(N).
    pub fn from_primes(p: &BigUint, q: &BigUint, e: &BigUint) -> Result<KeyPair> {
        if p == q {
            return Err(Error::KeyGeneration("p and q must be distinct".into()));
        }
        let one = BigUint::one();
        let phi = (p - &one) * (q - &one);
        let lambda = (p - &one).lcm(&(q - &one));
        if e < &BigUint::from(3u32) || e.is_even() {
            return Err(Error::KeyGeneration(format!("e = {e} must be odd and >= 3")));
        }
        if e >= &phi {
            return Err(Error::KeyGeneration(format!(
                "e = {e} is not below phi(N) = {phi}"
            )));
        }
        if e.gcd(&phi) != one {
            return Err(Error::KeyGeneration(format!(
                "gcd(e, phi) = {} != 1",
                e.gcd(&phi)
            )));
        }
        let d = mod_inverse(e, &phi)?;
        if d <= one {
            return Err(Error::KeyGeneration("degenerate secret exponent d <= 1".into()));
        }
        let n_mod = p * q;
        let n_bits = n_mod.bits();
        let (p, q) = if p < q { (p.clone(), q.clone()) } else { (q.clone(), p.clone()) };
        Ok(KeyPair { p, q, n_mod, e: e.clone(), d, phi, lambda, n_bits })
    }

    /// Checks every keypair invariant: primality of p and q, the RSA
    /// equation e*d = 1 mod phi(N), and a signing round trip.
    pub fn validate(&self) -> Result<()> {
        let mut rng = ChaCha20Rng::seed_from_u64(0x76616c6964);
        if !is_probable_prime(&self.p, &mut rng, MILLER_RABIN_ROUNDS)
            || !is_probable_prime(&self.q, &mut rng, MILLER_RABIN_ROUNDS)
        {
            return Err(Error::KeyGeneration("p or q failed primality test".into()));
        }
        if self.p == self.q {
            return Err(Error::KeyGeneration("p == q".into()));
        }
        if (&self.e * &self.d) % &self.phi != BigUint::one() {
            return Err(Error::KeyGeneration("e*d != 1 mod phi(N)".into()));
        }
        if self.d <= BigUint::one() || self.d >= self.phi {
            return Err(Error::KeyGeneration("d out of range (1, phi)".into()));
        }
        // Round trip on a handful of random messages.
        for _ in 0..4 {
            let m = random_coprime_message(&self.n_mod, &mut rng);
            let s = modexp_oracle(&m, &self.d, &self.n_mod);
            if modexp_oracle(&s, &self.e, &self.n_mod) != m {
                return Err(Error::KeyGeneration("signature round trip failed".into()));
            }
        }
        Ok(())
    }
}

/// Draws a uniform message in [2, N-1] coprime to N.
pub fn random_coprime_message(n_mod: &BigUint, rng: &mut impl Rng) -> BigUint {
    loop {
        let m = rng.gen_biguint_range(&BigUint::from(2u32), n_mod);
        if m.gcd(n_mod).is_one() {
            return m;
        }
    }
}

/// Generates a keypair with balanced primes (p < q < 2p) so that
/// s = p + q - 1 < 3*sqrt(N). Deterministic for a fixed seed.
pub fn generate_keypair(bits: u64, e_policy: &EPolicy, seed: u64) -> Result<KeyPair> {
    if bits < 8 {
        return Err(Error::InvalidParameter(format!(
            "modulus length {bits} below minimum of 8 bits"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = bits.div_ceil(2);
    for _ in 0..KEYGEN_MAX_ATTEMPTS {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if p == q {
            continue;
        }
        let (p, q) = if p < q { (p, q) } else { (q, p) };
        if q >= (&p << 1) {
            continue; // unbalanced
        }
        let n_mod = &p * &q;
        if n_mod.bits() != bits {
            continue;
        }
        let one = BigUint::one();
        let phi = (&p - &one) * (&q - &one);
        let e = match e_policy {
            EPolicy::Fixed(e) => {
                if e.is_even() || e < &BigUint::from(3u32) {
                    return Err(Error::KeyGeneration(format!("e = {e} must be odd and >= 3")));
                }
                if e >= &phi {
                    return Err(Error::KeyGeneration(format!(
                        "e = {e} is not below phi(N) = {phi}"
                    )));
                }
                if !e.gcd(&phi).is_one() {
                    continue;
                }
                e.clone()
            }
            EPolicy::RandomCoprime => {
                let hi = phi.clone().min(BigUint::one() << 17);
                let mut e = rng.gen_biguint_range(&BigUint::from(3u32), &hi);
                e |= BigUint::one();
                if e < BigUint::from(3u32) || !e.gcd(&phi).is_one() {
                    continue;
                }
                e
            }
        };
        match KeyPair::from_primes(&p, &q, &e) {
            Ok(key) => return Ok(key),
            Err(_) => continue,
        }
    }
    Err(Error::KeyGeneration(format!(
        "no admissible key after {KEYGEN_MAX_ATTEMPTS} attempts (bits={bits})"
    )))
}

fn random_prime(bits: u64, rng: &mut ChaCha20Rng) -> BigUint {
    loop {
        let mut c = rng.gen_biguint(bits);
        c.set_bit(bits - 1, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, rng, MILLER_RABIN_ROUNDS) {
            return c;
        }
    }
}

/// Miller-Rabin probable-prime test with random bases.
pub fn is_probable_prime(n: &BigUint, rng: &mut impl Rng, rounds: u32) -> bool {
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    if n < &two {
        return false;
    }
    if n == &two || n == &three {
        return true;
    }
    if n.is_even() {
        return false;
    }
    for small in [3u32, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let s = BigUint::from(small);
        if n == &s {
            return true;
        }
        if (n % &s).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let r = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> r;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = modexp_oracle(&a, &d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..r.saturating_sub(1) {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// The 2^t-ary digit vector of an exponent, LSB-first, padded to
/// B = ceil(n/t) blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedExponent {
    pub t: u32,
    /// digits[j] in [0, 2^t - 1], index 0 least significant.
    pub digits: Vec<u32>,
}

impl WindowedExponent {
    pub fn block_count(&self) -> usize {
        self.digits.len()
    }

    pub fn window_size(&self) -> u32 {
        1u32 << self.t
    }
}

/// Splits d into base-2^t digits, zero-padded to ceil(n/t) blocks.
pub fn decompose(d: &BigUint, t: u32, n: u64) -> Result<WindowedExponent> {
    if t == 0 || t > 16 {
        return Err(Error::InvalidParameter(format!("window width t = {t} out of [1, 16]")));
    }
    if d.bits() > n {
        return Err(Error::InvalidParameter(format!(
            "exponent has {} bits, exceeds n = {n}",
            d.bits()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let b = n.div_ceil(t as u64) as usize;
    let mask = BigUint::from((1u64 << t) - 1);
    let mut digits = Vec::with_capacity(b);
    let mut rest = d.clone();
    for _ in 0..b {
        digits.push((&rest & &mask).to_u32().expect("digit fits u32"));
        rest >>= t;
    }
    debug_assert!(rest.is_zero());
    Ok(WindowedExponent { t, digits })
}

/// Horner evaluation of the digit vector back to the integer exponent.
pub fn recompose(w: &WindowedExponent) -> BigUint {
    let mut acc = BigUint::zero();
    for &digit in w.digits.iter().rev() {
        acc = (acc << w.t) + BigUint::from(digit);
    }
    acc
}

/// The partition of block indices by digit value: sets[l] = P_{n,t,l}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionSets {
    pub t: u32,
    pub sets: Vec<BTreeSet<usize>>,
}

impl PositionSets {
    pub fn set(&self, coeff: u32) -> &BTreeSet<usize> {
        &self.sets[coeff as usize]
    }

    /// Union of P_l over l in [k, 2^t - 1]; the exponent deficit of the
    /// k-faulted signature is the position exponent of this set.
    pub fn union_from(&self, k: u32) -> BTreeSet<usize> {
        self.sets[k as usize..].iter().flatten().copied().collect()
    }
}

/// Scans the digit vector into position sets.
pub fn position_sets(w: &WindowedExponent) -> PositionSets {
    let mut sets = vec![BTreeSet::new(); w.window_size() as usize];
    for (j, &digit) in w.digits.iter().enumerate() {
        sets[digit as usize].insert(j);
    }
    PositionSets { t: w.t, sets }
}

/// Position exponent d[t, A] = sum over j in A of (2^t)^j. Zero for the
/// empty set.
pub fn position_exponent<'a, I>(blocks: I, t: u32) -> BigUint
where
    I: IntoIterator<Item = &'a usize>,
{
    let mut acc = BigUint::zero();
    for &j in blocks {
        acc.set_bit(t as u64 * j as u64, true);
    }
    acc
}

/// The precomputed table of M^j mod N for j in [1, 2^t - 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecompTable {
    pub t: u32,
    /// entries[j - 1] holds the residue stored at table index j.
    pub entries: Vec<BigUint>,
}

impl PrecompTable {
    pub fn entry(&self, j: u32) -> &BigUint {
        &self.entries[j as usize - 1]
    }
}

/// Fault-free precomputation by the recursion M^j = M^{j-1} * M mod N,
/// one multiplication per stored entry.
pub fn precompute_table(m: &BigUint, t: u32, n_mod: &BigUint) -> Result<PrecompTable> {
    let g = m.gcd(n_mod);
    if !g.is_one() {
        return Err(Error::NotCoprime { context: "precompute_table", gcd: g });
    }
    let count = (1u32 << t) - 1;
    let mut entries = Vec::with_capacity(count as usize);
    let mut acc = BigUint::one();
    for _ in 0..count {
        acc = &acc * m % n_mod;
        entries.push(acc.clone());
    }
    Ok(PrecompTable { t, entries })
}

/// The 2^t-ary signing loop: blocks MSB to LSB, t squarings per block, one
/// table multiplication iff the digit is nonzero. Squarings are never
/// short-circuited, even while the accumulator is 1.
pub fn sign_2t_ary(
    w: &WindowedExponent,
    n_mod: &BigUint,
    table: &PrecompTable,
) -> Result<BigUint> {
    if table.t != w.t {
        return Err(Error::InvalidParameter(format!(
            "table width t = {} does not match exponent width t = {}",
            table.t, w.t
        )));
    }
    let mut acc = BigUint::one();
    for &digit in w.digits.iter().rev() {
        for _ in 0..w.t {
            acc = &acc * &acc % n_mod;
        }
        if digit != 0 {
            acc = &acc * table.entry(digit) % n_mod;
        }
    }
    Ok(acc)
}

/// Independent left-to-right binary square-and-multiply, used only as a
/// reference oracle against the windowed path.
pub fn modexp_oracle(m: &BigUint, d: &BigUint, n_mod: &BigUint) -> BigUint {
    debug_assert!(n_mod > &BigUint::one());
    if d.is_zero() {
        return BigUint::one() % n_mod;
    }
    let mut acc = BigUint::one();
    for i in (0..d.bits()).rev() {
        acc = &acc * &acc % n_mod;
        if d.bit(i) {
            acc = &acc * m % n_mod;
        }
    }
    acc
}

/// Modular inverse via extended Euclid. A non-invertible operand surfaces
/// its gcd with the modulus, which factors N.
pub fn mod_inverse(a: &BigUint, n_mod: &BigUint) -> Result<BigUint> {
    let a = a % n_mod;
    let g = a.gcd(n_mod);
    if !g.is_one() {
        return Err(Error::NotCoprime { context: "mod_inverse", gcd: g });
    }
    let (mut r0, mut r1) = (BigInt::from(n_mod.clone()), BigInt::from(a));
    let (mut s0, mut s1) = (BigInt::zero(), BigInt::one());
    while !r1.is_zero() {
        let q = &r0 / &r1;
        let r2 = &r0 - &q * &r1;
        r0 = std::mem::replace(&mut r1, r2);
        let s2 = &s0 - &q * &s1;
        s0 = std::mem::replace(&mut s1, s2);
    }
    let n_int = BigInt::from(n_mod.clone());
    let inv = ((s0 % &n_int) + &n_int) % &n_int;
    Ok(inv.to_biguint().expect("reduced inverse is non-negative"))
}
