//! Closed-form cost and probability models for the windowed signer and the
//! search, evaluated in exact rational arithmetic until display time.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Expected MULTIPLY-equivalent operation count of one signature:
/// (2^t - 1) + n + (n/t)(1 - 2^{-t}).
pub fn tau(n: u64, t: u32) -> BigRational {
    let w = 1i64 << t;
    ratio(w - 1, 1) + ratio(n as i64, 1) + ratio(n as i64, t as i64) * ratio(w - 1, w)
}

/// The three components of tau, in its stated order: table build, squarings,
/// loop multiplications.
pub fn tau_components(n: u64, t: u32) -> (BigRational, BigRational, BigRational) {
    let w = 1i64 << t;
    (
        ratio(w - 1, 1),
        ratio(n as i64, 1),
        ratio(n as i64, t as i64) * ratio(w - 1, w),
    )
}

/// Rounds a rational to one decimal place, as the cost tables display it.
pub fn round1(x: &BigRational) -> f64 {
    (x.to_f64().expect("finite") * 10.0).round() / 10.0
}

/// argmin of tau over the window range; ties break toward smaller t.
pub fn optimal_t(n: u64, t_range: std::ops::RangeInclusive<u32>) -> Result<u32> {
    t_range
        .clone()
        .min_by(|&a, &b| tau(n, a).cmp(&tau(n, b)))
        .ok_or_else(|| Error::InvalidParameter("empty window range".into()))
}

/// Closed-form expectation and variance of the per-coefficient block count:
/// E = n/(t*2^t), Var = E*(1 - 2^{-t}). These use n/t as written, not the
/// rounded-up block count.
pub fn digit_moments(n: u64, t: u32) -> (BigRational, BigRational) {
    let w = 1i64 << t;
    let mean = ratio(n as i64, t as i64 * w);
    let var = &mean * ratio(w - 1, w);
    (mean, var)
}

/// Binomial pmf p(B, z) = C(B, z) (1/w)^z (1 - 1/w)^{B-z}, exact.
pub fn pmf(b: u64, z: u64, w: u64) -> BigRational {
    if z > b {
        return BigRational::zero();
    }
    let c = BigInt::from(binomial(b, z));
    let num = c * BigInt::from(w - 1).pow((b - z) as u32);
    BigRational::new(num, BigInt::from(w).pow(b as u32))
}

/// P(X <= k) under the B-trial binomial model.
pub fn cumulative(b: u64, k: u64, w: u64) -> BigRational {
    (0..=k.min(b)).map(|z| pmf(b, z, w)).sum()
}

/// V_{k,t} = log2 of the number of position sets of size at most k among B
/// blocks, via the exact integer sum.
pub fn search_space_bits(b: u64, k: u64) -> f64 {
    let sum: BigUint = (0..=k.min(b)).map(|z| binomial(b, z)).sum();
    log2_biguint(&sum)
}

/// The defense-side bound: log2 sum_{z<=z_max} C(ceil(n/t), z).
pub fn countermeasure_space_bits(n: u64, t: u32, z_max: u64) -> f64 {
    search_space_bits(n.div_ceil(t as u64), z_max)
}

fn log2_biguint(x: &BigUint) -> f64 {
    assert!(!x.is_zero(), "log2 of zero");
    let bits = x.bits();
    if bits <= 1000 {
        x.to_f64().expect("fits f64").log2()
    } else {
        let shift = bits - 64;
        let top = (x >> shift).to_f64().expect("64 bits fit");
        top.log2() + shift as f64
    }
}

/// Probability that one z-subset of B blocks passes the position check:
/// (w-1)^{B-z+1} / w^B.
pub fn pass_probability(w: u64, b: u64, z: u64) -> BigRational {
    BigRational::new(
        BigInt::from(w - 1).pow((b - z + 1) as u32),
        BigInt::from(w).pow(b as u32),
    )
}

/// Expected coefficient and position counts at multiplicity z, with and
/// without coefficient zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedCounts {
    /// W_z = w * p(B, z)
    pub coeffs: BigRational,
    /// B_z = z * w * p(B, z)
    pub positions: BigRational,
    /// W'_z = (w - 1) * p(B, z)
    pub coeffs_nonzero: BigRational,
    /// B'_z = z * (w - 1) * p(B, z)
    pub positions_nonzero: BigRational,
}

pub fn expected_counts(w: u64, b: u64, z: u64) -> ExpectedCounts {
    let p = pmf(b, z, w);
    let zq = ratio(z as i64, 1);
    ExpectedCounts {
        coeffs: ratio(w as i64, 1) * &p,
        positions: &zq * ratio(w as i64, 1) * &p,
        coeffs_nonzero: ratio(w as i64 - 1, 1) * &p,
        positions_nonzero: zq * ratio(w as i64 - 1, 1) * p,
    }
}

/// Empirical histogram of the per-coefficient block count over uniformly
/// sampled digit vectors, with the worst deviation from the exact pmf.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub b: u64,
    pub w: u64,
    pub trials: u64,
    /// counts[z] = number of sampled vectors whose tracked coefficient
    /// occupied exactly z blocks.
    pub counts: Vec<u64>,
    pub mode: u64,
    pub max_deviation: f64,
}

pub fn empirical_digit_histogram(n: u64, t: u32, trials: u64, seed: u64) -> Result<Histogram> {
    if trials < 1 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let b = n.div_ceil(t as u64);
    let w = 1u64 << t;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; b as usize + 1];
    // Track a fixed coefficient; the distribution is the same for all.
    let tracked = 1u64;
    for _ in 0..trials {
        let z = (0..b).filter(|_| rng.gen_range(0..w) == tracked).count();
        counts[z] += 1;
    }
    let mode = counts
        .iter()
        .enumerate()
        .max_by_key(|&(_, &c)| c)
        .map(|(z, _)| z as u64)
        .unwrap_or(0);
    let mut max_deviation = 0f64;
    for (z, &c) in counts.iter().enumerate() {
        let emp = c as f64 / trials as f64;
        let exact = pmf(b, z as u64, w).to_f64().unwrap();
        max_deviation = max_deviation.max((emp - exact).abs());
    }
    Ok(Histogram { b, w, trials, counts, mode, max_deviation })
}

/// Display rounding to three significant digits, as the probability tables
/// use.
pub fn round3sig(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mag = x.abs().log10().floor();
    let scale = 10f64.powf(2.0 - mag);
    (x * scale).round() / scale
}
