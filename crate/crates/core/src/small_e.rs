//! Small-public-exponent acceleration. From e*d - k*phi(N) = 1 and
//! s = p + q - 1 < 3*sqrt(N) on balanced keys, the bits of d above roughly
//! the midpoint agree with floor(k*N/e). A few digits recovered by the
//! ordinary search pin down k, and the whole upper region is then filled
//! for free.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::ToPrimitive;

use crate::attack::{d_search, PositionCheckerSet, RecoveredExponent, Searcher};
use crate::error::{Error, Result};

/// Borrow guard on top of the +2 that covers s < 3*sqrt(N).
pub const DEFAULT_GUARD_BITS: u64 = 8;

/// Enumerating k in [1, e-1] is considered infeasible past this size.
const MAX_ACCEL_E_BITS: u64 = 20;

/// Extra known bits demanded beyond log2(e) before k-disambiguation is
/// attempted.
const K_DISAMBIGUATION_MARGIN: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmallEResult {
    pub k: u64,
    /// floor(k*N/e) with everything below the trusted boundary cleared.
    pub d_upper: BigUint,
    /// First bit index trusted from k*N/e.
    pub trusted_bit: u64,
    pub matched_bits: u64,
    pub candidates_tested: u64,
}

/// First bit index above which floor(k*N/e) is trusted to equal d.
pub fn trusted_boundary(n_bits: u64, guard: u64) -> u64 {
    n_bits.div_ceil(2) + 2 + guard
}

/// floor(k*N/e), truncated below the trusted boundary.
pub fn upper_bits_from_k(k: u64, e: u64, n_mod: &BigUint, guard: u64) -> BigUint {
    let boundary = trusted_boundary(n_mod.bits(), guard);
    let q = n_mod * BigUint::from(k) / BigUint::from(e);
    (q >> boundary) << boundary
}

/// Finds the unique k in [1, e-1], gcd(e, k) = 1, whose floor(k*N/e) agrees
/// with every known digit lying entirely in the trusted region.
pub fn recover_k(
    e: u64,
    n_mod: &BigUint,
    t: u32,
    known: &[(usize, u32)],
    guard: u64,
) -> Result<SmallEResult> {
    if e < 3 {
        return Err(Error::InvalidParameter(format!("e = {e} too small")));
    }
    let boundary = trusted_boundary(n_mod.bits(), guard);
    let trusted: Vec<(usize, u32)> = known
        .iter()
        .copied()
        .filter(|&(j, _)| (j as u64) * t as u64 >= boundary)
        .collect();
    let known_bits = trusted.len() as u64 * t as u64;
    let e_bits = 64 - e.leading_zeros() as u64;
    let needed = e_bits + K_DISAMBIGUATION_MARGIN;
    if known_bits < needed {
        return Err(Error::InsufficientKnowledge(format!(
            "{known_bits} trusted bits known, {needed} required to disambiguate k"
        )));
    }
    let mask = (1u64 << t) - 1;
    let mut survivor: Option<(u64, BigUint)> = None;
    let mut candidates_tested = 0u64;
    for k in 1..e {
        if k.gcd(&e) != 1 {
            continue;
        }
        candidates_tested += 1;
        let q = n_mod * BigUint::from(k) / BigUint::from(e);
        let ok = trusted.iter().all(|&(j, digit)| {
            let got = ((&q >> (j as u64 * t as u64)) & BigUint::from(mask))
                .to_u64()
                .unwrap_or(u64::MAX);
            got == digit as u64
        });
        if ok {
            if survivor.is_some() {
                return Err(Error::InsufficientKnowledge(
                    "multiple k candidates survive; recover more digits first".into(),
                ));
            }
            survivor = Some((k, (&q >> boundary) << boundary));
        }
    }
    match survivor {
        Some((k, d_upper)) => Ok(SmallEResult {
            k,
            d_upper,
            trusted_bit: boundary,
            matched_bits: known_bits,
            candidates_tested,
        }),
        None => Err(Error::InsufficientKnowledge(
            "no k candidate matches the known digits".into(),
        )),
    }
}

/// What the accelerated run did, alongside the recovery itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceleratedRecovery {
    pub recovery: RecoveredExponent,
    pub small_e: Option<SmallEResult>,
    /// Blocks filled from k*N/e rather than searched.
    pub filled_blocks: usize,
    /// True when the accelerated path failed verification (or never got off
    /// the ground) and the plain search produced the result instead.
    pub fell_back: bool,
}

/// Accelerated d-search: partial search at low multiplicity, k recovery,
/// upper-region fill, then the ordinary search over the remaining blocks.
/// Falls back to the plain search when e is too large to enumerate, when k
/// cannot be pinned down, or when the accelerated result fails verification.
pub fn accelerated_search(
    checkers: &PositionCheckerSet,
    b: usize,
    lmt: usize,
    e: &BigUint,
    guard: u64,
) -> Result<AcceleratedRecovery> {
    if lmt < 1 || lmt > b {
        return Err(Error::InvalidParameter(format!("Lmt = {lmt} out of [1, B = {b}]")));
    }
    let e_small = if e.bits() <= MAX_ACCEL_E_BITS { e.to_u64() } else { None };
    let Some(e_small) = e_small else {
        // k enumeration infeasible; plain search.
        let recovery = d_search(checkers, b, lmt)?;
        return Ok(AcceleratedRecovery { recovery, small_e: None, filled_blocks: 0, fell_back: true });
    };

    let t = checkers.t;
    let boundary = trusted_boundary(checkers.n_mod.bits(), guard);
    let mut s = Searcher::new(checkers, b);
    let max_partial_z = lmt.min(3);
    let mut small_e = None;
    for z in 1..=max_partial_z {
        s.run_level(z);
        let known: Vec<(usize, u32)> = s.committed().collect();
        match recover_k(e_small, &checkers.n_mod, t, &known, guard) {
            Ok(res) => {
                small_e = Some(res);
                break;
            }
            Err(Error::InsufficientKnowledge(_)) => continue,
            Err(other) => return Err(other),
        }
    }
    let Some(res) = small_e else {
        let recovery = d_search(checkers, b, lmt)?;
        return Ok(AcceleratedRecovery { recovery, small_e: None, filled_blocks: 0, fell_back: true });
    };

    let mask = (1u64 << t) - 1;
    let mut filled_blocks = 0usize;
    for j in 0..b {
        if (j as u64) * (t as u64) < boundary {
            continue;
        }
        // The whole trusted region comes from k*N/e; blocks the partial
        // search already committed count toward the fill all the same.
        filled_blocks += 1;
        if s.digit(j).is_none() {
            let digit = ((&res.d_upper >> (j as u64 * t as u64)) & BigUint::from(mask))
                .to_u32()
                .expect("digit fits");
            s.prefill(j, digit)?;
        }
    }
    for z in 1..=lmt {
        s.run_level(z);
    }
    let recovery = s.finish();
    if recovery.verified {
        return Ok(AcceleratedRecovery { recovery, small_e: Some(res), filled_blocks, fell_back: false });
    }
    // The k-derived digits may straddle a borrow; retry without them.
    let recovery = d_search(checkers, b, lmt)?;
    Ok(AcceleratedRecovery { recovery, small_e: Some(res), filled_blocks, fell_back: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::build_checkers;
    use crate::fault::collect_dca_signatures;
    use crate::rsa::{decompose, generate_keypair, random_coprime_message, EPolicy, KeyPair};
    use num_traits::One;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn textbook_upper_bits() {
        let n = BigUint::from(3233u32);
        // floor(15 * 3233 / 17) = 2852 vs true d = 2753: the region above
        // the s-influenced half agrees.
        let q = &n * BigUint::from(15u32) / BigUint::from(17u32);
        assert_eq!(q, BigUint::from(2852u32));
        // With guard 1 the boundary is 6 + 2 + 1 = 9; both 2852 and 2753
        // collapse to 5 << 9 = 2560 above it. (Guard 0 is one bit short on
        // this toy key: the +2 margin assumes sqrt-scale error, and 12 bits
        // leaves no slack.)
        let ub = upper_bits_from_k(15, 17, &n, 1);
        assert_eq!(ub, (BigUint::from(2753u32) >> 9u32) << 9u32);
        assert_eq!(ub, BigUint::from(2560u32));
    }

    #[test]
    fn textbook_k_equation() {
        // e*d - k*phi = 1 with e=17, d=2753, phi=3120 gives k = 15.
        assert_eq!(17u64 * 2753 - 15 * 3120, 1);
    }

    #[test]
    fn upper_bits_error_bound_on_balanced_keys() {
        // |k*N/e - d| < 3*k*sqrt(N)/e + 1, checked as
        // |k*N - e*d| < 3*k*sqrt(N) + e using exact integers.
        for seed in 0..100u64 {
            let key = generate_keypair(96, &EPolicy::fixed(17), 5000 + seed).unwrap();
            let e = 17u64;
            let k = {
                // k = (e*d - 1) / phi
                let num = BigUint::from(e) * &key.d - BigUint::one();
                (num / &key.phi).to_u64().unwrap()
            };
            let kn = &key.n_mod * BigUint::from(k);
            let ed = BigUint::from(e) * &key.d;
            let diff = if kn > ed { &kn - &ed } else { &ed - &kn };
            let bound = BigUint::from(3 * k) * key.n_mod.sqrt() + BigUint::from(e);
            assert!(diff < bound, "seed={seed}");
        }
    }

    #[test]
    fn recover_k_textbook() {
        let key = KeyPair::from_primes(
            &BigUint::from(61u32),
            &BigUint::from(53u32),
            &BigUint::from(17u32),
        )
        .unwrap();
        let w = decompose(&key.d, 2, key.n_bits).unwrap();
        let known: Vec<(usize, u32)> = w.digits.iter().copied().enumerate().collect();
        // A 12-bit toy key has no usable trusted region: the default guard
        // pushes the boundary past the top bit, so recover_k refuses rather
        // than guessing.
        let err = recover_k(17, &key.n_mod, 2, &known, DEFAULT_GUARD_BITS).unwrap_err();
        assert!(matches!(err, Error::InsufficientKnowledge(_)));
        // The true k = 15 does agree with d above bit 9 (one guard bit),
        // but so do neighbouring k; disambiguation genuinely needs the
        // log2(e) + margin bits the filter demands.
        let mut survivors = Vec::new();
        for k in 1..17u64 {
            let q = &key.n_mod * BigUint::from(k) / BigUint::from(17u32);
            if (&q >> 9u32) == (&key.d >> 9u32) {
                survivors.push(k);
            }
        }
        assert!(survivors.contains(&15));
        assert!(survivors.len() > 1);
    }

    #[test]
    fn recover_k_seeded_e3() {
        let key = generate_keypair(256, &EPolicy::fixed(3), 808).unwrap();
        let t = 4u32;
        let w = decompose(&key.d, t, key.n_bits).unwrap();
        let known: Vec<(usize, u32)> = w.digits.iter().copied().enumerate().collect();
        let res = recover_k(3, &key.n_mod, t, &known, DEFAULT_GUARD_BITS).unwrap();
        let k = BigUint::from(res.k);
        assert_eq!(BigUint::from(3u32) * &key.d - k * &key.phi, BigUint::one());
    }

    #[test]
    fn recover_k_rejects_low_region_knowledge() {
        let key = generate_keypair(128, &EPolicy::fixed(65537), 4242).unwrap();
        let t = 4u32;
        let w = decompose(&key.d, t, key.n_bits).unwrap();
        let boundary = trusted_boundary(key.n_bits, DEFAULT_GUARD_BITS);
        let low: Vec<(usize, u32)> = w
            .digits
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, _)| (j as u64) * t as u64 * 1 < boundary)
            .collect();
        let err = recover_k(65537, &key.n_mod, t, &low, DEFAULT_GUARD_BITS).unwrap_err();
        assert!(matches!(err, Error::InsufficientKnowledge(_)));
    }

    #[test]
    fn k_derived_digits_match_generator() {
        for seed in 0..50u64 {
            let key = generate_keypair(128, &EPolicy::fixed(257), 7000 + seed).unwrap();
            let t = 4u32;
            let w = decompose(&key.d, t, key.n_bits).unwrap();
            let k = {
                let num = BigUint::from(257u32) * &key.d - BigUint::one();
                (num / &key.phi).to_u64().unwrap()
            };
            let ub = upper_bits_from_k(k, 257, &key.n_mod, DEFAULT_GUARD_BITS);
            let boundary = trusted_boundary(key.n_bits, DEFAULT_GUARD_BITS);
            for (j, &digit) in w.digits.iter().enumerate() {
                let bit0 = j as u64 * t as u64;
                if bit0 >= boundary {
                    let got =
                        ((&ub >> bit0) & BigUint::from(15u32)).to_u32().unwrap();
                    assert_eq!(got, digit, "seed={seed} block={j}");
                }
            }
        }
    }

    #[test]
    fn accelerated_search_end_to_end() {
        let key = generate_keypair(256, &EPolicy::fixed(65537), 31337).unwrap();
        let t = 4u32;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = random_coprime_message(&key.n_mod, &mut rng);
        let fs = collect_dca_signatures(&key, &m, t).unwrap();
        let ck = build_checkers(&fs).unwrap();
        let b = key.n_bits.div_ceil(t as u64) as usize;
        let out = accelerated_search(&ck, b, b, &key.e, DEFAULT_GUARD_BITS).unwrap();
        assert!(out.recovery.verified);
        assert_eq!(out.recovery.d_hat, key.d);
        if let Some(se) = &out.small_e {
            let k = BigUint::from(se.k);
            assert_eq!(&key.e * &key.d - k * &key.phi, BigUint::one());
            assert!(out.filled_blocks > 0);
        }
    }

    #[test]
    fn acceleration_refuses_large_e() {
        let key = generate_keypair(64, &EPolicy::RandomCoprime, 606).unwrap();
        let t = 3u32;
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let m = random_coprime_message(&key.n_mod, &mut rng);
        let fs = collect_dca_signatures(&key, &m, t).unwrap();
        let ck = build_checkers(&fs).unwrap();
        let b = key.n_bits.div_ceil(t as u64) as usize;
        let huge_e = BigUint::one() << 40;
        let out = accelerated_search(&ck, b, b, &huge_e, DEFAULT_GUARD_BITS).unwrap();
        assert!(out.fell_back);
        assert!(out.small_e.is_none());
        assert!(out.recovery.verified);
        assert_eq!(out.recovery.d_hat, key.d);
    }
}
