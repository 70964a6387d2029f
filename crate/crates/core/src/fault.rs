//! The simulated device. Executes precomputation and the signing loop while
//! honoring a fault plan that skips exactly one MULTIPLY-enable event, and
//! records the event trace a power-analysis attacker would observe.
//!
//! A skipped multiplication leaves the accumulator intact; the subsequent
//! store still writes it, so the skipped power occupies two table slots.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;

use crate::error::{Error, Result};
use crate::rsa::{decompose, position_sets, KeyPair, PrecompTable, WindowedExponent};

/// Which single MULTIPLY-enable event to suppress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPlan {
    None,
    /// Skip the k-th table multiplication, k in [1, 2^t - 1].
    PrecompSkip(u32),
    /// Skip the main-loop multiplication at block j (LSB-first index).
    LoopSkip(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Square,
    Multiply,
    PrecompMultiply,
}

/// Ordered multiplication events of one signing run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub events: Vec<Event>,
}

impl EventTrace {
    /// Compact form over the alphabet {S, M, P}.
    pub fn to_compact_string(&self) -> String {
        self.events
            .iter()
            .map(|e| match e {
                Event::Square => 'S',
                Event::Multiply => 'M',
                Event::PrecompMultiply => 'P',
            })
            .collect()
    }

    pub fn from_compact_string(s: &str) -> Result<EventTrace> {
        let events = s
            .chars()
            .map(|c| match c {
                'S' => Ok(Event::Square),
                'M' => Ok(Event::Multiply),
                'P' => Ok(Event::PrecompMultiply),
                other => Err(Error::InvalidParameter(format!("bad trace symbol {other:?}"))),
            })
            .collect::<Result<_>>()?;
        Ok(EventTrace { events })
    }
}

/// A precomputation table produced with the k-th multiplication skipped:
/// entries j < k hold M^j, entries j >= k hold M^{j-1}, so M^{k-1} appears
/// twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultedTable {
    pub k: u32,
    pub table: PrecompTable,
}

/// Runs the table precomputation with the k-th MULTIPLY replaced by a no-op.
pub fn faulted_precompute(m: &BigUint, t: u32, n_mod: &BigUint, k: u32) -> Result<FaultedTable> {
    let count = (1u32 << t) - 1;
    if k < 1 || k > count {
        return Err(Error::InvalidParameter(format!("precomp skip index k = {k} out of [1, {count}]")));
    }
    let g = m.gcd(n_mod);
    if !g.is_one() {
        return Err(Error::NotCoprime { context: "faulted_precompute", gcd: g });
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut acc = BigUint::one();
    for j in 1..=count {
        if j != k {
            acc = &acc * m % n_mod;
        }
        entries.push(acc.clone());
    }
    Ok(FaultedTable { k, table: PrecompTable { t, entries } })
}

fn precompute_traced(
    m: &BigUint,
    t: u32,
    n_mod: &BigUint,
    skip: Option<u32>,
    trace: &mut EventTrace,
) -> Result<PrecompTable> {
    let count = (1u32 << t) - 1;
    if let Some(k) = skip {
        if k < 1 || k > count {
            return Err(Error::InvalidParameter(format!(
                "precomp skip index k = {k} out of [1, {count}]"
            )));
        }
    }
    let g = m.gcd(n_mod);
    if !g.is_one() {
        return Err(Error::NotCoprime { context: "precompute", gcd: g });
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut acc = BigUint::one();
    for j in 1..=count {
        if skip != Some(j) {
            acc = &acc * m % n_mod;
            trace.events.push(Event::PrecompMultiply);
        }
        entries.push(acc.clone());
    }
    Ok(PrecompTable { t, entries })
}

fn exponentiate_traced(
    m_table: &PrecompTable,
    w: &WindowedExponent,
    n_mod: &BigUint,
    skip_block: Option<usize>,
    trace: &mut EventTrace,
) -> BigUint {
    let mut acc = BigUint::one();
    for (j, &digit) in w.digits.iter().enumerate().rev() {
        for _ in 0..w.t {
            acc = &acc * &acc % n_mod;
            trace.events.push(Event::Square);
        }
        if digit != 0 && skip_block != Some(j) {
            acc = &acc * m_table.entry(digit) % n_mod;
            trace.events.push(Event::Multiply);
        }
    }
    acc
}

/// One full signing run under a fault plan, for an explicit exponent.
/// Used directly by the exponent-randomization countermeasure; plain device
/// signing goes through [`sign_with_fault`].
pub fn sign_exponent_with_fault(
    d: &BigUint,
    exp_bits: u64,
    m: &BigUint,
    t: u32,
    n_mod: &BigUint,
    plan: FaultPlan,
) -> Result<(BigUint, EventTrace)> {
    let w = decompose(d, t, exp_bits)?;
    if let FaultPlan::LoopSkip(j) = plan {
        if j >= w.block_count() {
            return Err(Error::InvalidParameter(format!(
                "loop skip block {j} out of [0, {}]",
                w.block_count() - 1
            )));
        }
    }
    let mut trace = EventTrace::default();
    let precomp_skip = match plan {
        FaultPlan::PrecompSkip(k) => Some(k),
        _ => None,
    };
    let loop_skip = match plan {
        FaultPlan::LoopSkip(j) => Some(j),
        _ => None,
    };
    let table = precompute_traced(m, t, n_mod, precomp_skip, &mut trace)?;
    let sig = exponentiate_traced(&table, &w, n_mod, loop_skip, &mut trace);
    Ok((sig, trace))
}

/// Signs M under the device key with at most one skipped MULTIPLY event.
pub fn sign_with_fault(
    key: &KeyPair,
    m: &BigUint,
    t: u32,
    plan: FaultPlan,
) -> Result<(BigUint, EventTrace)> {
    sign_exponent_with_fault(&key.d, key.n_bits, m, t, &key.n_mod, plan)
}

/// The attacker's raw material: one faulted signature per skipped table
/// index plus the correct signature (index 2^t by convention).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultedSignatureSet {
    pub t: u32,
    pub m: BigUint,
    pub n_mod: BigUint,
    /// k in [1, 2^t - 1] -> faulted signature from the k-skipped table.
    pub sigs: BTreeMap<u32, BigUint>,
    pub correct: BigUint,
}

impl FaultedSignatureSet {
    /// Signature by index, with 2^t denoting the correct signature.
    pub fn sig(&self, k: u32) -> &BigUint {
        if k == 1u32 << self.t {
            &self.correct
        } else {
            &self.sigs[&k]
        }
    }
}

/// Simulates the full collection phase: 2^t - 1 fault injections plus one
/// clean signing, all for the same message and exponent.
pub fn collect_dca_signatures(key: &KeyPair, m: &BigUint, t: u32) -> Result<FaultedSignatureSet> {
    let mut sigs = BTreeMap::new();
    for k in 1..(1u32 << t) {
        let (sig, _) = sign_with_fault(key, m, t, FaultPlan::PrecompSkip(k))?;
        sigs.insert(k, sig);
    }
    let (correct, _) = sign_with_fault(key, m, t, FaultPlan::None)?;
    Ok(FaultedSignatureSet { t, m: m.clone(), n_mod: key.n_mod.clone(), sigs, correct })
}

/// Recovers the window width from the square-run lengths of a trace: every
/// run between multiplications is a multiple of t (a zero digit merges two
/// runs), so the gcd of the run lengths is t.
pub fn infer_t(trace: &EventTrace) -> Result<u32> {
    let mut runs = Vec::new();
    let mut current = 0u32;
    for e in &trace.events {
        match e {
            Event::Square => current += 1,
            Event::Multiply => {
                if current > 0 {
                    runs.push(current);
                }
                current = 0;
            }
            Event::PrecompMultiply => {}
        }
    }
    if current > 0 {
        runs.push(current);
    }
    let t = runs.iter().fold(0u32, |g, &r| g.gcd(&r));
    if t == 0 {
        return Err(Error::Undetermined("trace contains no square runs".into()));
    }
    Ok(t)
}

/// Cross-check: a fault-free trace for width t starts with exactly
/// 2^t - 1 precomputation multiplications.
pub fn precomp_consistent(trace: &EventTrace, t: u32) -> bool {
    let prefix = trace
        .events
        .iter()
        .take_while(|e| matches!(e, Event::PrecompMultiply))
        .count();
    prefix as u32 == (1u32 << t) - 1
}

/// Position exponent skipped by a precomp fault at k: d[t, union of P_l
/// for l >= k]. The faulted signature is M^(d - this) mod N.
pub fn fault_deficit(key: &KeyPair, t: u32, k: u32) -> Result<BigUint> {
    let w = decompose(&key.d, t, key.n_bits)?;
    let ps = position_sets(&w);
    Ok(crate::rsa::position_exponent(&ps.union_from(k), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsa::{
        generate_keypair, modexp_oracle, precompute_table, random_coprime_message, EPolicy,
    };
    use rand::Rng;
    use num_bigint::RandBigInt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn textbook_key() -> KeyPair {
        KeyPair::from_primes(
            &BigUint::from(61u32),
            &BigUint::from(53u32),
            &BigUint::from(17u32),
        )
        .unwrap()
    }

    #[test]
    fn faulted_table_small_cases() {
        let n = BigUint::from(1009u32);
        let two = BigUint::from(2u32);
        let ft = faulted_precompute(&two, 2, &n, 2).unwrap();
        assert_eq!(ft.table.entries, vec![2u32.into(), 2u32.into(), 4u32.into()]);
        let ft1 = faulted_precompute(&two, 2, &n, 1).unwrap();
        assert_eq!(ft1.table.entries, vec![1u32.into(), 2u32.into(), 4u32.into()]);
        // Fault-free reference.
        assert_eq!(
            precompute_table(&two, 2, &n).unwrap().entries,
            vec![2u32.into(), 4u32.into(), 8u32.into()]
        );
        assert!(faulted_precompute(&two, 2, &n, 4).is_err());
    }

    #[test]
    fn faulted_table_exponent_law() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_biguint_range(&BigUint::from(100u32), &BigUint::from(1u64 << 40));
            let m = random_coprime_message(&n, &mut rng);
            let t = rng.gen_range(2..=5u32);
            let k = rng.gen_range(1..(1u32 << t));
            let ft = faulted_precompute(&m, t, &n, k).unwrap();
            for j in 1..(1u32 << t) {
                let want = if j < k {
                    modexp_oracle(&m, &BigUint::from(j), &n)
                } else {
                    modexp_oracle(&m, &BigUint::from(j - 1), &n)
                };
                assert_eq!(ft.table.entry(j), &want, "t={t} k={k} j={j}");
            }
        }
    }

    #[test]
    fn precomp_fault_matches_deficit_formula() {
        let key = textbook_key();
        let m = BigUint::from(5u32);
        let (sig, _) = sign_with_fault(&key, &m, 2, FaultPlan::PrecompSkip(2)).unwrap();
        // d[2, union l>=2] = 1280 + 64 = 1344; d - 1344 = 1409.
        assert_eq!(fault_deficit(&key, 2, 2).unwrap(), BigUint::from(1344u32));
        assert_eq!(sig, modexp_oracle(&m, &BigUint::from(1409u32), &key.n_mod));
    }

    #[test]
    fn loop_fault_matches_formula() {
        let key = textbook_key();
        let m = BigUint::from(7u32);
        // Digit 3 sits at block j = 3: d - 3 * 64 = 2561.
        let (sig, _) = sign_with_fault(&key, &m, 2, FaultPlan::LoopSkip(3)).unwrap();
        assert_eq!(sig, modexp_oracle(&m, &BigUint::from(2561u32), &key.n_mod));
    }

    #[test]
    fn loop_fault_on_zero_digit_is_silent() {
        let key = textbook_key();
        let m = BigUint::from(7u32);
        let (correct, clean_trace) = sign_with_fault(&key, &m, 2, FaultPlan::None).unwrap();
        // Blocks 1 and 2 hold digit 0; no MULTIPLY occurs there to skip.
        for j in [1usize, 2] {
            let (sig, trace) = sign_with_fault(&key, &m, 2, FaultPlan::LoopSkip(j)).unwrap();
            assert_eq!(sig, correct);
            assert_eq!(trace, clean_trace);
        }
    }

    #[test]
    fn faulted_signature_law_random_keys() {
        for (seed, t) in [(1u64, 2u32), (2, 3), (3, 4), (4, 5), (5, 6)] {
            let key = generate_keypair(48, &EPolicy::RandomCoprime, seed).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabc);
            let m = random_coprime_message(&key.n_mod, &mut rng);
            for k in 1..(1u32 << t) {
                let (sig, _) = sign_with_fault(&key, &m, t, FaultPlan::PrecompSkip(k)).unwrap();
                let deficit = fault_deficit(&key, t, k).unwrap();
                let want = modexp_oracle(&m, &(&key.d - &deficit), &key.n_mod);
                assert_eq!(sig, want, "seed={seed} t={t} k={k}");
            }
        }
    }

    #[test]
    fn silent_fault_when_union_empty() {
        // d = 0b0101... with t = 2 -> digits all in {0, 1}; skipping k = 2 or
        // 3 removes nothing.
        let key = textbook_key();
        let w = decompose(&key.d, 3, key.n_bits).unwrap();
        let max_digit = *w.digits.iter().max().unwrap();
        let m = BigUint::from(11u32);
        let (correct, _) = sign_with_fault(&key, &m, 3, FaultPlan::None).unwrap();
        for k in (max_digit + 1)..(1u32 << 3) {
            let (sig, _) = sign_with_fault(&key, &m, 3, FaultPlan::PrecompSkip(k)).unwrap();
            assert_eq!(sig, correct, "k={k} should be silent");
        }
    }

    #[test]
    fn trace_counts_and_fault_delta() {
        let key = generate_keypair(64, &EPolicy::fixed(65537), 9).unwrap();
        let m = BigUint::from(5u32);
        for t in [1u32, 2, 4, 8] {
            let (_, trace) = sign_with_fault(&key, &m, t, FaultPlan::None).unwrap();
            let squares = trace.events.iter().filter(|e| matches!(e, Event::Square)).count();
            let mults = trace.events.iter().filter(|e| matches!(e, Event::Multiply)).count();
            let pre = trace
                .events
                .iter()
                .filter(|e| matches!(e, Event::PrecompMultiply))
                .count();
            let w = decompose(&key.d, t, key.n_bits).unwrap();
            let nonzero = w.digits.iter().filter(|&&x| x != 0).count();
            // 64 is divisible by each t here, so the square count is exactly n.
            assert_eq!(squares as u64, key.n_bits);
            assert_eq!(mults, nonzero);
            assert_eq!(pre as u32, (1u32 << t) - 1);

            // A precomp fault removes exactly one event.
            let (_, faulted) = sign_with_fault(&key, &m, t, FaultPlan::PrecompSkip(1)).unwrap();
            assert_eq!(faulted.events.len() + 1, trace.events.len());
        }
    }

    #[test]
    fn collect_textbook_exponents() {
        let key = textbook_key();
        let m = BigUint::from(5u32);
        let fs = collect_dca_signatures(&key, &m, 2).unwrap();
        assert_eq!(fs.sigs.len(), 3);
        let n = &key.n_mod;
        let expected = [(1u32, 1408u32), (2, 1409), (3, 2689)];
        for (k, exp) in expected {
            assert_eq!(fs.sig(k), &modexp_oracle(&m, &BigUint::from(exp), n), "k={k}");
        }
        assert_eq!(fs.correct, modexp_oracle(&m, &BigUint::from(2753u32), n));
        assert_eq!(fs.sig(4), &fs.correct);
    }

    #[test]
    fn collect_t1_all_ones_degenerates() {
        // d = 0b111 = 7: all binary digits are 1, so the single t = 1 fault
        // strips the whole exponent.
        let key = KeyPair::from_primes(
            &BigUint::from(11u32),
            &BigUint::from(17u32),
            &BigUint::from(23u32),
        )
        .unwrap();
        assert_eq!(key.d, BigUint::from(7u32));
        let m = BigUint::from(3u32);
        let fs = collect_dca_signatures(&key, &m, 1).unwrap();
        assert_eq!(fs.sigs.len(), 1);
        assert_eq!(fs.sig(1), &BigUint::one());
    }

    #[test]
    fn collect_count_t4() {
        let key = generate_keypair(32, &EPolicy::RandomCoprime, 31).unwrap();
        let m = BigUint::from(3u32);
        let fs = collect_dca_signatures(&key, &m, 4).unwrap();
        assert_eq!(fs.sigs.len(), 15);
    }

    #[test]
    fn infer_t_from_traces() {
        let key = generate_keypair(64, &EPolicy::fixed(65537), 12).unwrap();
        let m = BigUint::from(5u32);
        for t in [2u32, 3, 4] {
            let (_, trace) = sign_with_fault(&key, &m, t, FaultPlan::None).unwrap();
            assert_eq!(infer_t(&trace).unwrap(), t);
            assert!(precomp_consistent(&trace, t));
        }
        // A constructed trace with a merged run of 2t still yields t.
        let trace = EventTrace::from_compact_string("PPPSSMSSSSMSSM").unwrap();
        assert_eq!(infer_t(&trace).unwrap(), 2);
        assert!(precomp_consistent(&trace, 2));

        let empty = EventTrace::from_compact_string("PPP").unwrap();
        assert!(infer_t(&empty).is_err());
    }

    #[test]
    fn trace_round_trips_compact_string() {
        let key = textbook_key();
        let (_, trace) = sign_with_fault(&key, &BigUint::from(5u32), 2, FaultPlan::None).unwrap();
        let s = trace.to_compact_string();
        assert_eq!(EventTrace::from_compact_string(&s).unwrap(), trace);
        assert!(s.starts_with("PPP"));
    }
}
