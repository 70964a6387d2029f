//! The attacker's side: position checkers built from faulted-signature
//! ratios, the multiplicity-ascending d-search over candidate position sets,
//! final verification, and the per-block naive attack baseline.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_traits::One;

use crate::error::{Error, Result};
use crate::fault::{sign_with_fault, FaultedSignatureSet, FaultPlan};
use crate::rsa::{mod_inverse, modexp_oracle, position_exponent, recompose, KeyPair, WindowedExponent};

/// Checker values C_{t,l}(M) = M^{d[t, P_l]} mod N for l in [1, 2^t - 1],
/// plus the correct signature used for final verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionCheckerSet {
    pub t: u32,
    pub m: BigUint,
    pub n_mod: BigUint,
    pub correct: BigUint,
    /// l -> C_{t,l}(M)
    pub values: BTreeMap<u32, BigUint>,
}

/// Derives checkers as ratios of consecutive faulted signatures, with the
/// correct signature standing in at index 2^t.
pub fn build_checkers(fs: &FaultedSignatureSet) -> Result<PositionCheckerSet> {
    let w = 1u32 << fs.t;
    let mut values = BTreeMap::new();
    for k in 1..w {
        let inv = mod_inverse(fs.sig(k), &fs.n_mod)?;
        values.insert(k, fs.sig(k + 1) * inv % &fs.n_mod);
    }
    Ok(PositionCheckerSet {
        t: fs.t,
        m: fs.m.clone(),
        n_mod: fs.n_mod.clone(),
        correct: fs.correct.clone(),
        values,
    })
}

/// True iff M^{d[t, candidate]} equals the checker value for coefficient l.
pub fn subset_pass_check(
    candidate: &[usize],
    coeff: u32,
    checkers: &PositionCheckerSet,
) -> bool {
    let exp = position_exponent(candidate, checkers.t);
    modexp_oracle(&checkers.m, &exp, &checkers.n_mod) == checkers.values[&coeff]
}

/// One committed position set during the search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub z: usize,
    pub blocks: Vec<usize>,
    pub coeff: u32,
    /// Cumulative subset tests performed when this commit landed.
    pub work_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Subset tests per multiplicity level z (index z - 1).
    pub tests_per_level: Vec<u64>,
    /// Commits per multiplicity level z (index z - 1).
    pub passes_per_level: Vec<u64>,
    pub total_tests: u64,
}

/// Search outcome: the assembled digit vector, its integer value, and the
/// verification verdict M^{d_hat} == S.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveredExponent {
    pub digits: Vec<u32>,
    pub d_hat: BigUint,
    pub verified: bool,
    pub commits: Vec<Commit>,
    /// Coefficients never matched before the multiplicity limit ran out.
    pub unfound: Vec<u32>,
    pub stats: SearchStats,
}

/// Incremental d-search state. Blocks may be prefilled (by the small-e
/// acceleration) before or between multiplicity levels; a prefill divides
/// the affected checker down to the residual the remaining blocks must
/// explain.
pub struct Searcher {
    t: u32,
    n_mod: BigUint,
    correct: BigUint,
    m: BigUint,
    /// block_pow[j] = M^{(2^t)^j} mod N
    block_pow: Vec<BigUint>,
    /// l -> remaining checker value after prefills
    residual: BTreeMap<u32, BigUint>,
    /// l -> position set already fully explained
    found: BTreeMap<u32, bool>,
    de: Vec<Option<u32>>,
    commits: Vec<Commit>,
    stats: SearchStats,
}

impl Searcher {
    pub fn new(checkers: &PositionCheckerSet, b: usize) -> Searcher {
        let mut block_pow = Vec::with_capacity(b);
        let mut cur = checkers.m.clone() % &checkers.n_mod;
        for _ in 0..b {
            block_pow.push(cur.clone());
            for _ in 0..checkers.t {
                cur = &cur * &cur % &checkers.n_mod;
            }
        }
        let found = checkers.values.keys().map(|&l| (l, false)).collect();
        Searcher {
            t: checkers.t,
            n_mod: checkers.n_mod.clone(),
            correct: checkers.correct.clone(),
            m: checkers.m.clone(),
            block_pow,
            residual: checkers.values.clone(),
            found,
            de: vec![None; b],
            commits: Vec::new(),
            stats: SearchStats::default(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.de.len()
    }

    pub fn digit(&self, j: usize) -> Option<u32> {
        self.de[j]
    }

    pub fn committed(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.de.iter().enumerate().filter_map(|(j, d)| d.map(|d| (j, d)))
    }

    /// Assigns a digit out-of-band and divides its checker residual.
    pub fn prefill(&mut self, j: usize, digit: u32) -> Result<()> {
        if self.de[j].is_some() {
            return Err(Error::InvalidParameter(format!("block {j} already assigned")));
        }
        self.de[j] = Some(digit);
        if digit != 0 {
            let inv = mod_inverse(&self.block_pow[j], &self.n_mod)?;
            let r = self.residual.get_mut(&digit).expect("digit has a checker");
            *r = &*r * inv % &self.n_mod;
        }
        Ok(())
    }

    fn unknown_blocks(&self) -> Vec<usize> {
        (0..self.de.len()).filter(|&j| self.de[j].is_none()).collect()
    }

    /// Coefficients whose residual is already 1 need no further blocks.
    fn settle_exhausted(&mut self) {
        for (&l, f) in self.found.iter_mut() {
            if !*f && self.residual[&l].is_one() {
                *f = true;
            }
        }
    }

    /// Runs one multiplicity level: every z-subset of still-unknown blocks,
    /// in ascending colexicographic order, against every unfound coefficient
    /// in ascending order. First pass commits; blocks consumed mid-level are
    /// skipped by later subsets.
    pub fn run_level(&mut self, z: usize) {
        self.settle_exhausted();
        while self.stats.tests_per_level.len() < z {
            self.stats.tests_per_level.push(0);
            self.stats.passes_per_level.push(0);
        }
        let pool = self.unknown_blocks();
        if z == 0 || pool.len() < z {
            return;
        }
        if self.found.values().all(|&f| f) {
            return;
        }
        // Colex successor enumeration over indices into `pool`.
        let mut idx: Vec<usize> = (0..z).collect();
        loop {
            let blocks: Vec<usize> = idx.iter().map(|&i| pool[i]).collect();
            if blocks.iter().all(|&j| self.de[j].is_none()) {
                let mut value = BigUint::one();
                for &j in &blocks {
                    value = value * &self.block_pow[j] % &self.n_mod;
                }
                self.stats.tests_per_level[z - 1] += 1;
                self.stats.total_tests += 1;
                let hit = self
                    .found
                    .iter()
                    .filter(|(_, &f)| !f)
                    .map(|(&l, _)| l)
                    .find(|l| self.residual[l] == value);
                if let Some(l) = hit {
                    for &j in &blocks {
                        self.de[j] = Some(l);
                    }
                    self.found.insert(l, true);
                    self.stats.passes_per_level[z - 1] += 1;
                    self.commits.push(Commit {
                        z,
                        blocks,
                        coeff: l,
                        work_count: self.stats.total_tests,
                    });
                    if self.found.values().all(|&f| f) {
                        return;
                    }
                }
            }
            // Advance to the colex successor.
            let mut i = 0;
            while i < z {
                let limit = if i + 1 < z { idx[i + 1] } else { pool.len() };
                if idx[i] + 1 < limit {
                    idx[i] += 1;
                    for (r, slot) in idx.iter_mut().enumerate().take(i) {
                        *slot = r;
                    }
                    break;
                }
                i += 1;
            }
            if i == z {
                return;
            }
        }
    }

    /// Assigns the remaining unknown blocks to coefficient 0, recomposes and
    /// verifies against the correct signature.
    pub fn finish(mut self) -> RecoveredExponent {
        self.settle_exhausted();
        let digits: Vec<u32> = self.de.iter().map(|d| d.unwrap_or(0)).collect();
        let w = WindowedExponent { t: self.t, digits: digits.clone() };
        let d_hat = recompose(&w);
        let verified = modexp_oracle(&self.m, &d_hat, &self.n_mod) == self.correct;
        let unfound: Vec<u32> =
            self.found.iter().filter(|(_, &f)| !f).map(|(&l, _)| l).collect();
        RecoveredExponent {
            digits,
            d_hat,
            verified,
            commits: self.commits,
            unfound,
            stats: self.stats,
        }
    }
}

/// Full d-search: multiplicity levels z = 1..=lmt in ascending order, then
/// complement assignment of coefficient 0 and verification.
pub fn d_search(checkers: &PositionCheckerSet, b: usize, lmt: usize) -> Result<RecoveredExponent> {
    if lmt < 1 || lmt > b {
        return Err(Error::InvalidParameter(format!("Lmt = {lmt} out of [1, B = {b}]")));
    }
    let mut s = Searcher::new(checkers, b);
    for z in 1..=lmt {
        s.run_level(z);
    }
    Ok(s.finish())
}

/// True iff M^{d_hat} == S mod N.
pub fn verify_recovery(d_hat: &BigUint, m: &BigUint, s: &BigUint, n_mod: &BigUint) -> bool {
    &modexp_oracle(m, d_hat, n_mod) == s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveOutcome {
    pub digits: Vec<u32>,
    pub injections: usize,
}

/// The per-block baseline: skip the loop multiplication at every block and
/// read the digit off S * S_j^{-1} by comparison against M^{l (2^t)^j}.
pub fn naive_attack(key: &KeyPair, m: &BigUint, t: u32, b: usize) -> Result<NaiveOutcome> {
    let (correct, _) = sign_with_fault(key, m, t, FaultPlan::None)?;
    let w = 1u32 << t;
    let mut digits = Vec::with_capacity(b);
    for j in 0..b {
        let (faulted, _) = sign_with_fault(key, m, t, FaultPlan::LoopSkip(j))?;
        let ratio = &correct * mod_inverse(&faulted, &key.n_mod)? % &key.n_mod;
        let mut step = BigUint::one();
        for _ in 0..(t as u64 * j as u64) {
            step = &step << 1;
        }
        let digit = (0..w).find(|&l| {
            modexp_oracle(m, &(BigUint::from(l) * &step), &key.n_mod) == ratio
        });
        match digit {
            Some(l) => digits.push(l),
            None => {
                return Err(Error::FaultModel(format!(
                    "no coefficient matches the block-{j} ratio"
                )))
            }
        }
    }
    Ok(NaiveOutcome { digits, injections: b })
}

/// Injection count from the cost discussion: the MSB block can be deduced
/// from the correct signature, so ceil(n/t) - 1 skips suffice.
pub fn naive_injection_bound(n: u64, t: u32) -> u64 {
    n.div_ceil(t as u64) - 1
}
