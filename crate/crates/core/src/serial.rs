//! Wire formats: key files, faulted-signature sets, and attack transcripts.
//! Big integers travel as lowercase big-endian hex; field order is fixed by
//! the struct definitions so identical inputs serialize byte-identically.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::attack::{Commit, RecoveredExponent};
use crate::error::{Error, Result};
use crate::fault::FaultedSignatureSet;
use crate::rsa::KeyPair;
use crate::small_e::SmallEResult;

pub fn to_hex(x: &BigUint) -> String {
    x.to_str_radix(16)
}

pub fn from_hex(s: &str) -> Result<BigUint> {
    BigUint::from_str_radix(s, 16)
        .map_err(|e| Error::InvalidParameter(format!("bad hex integer {s:?}: {e}")))
}

/// Key material file: {"p","q","n_mod","e","d","t","nbits"}.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct KeyFile {
    pub p: String,
    pub q: String,
    pub n_mod: String,
    pub e: String,
    pub d: String,
    pub t: u32,
    pub nbits: u64,
}

impl KeyFile {
    pub fn new(key: &KeyPair, t: u32) -> KeyFile {
        KeyFile {
            p: to_hex(&key.p),
            q: to_hex(&key.q),
            n_mod: to_hex(&key.n_mod),
            e: to_hex(&key.e),
            d: to_hex(&key.d),
            t,
            nbits: key.n_bits,
        }
    }

    pub fn to_keypair(&self) -> Result<KeyPair> {
        let key =
            KeyPair::from_primes(&from_hex(&self.p)?, &from_hex(&self.q)?, &from_hex(&self.e)?)?;
        if to_hex(&key.d) != self.d {
            return Err(Error::InvalidParameter("stored d disagrees with p, q, e".into()));
        }
        if key.n_bits != self.nbits {
            return Err(Error::InvalidParameter("stored nbits disagrees with p*q".into()));
        }
        Ok(key)
    }
}

/// {"t","m","n_mod","sigs":{k:hex},"correct":hex}
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FaultedSignatureSetFile {
    pub t: u32,
    pub m: String,
    pub n_mod: String,
    pub sigs: BTreeMap<u32, String>,
    pub correct: String,
}

impl FaultedSignatureSetFile {
    pub fn new(fs: &FaultedSignatureSet) -> FaultedSignatureSetFile {
        FaultedSignatureSetFile {
            t: fs.t,
            m: to_hex(&fs.m),
            n_mod: to_hex(&fs.n_mod),
            sigs: fs.sigs.iter().map(|(&k, s)| (k, to_hex(s))).collect(),
            correct: to_hex(&fs.correct),
        }
    }

    pub fn to_set(&self) -> Result<FaultedSignatureSet> {
        let mut sigs = BTreeMap::new();
        for (&k, s) in &self.sigs {
            sigs.insert(k, from_hex(s)?);
        }
        Ok(FaultedSignatureSet {
            t: self.t,
            m: from_hex(&self.m)?,
            n_mod: from_hex(&self.n_mod)?,
            sigs,
            correct: from_hex(&self.correct)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TranscriptParams {
    pub nbits: u64,
    pub t: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CommitRecord {
    pub z: usize,
    pub blocks: Vec<usize>,
    pub coeff: u32,
    pub work_count: u64,
}

impl From<&Commit> for CommitRecord {
    fn from(c: &Commit) -> CommitRecord {
        CommitRecord {
            z: c.z,
            blocks: c.blocks.clone(),
            coeff: c.coeff,
            work_count: c.work_count,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SmallERecord {
    pub k: u64,
    pub trusted_bit: u64,
    pub filled_blocks: usize,
    pub candidates_tested: u64,
}

impl SmallERecord {
    pub fn new(res: &SmallEResult, filled_blocks: usize) -> SmallERecord {
        SmallERecord {
            k: res.k,
            trusted_bit: res.trusted_bit,
            filled_blocks,
            candidates_tested: res.candidates_tested,
        }
    }
}

/// One attack trial. `elapsed_ms` is the only nondeterministic field and is
/// kept on its own line at the end so reruns can be compared without it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Transcript {
    pub params: TranscriptParams,
    pub checkers: BTreeMap<u32, String>,
    pub commits: Vec<CommitRecord>,
    pub d_hat: String,
    pub verified: bool,
    /// In simulation the generator's d is known; recorded because d_hat may
    /// differ from d by a multiple of ord_N(M) in adversarial cases.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_match: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub small_e: Option<SmallERecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub elapsed_ms: u64,
}

impl Transcript {
    pub fn from_recovery(
        params: TranscriptParams,
        checkers: &BTreeMap<u32, BigUint>,
        rec: &RecoveredExponent,
    ) -> Transcript {
        Transcript {
            params,
            checkers: checkers.iter().map(|(&l, v)| (l, to_hex(v))).collect(),
            commits: rec.commits.iter().map(CommitRecord::from).collect(),
            d_hat: to_hex(&rec.d_hat),
            verified: rec.verified,
            d_match: None,
            small_e: None,
            note: None,
            elapsed_ms: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}
