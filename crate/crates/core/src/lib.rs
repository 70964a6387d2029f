//! A desk-scale laboratory for fault attacks on the windowed (2^t-ary)
//! classical-RSA signer: the signer itself, an instruction-skip fault
//! simulator, the double-counting key-recovery attack with its small-e
//! acceleration, closed-form cost/probability models, and software
//! countermeasures with campaign-level evaluation.

pub mod analysis;
pub mod attack;
pub mod error;
pub mod fault;
pub mod protect;
pub mod rsa;
pub mod serial;
pub mod small_e;

pub use analysis::{
    binomial, countermeasure_space_bits, cumulative, digit_moments, empirical_digit_histogram,
    expected_counts, optimal_t, pass_probability, pmf, round1, round3sig, search_space_bits, tau,
    tau_components, ExpectedCounts, Histogram,
};
pub use attack::{
    build_checkers, d_search, naive_attack, subset_pass_check, verify_recovery, Commit,
    PositionCheckerSet, RecoveredExponent, Searcher,
};
pub use error::{Error, Result};
pub use fault::{
    collect_dca_signatures, fault_deficit, faulted_precompute, infer_t, precomp_consistent,
    sign_exponent_with_fault, sign_with_fault, Event, EventTrace, FaultPlan, FaultedSignatureSet,
    FaultedTable,
};
pub use protect::{
    evaluate_countermeasure, inverse_check, randomize_exponent, sign_protected,
    theorem1_condition, AttackKind, DetectionReport, ProtectedDevice, ProtectedResult,
    ProtectionConfig, ProtectionMode, RandomizationScope,
};
pub use rsa::{
    decompose, generate_keypair, is_probable_prime, mod_inverse, modexp_oracle, position_exponent,
    position_sets, precompute_table, random_coprime_message, recompose, sign_2t_ary, EPolicy,
    KeyPair, PositionSets, PrecompTable, WindowedExponent,
};
pub use serial::{
    from_hex, to_hex, CommitRecord, FaultedSignatureSetFile, KeyFile, SmallERecord, Transcript,
    TranscriptParams,
};
pub use small_e::{
    accelerated_search, recover_k, trusted_boundary, upper_bits_from_k, AcceleratedRecovery,
    SmallEResult, DEFAULT_GUARD_BITS,
};
