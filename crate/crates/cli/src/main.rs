//! Batch experiment driver. Exit codes: 0 success, 2 unverified recovery,
//! 3 attack blocked by a countermeasure, 64 usage / precondition error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dca_core::{
    accelerated_search, build_checkers, collect_dca_signatures, countermeasure_space_bits,
    cumulative, d_search, decompose, evaluate_countermeasure, from_hex, generate_keypair,
    modexp_oracle, naive_attack, random_coprime_message, round1, search_space_bits, sign_2t_ary,
    tau, to_hex, AttackKind, DetectionReport, EPolicy, FaultedSignatureSetFile, KeyFile, KeyPair,
    ProtectionConfig, ProtectionMode, RandomizationScope, SmallERecord, Transcript,
    TranscriptParams, DEFAULT_GUARD_BITS,
};

const EXIT_UNVERIFIED: u8 = 2;
const EXIT_DETECTED: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "dca", about = "Fault-attack experiments on the windowed RSA signer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a key pair and write it as JSON.
    Keygen(KeygenArgs),
    /// Sign a message with the windowed signer (fault-free).
    Sign(SignArgs),
    /// Collect the faulted signature set for a key.
    Inject(InjectArgs),
    /// Run seeded key-recovery campaigns and write per-trial transcripts.
    Attack(CampaignArgs),
    /// Emit cost/probability tables as CSV.
    Analyze(AnalyzeArgs),
    /// Evaluate a countermeasure against full attack campaigns.
    ProtectEval(ProtectArgs),
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    nbits: u64,
    #[arg(long, default_value_t = 4)]
    t: u32,
    #[arg(long, default_value_t = 65537)]
    e: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SignArgs {
    /// Key file produced by keygen.
    #[arg(long)]
    key: PathBuf,
    /// Message as lowercase hex; a seeded random coprime message when omitted.
    #[arg(long)]
    message: Option<String>,
    #[arg(long)]
    t: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    message: Option<String>,
    #[arg(long)]
    t: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CampaignArgs {
    /// JSON spec file; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    nbits: Option<u64>,
    #[arg(long)]
    t: Option<u32>,
    #[arg(long)]
    e: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Multiplicity limit; defaults to the block count B.
    #[arg(long)]
    lmt: Option<usize>,
    /// Use the small-e acceleration.
    #[arg(long)]
    small_e: bool,
    /// dca (default), naive, or dca+small-e via --small-e.
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    /// Directory for per-trial transcripts and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Run trials on the rayon thread pool. Output is identical either way.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Emit the windowed-signer cost table (n x t, one decimal).
    #[arg(long)]
    table1: bool,
    /// Emit search-space size / tail probability rows for one (nbits, t).
    #[arg(long)]
    dist: bool,
    #[arg(long)]
    nbits: Option<u64>,
    #[arg(long)]
    t: Option<u32>,
    /// Highest multiplicity for --dist rows and the blinded-space figure.
    #[arg(long, default_value_t = 20)]
    zmax: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtectModeArg {
    None,
    RecomputeSharedPrecomp,
    RecomputeFull,
    InverseCheck,
    ExponentRandomization,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    PerSession,
    PerSignature,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    Dca,
    Naive,
}

#[derive(Args)]
struct ProtectArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    protect: Option<ProtectModeArg>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
    #[arg(long)]
    r_bits: Option<u64>,
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    #[arg(long)]
    nbits: Option<u64>,
    #[arg(long)]
    t: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Spec-file form of a campaign; every field optional, flags override.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSpec {
    nbits: Option<u64>,
    t: Option<u32>,
    e: Option<u64>,
    seed: Option<u64>,
    trials: Option<u64>,
    lmt: Option<usize>,
    attack: Option<String>,
    protect: Option<String>,
    scope: Option<String>,
    r_bits: Option<u64>,
    out: Option<PathBuf>,
    format: Option<String>,
}

fn load_spec(path: &Option<PathBuf>) -> anyhow::Result<ExperimentSpec> {
    match path {
        None => Ok(ExperimentSpec::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| {
                dca_core::Error::InvalidParameter(format!("spec {}: {e}", p.display())).into()
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.cmd {
        Cmd::Keygen(a) => cmd_keygen(a),
        Cmd::Sign(a) => cmd_sign(a),
        Cmd::Inject(a) => cmd_inject(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::ProtectEval(a) => cmd_protect_eval(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<dca_core::Error>()
                .is_some_and(|err| matches!(err, dca_core::Error::InvalidParameter(_)));
            ExitCode::from(if usage { EXIT_USAGE } else { 1 })
        }
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_keygen(a: KeygenArgs) -> anyhow::Result<u8> {
    let key = generate_keypair(a.nbits, &EPolicy::fixed(a.e), a.seed)?;
    let file = KeyFile::new(&key, a.t);
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write_or_print(&a.out, &json)?;
    Ok(0)
}

fn load_key(path: &Path) -> anyhow::Result<(KeyPair, u32)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: KeyFile =
        serde_json::from_str(&text).with_context(|| format!("parsing key {}", path.display()))?;
    Ok((file.to_keypair()?, file.t))
}

fn message_for(key: &KeyPair, message: &Option<String>, seed: u64) -> anyhow::Result<BigUint> {
    match message {
        Some(hex) => Ok(from_hex(hex)?),
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Ok(random_coprime_message(&key.n_mod, &mut rng))
        }
    }
}

fn cmd_sign(a: SignArgs) -> anyhow::Result<u8> {
    let (key, file_t) = load_key(&a.key)?;
    let t = a.t.unwrap_or(file_t);
    let m = message_for(&key, &a.message, a.seed)?;
    let w = decompose(&key.d, t, key.n_bits)?;
    let table = dca_core::precompute_table(&m, t, &key.n_mod)?;
    let s = sign_2t_ary(&w, &key.n_mod, &table)?;
    println!("{{\"m\":\"{}\",\"s\":\"{}\"}}", to_hex(&m), to_hex(&s));
    Ok(0)
}

fn cmd_inject(a: InjectArgs) -> anyhow::Result<u8> {
    let (key, file_t) = load_key(&a.key)?;
    let t = a.t.unwrap_or(file_t);
    let m = message_for(&key, &a.message, a.seed)?;
    let fs = collect_dca_signatures(&key, &m, t)?;
    let mut json = serde_json::to_string_pretty(&FaultedSignatureSetFile::new(&fs))?;
    json.push('\n');
    write_or_print(&a.out, &json)?;
    Ok(0)
}

struct TrialOutcome {
    transcript: Transcript,
    verified: bool,
    d_match: bool,
    total_tests: u64,
}

fn run_trial(
    nbits: u64,
    t: u32,
    e: u64,
    seed: u64,
    lmt: usize,
    small_e: bool,
    naive: bool,
) -> anyhow::Result<TrialOutcome> {
    let start = Instant::now();
    let key = generate_keypair(nbits, &EPolicy::fixed(e), seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d73_6721);
    let m = random_coprime_message(&key.n_mod, &mut rng);
    if naive {
        return run_naive_trial(start, key, m, nbits, t, seed);
    }
    let fs = collect_dca_signatures(&key, &m, t)?;
    let checkers = build_checkers(&fs)?;
    let b = nbits.div_ceil(t as u64) as usize;
    let params = TranscriptParams { nbits, t, seed };

    let (rec, small_e_rec, note) = if small_e {
        let acc = accelerated_search(&checkers, b, lmt.min(b), &key.e, DEFAULT_GUARD_BITS)?;
        let rec_note = acc.fell_back.then(|| "small-e path fell back to the plain search".into());
        let se = acc.small_e.as_ref().map(|r| SmallERecord::new(r, acc.filled_blocks));
        (acc.recovery, se, rec_note)
    } else {
        (d_search(&checkers, b, lmt.min(b))?, None, None)
    };

    let mut transcript = Transcript::from_recovery(params, &checkers.values, &rec);
    let d_match = rec.d_hat == key.d;
    transcript.d_match = Some(d_match);
    transcript.small_e = small_e_rec;
    transcript.note = note;
    transcript.elapsed_ms = start.elapsed().as_millis() as u64;
    // Transcript self-check: verified must agree with M^d_hat == S.
    debug_assert_eq!(rec.verified, modexp_oracle(&m, &rec.d_hat, &key.n_mod) == fs.correct);
    Ok(TrialOutcome {
        verified: rec.verified,
        d_match,
        total_tests: rec.stats.total_tests,
        transcript,
    })
}

fn run_naive_trial(
    start: Instant,
    key: KeyPair,
    m: BigUint,
    nbits: u64,
    t: u32,
    seed: u64,
) -> anyhow::Result<TrialOutcome> {
    let b = nbits.div_ceil(t as u64) as usize;
    let out = naive_attack(&key, &m, t, b)?;
    let d_hat = dca_core::recompose(&dca_core::WindowedExponent { t, digits: out.digits });
    let correct = modexp_oracle(&m, &key.d, &key.n_mod);
    let verified = modexp_oracle(&m, &d_hat, &key.n_mod) == correct;
    let d_match = d_hat == key.d;
    let mut transcript = Transcript {
        params: TranscriptParams { nbits, t, seed },
        checkers: BTreeMap::new(),
        commits: Vec::new(),
        d_hat: to_hex(&d_hat),
        verified,
        d_match: Some(d_match),
        small_e: None,
        note: Some(format!("naive per-block attack, {} injections", out.injections)),
        elapsed_ms: 0,
    };
    transcript.elapsed_ms = start.elapsed().as_millis() as u64;
    Ok(TrialOutcome { transcript, verified, d_match, total_tests: out.injections as u64 })
}

fn cmd_attack(a: CampaignArgs) -> anyhow::Result<u8> {
    let spec = load_spec(&a.spec)?;
    let nbits = a.nbits.or(spec.nbits).unwrap_or(128);
    let t = a.t.or(spec.t).unwrap_or(4);
    let e = a.e.or(spec.e).unwrap_or(65537);
    let seed = a.seed.or(spec.seed).unwrap_or(0);
    let trials = a.trials.or(spec.trials).unwrap_or(1);
    let b = nbits.div_ceil(t as u64) as usize;
    let lmt = a.lmt.or(spec.lmt).unwrap_or(b);
    let small_e = a.small_e || spec.attack.as_deref() == Some("dca+small_e");
    let naive = matches!(a.attack, Some(AttackArg::Naive))
        || (a.attack.is_none() && spec.attack.as_deref() == Some("naive"));
    if naive && small_e {
        bail!("--small-e does not apply to the naive attack");
    }
    let out = a.out.clone().or(spec.out);
    let format = match (a.format, spec.format.as_deref()) {
        (Some(f), _) => f,
        (None, Some("json")) => Format::Json,
        (None, Some("csv")) | (None, None) => Format::Csv,
        (None, Some(other)) => bail!("spec format {other:?} is not csv or json"),
    };

    let seeds: Vec<u64> = (0..trials).map(|i| seed.wrapping_add(i)).collect();
    let run = |s: &u64| run_trial(nbits, t, e, *s, lmt, small_e, naive);
    let outcomes: Vec<TrialOutcome> = if a.parallel {
        seeds.par_iter().map(run).collect::<anyhow::Result<_>>()?
    } else {
        seeds.iter().map(run).collect::<anyhow::Result<_>>()?
    };

    let mut all_verified = true;
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
        let mut summary_rows = Vec::new();
        for (i, o) in outcomes.iter().enumerate() {
            let mut json = o.transcript.to_json();
            json.push('\n');
            fs::write(dir.join(format!("trial_{i:04}.json")), json)?;
            summary_rows.push((i, o));
        }
        match format {
            Format::Csv => {
                let mut csv = String::from("trial,seed,verified,d_match,total_tests,elapsed_ms\n");
                for (i, o) in &summary_rows {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        i,
                        o.transcript.params.seed,
                        o.verified,
                        o.d_match,
                        o.total_tests,
                        o.transcript.elapsed_ms
                    ));
                }
                fs::write(dir.join("summary.csv"), csv)?;
            }
            Format::Json => {
                let rows: Vec<serde_json::Value> = summary_rows
                    .iter()
                    .map(|(i, o)| {
                        serde_json::json!({
                            "trial": i,
                            "seed": o.transcript.params.seed,
                            "verified": o.verified,
                            "d_match": o.d_match,
                            "total_tests": o.total_tests,
                            "elapsed_ms": o.transcript.elapsed_ms,
                        })
                    })
                    .collect();
                fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
            }
        }
    }
    for (i, o) in outcomes.iter().enumerate() {
        println!(
            "trial {i}: verified={} d_match={} tests={} ({} ms)",
            o.verified, o.d_match, o.total_tests, o.transcript.elapsed_ms
        );
        all_verified &= o.verified && o.d_match;
    }
    Ok(if all_verified { 0 } else { EXIT_UNVERIFIED })
}

fn cmd_analyze(a: AnalyzeArgs) -> anyhow::Result<u8> {
    if !a.table1 && !a.dist {
        bail!("analyze needs --table1 and/or --dist");
    }
    let mut text = String::new();
    if a.table1 {
        text.push_str("n,t,tau\n");
        for n in [1024u64, 1536, 2048] {
            for t in 3..=8u32 {
                text.push_str(&format!("{n},{t},{:.1}\n", round1(&tau(n, t))));
            }
        }
    }
    if a.dist {
        let (Some(nbits), Some(t)) = (a.nbits, a.t) else {
            bail!("--dist needs --nbits and --t");
        };
        let b = nbits.div_ceil(t as u64);
        let w = 1u64 << t;
        text.push_str("z,space_bits,cumulative_prob\n");
        for z in 1..=a.zmax {
            let prob = cumulative(b, z, w).to_f64().unwrap_or(f64::NAN);
            text.push_str(&format!("{z},{:.4},{prob:.6}\n", search_space_bits(b, z)));
        }
        text.push_str(&format!(
            "blinded_space_bits,{:.4}\n",
            countermeasure_space_bits(nbits, t, a.zmax)
        ));
    }
    write_or_print(&a.out, &text)?;
    Ok(0)
}

fn cmd_protect_eval(a: ProtectArgs) -> anyhow::Result<u8> {
    let spec = load_spec(&a.spec)?;
    let mode = match a.protect {
        Some(m) => m,
        None => match spec.protect.as_deref() {
            None | Some("none") => ProtectModeArg::None,
            Some("recompute_shared_precomp") => ProtectModeArg::RecomputeSharedPrecomp,
            Some("recompute_full") => ProtectModeArg::RecomputeFull,
            Some("inverse_check") => ProtectModeArg::InverseCheck,
            Some("exponent_randomization") => ProtectModeArg::ExponentRandomization,
            Some(other) => bail!("unknown protection mode {other:?} in spec"),
        },
    };
    let scope = match (a.scope, spec.scope.as_deref()) {
        (Some(s), _) => Some(s),
        (None, Some("per_session")) => Some(ScopeArg::PerSession),
        (None, Some("per_signature")) => Some(ScopeArg::PerSignature),
        (None, Some(other)) => bail!("unknown scope {other:?} in spec"),
        (None, None) => None,
    };
    let config = match mode {
        ProtectModeArg::None => ProtectionConfig::none(),
        ProtectModeArg::RecomputeSharedPrecomp => {
            ProtectionConfig::plain(ProtectionMode::RecomputeSharedPrecomp)
        }
        ProtectModeArg::RecomputeFull => ProtectionConfig::plain(ProtectionMode::RecomputeFull),
        ProtectModeArg::InverseCheck => ProtectionConfig::plain(ProtectionMode::InverseCheck),
        ProtectModeArg::ExponentRandomization => {
            let scope = match scope {
                Some(ScopeArg::PerSession) => RandomizationScope::PerSession,
                Some(ScopeArg::PerSignature) => RandomizationScope::PerSignature,
                None => bail!("exponent randomization needs --scope"),
            };
            ProtectionConfig::randomized(scope, a.r_bits.or(spec.r_bits).unwrap_or(16))
        }
    };
    let attack = match (a.attack, spec.attack.as_deref()) {
        (Some(AttackArg::Naive), _) | (None, Some("naive")) => AttackKind::Naive,
        _ => AttackKind::Dca,
    };
    let nbits = a.nbits.or(spec.nbits).unwrap_or(64);
    let t = a.t.or(spec.t).unwrap_or(4);
    let seed = a.seed.or(spec.seed).unwrap_or(0);
    let trials = a.trials.or(spec.trials).unwrap_or(10);

    let report = evaluate_countermeasure(&config, attack, trials, nbits, t, seed)?;
    emit_report(&a.out, &report)?;
    Ok(if report.attack_succeeded {
        0
    } else if report.detected > 0 {
        EXIT_DETECTED
    } else {
        EXIT_UNVERIFIED
    })
}

fn emit_report(out: &Option<PathBuf>, r: &DetectionReport) -> anyhow::Result<()> {
    let map = BTreeMap::from([
        ("trials", serde_json::json!(r.trials)),
        ("faults_injected", serde_json::json!(r.faults_injected)),
        ("detected", serde_json::json!(r.detected)),
        ("undetected", serde_json::json!(r.undetected)),
        ("silent", serde_json::json!(r.silent)),
        ("succeeded_trials", serde_json::json!(r.succeeded_trials)),
        ("attack_succeeded", serde_json::json!(r.attack_succeeded)),
        ("notes", serde_json::json!(r.notes)),
    ]);
    let mut json = serde_json::to_string_pretty(&map)?;
    json.push('\n');
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), &json)?;
        }
        None => print!("{json}"),
    }
    println!(
        "faults={} detected={} silent={} recovered={}/{} ({})",
        r.faults_injected,
        r.detected,
        r.silent,
        r.succeeded_trials,
        r.trials,
        if r.notes.is_empty() { "-" } else { &r.notes }
    );
    Ok(())
}
