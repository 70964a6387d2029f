use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use dca_core::{
    build_checkers, collect_dca_signatures, d_search, decompose, generate_keypair,
    precompute_table, random_coprime_message, sign_2t_ary, EPolicy,
};

fn bench_signer(c: &mut Criterion) {
    let mut group = c.benchmark_group("sign_2t_ary");
    for &(nbits, t) in &[(512u64, 4u32), (1024, 5), (1024, 6)] {
        let key = generate_keypair(nbits, &EPolicy::fixed(65537), 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let m = random_coprime_message(&key.n_mod, &mut rng);
        let w = decompose(&key.d, t, key.n_bits).unwrap();
        let table = precompute_table(&m, t, &key.n_mod).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("n{nbits}_t{t}")), |b| {
            b.iter(|| sign_2t_ary(&w, &key.n_mod, &table).unwrap())
        });
    }
    group.finish();
}

fn bench_collection(c: &mut Criterion) {
    let key = generate_keypair(256, &EPolicy::fixed(65537), 3).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let m = random_coprime_message(&key.n_mod, &mut rng);
    c.bench_function("collect_dca_signatures_n256_t4", |b| {
        b.iter(|| collect_dca_signatures(&key, &m, 4).unwrap())
    });
}

fn bench_recovery(c: &mut Criterion) {
    let mut group = c.benchmark_group("d_search");
    group.sample_size(20);
    for &nbits in &[128u64, 256] {
        let t = 4u32;
        let b_blocks = nbits.div_ceil(t as u64) as usize;
        let key = generate_keypair(nbits, &EPolicy::fixed(65537), 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let m = random_coprime_message(&key.n_mod, &mut rng);
        let fs = collect_dca_signatures(&key, &m, t).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("n{nbits}_t{t}")), |bn| {
            bn.iter_batched(
                || build_checkers(&fs).unwrap(),
                |ck| d_search(&ck, b_blocks, b_blocks).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_signer, bench_collection, bench_recovery);
criterion_main!(benches);
