use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use ghostline_bench::{bench_model, prefilled, tiny_model, tokens};
use ghostline_core::kv::{KvStore, SeqId};
use ghostline_core::radix::RadixCache;
use ghostline_core::splice::{kv_splice, SpliceConfig};

const LENGTHS: [usize; 3] = [64, 256, 512];

fn prefill(c: &mut Criterion) {
    let model = bench_model();
    let mut group = c.benchmark_group("prefill");
    group.sample_size(10);
    for len in LENGTHS {
        let ctx = tokens(0, len);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &ctx, |b, ctx| {
            b.iter_batched(
                || KvStore::for_model(model.config()).unwrap(),
                |mut kv| model.prefill(&mut kv, ctx, SeqId(0), 0).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let model = bench_model();
    let mut group = c.benchmark_group("decode_one");
    for len in LENGTHS {
        let ctx = tokens(1, len);
        let (mut kv, logits) = prefilled(&model, &ctx);
        let next = logits.argmax();
        group.bench_function(BenchmarkId::from_parameter(len), |b| {
            b.iter(|| {
                let out = model.decode_one(&mut kv, next, len, SeqId(0), true).unwrap();
                kv.seq_rm(SeqId(0), len..).unwrap();
                out
            })
        });
    }
    group.finish();
}

fn splice(c: &mut Criterion) {
    let model = tiny_model();
    let mut group = c.benchmark_group("splice_vs_prefill");
    let (p, m, s) = (tokens(2, 200), tokens(3, 24), tokens(4, 8));
    let b_ctx: Vec<_> = p.iter().chain(&s).copied().collect();
    let f_ctx: Vec<_> = p.iter().chain(&m).chain(&s).copied().collect();
    let config = SpliceConfig::default();
    group.bench_function("splice", |b| {
        b.iter_batched(
            || prefilled(&model, &b_ctx).0,
            |mut kv| kv_splice(&*model, &mut kv, SeqId(0), (&p, &m, &s), &config, None).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("full_prefill", |b| {
        b.iter_batched(
            || KvStore::for_model(model.config()).unwrap(),
            |mut kv| model.prefill(&mut kv, &f_ctx, SeqId(0), 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn radix_resume(c: &mut Criterion) {
    let model = tiny_model();
    let mut group = c.benchmark_group("radix_resume");
    let ctx = tokens(5, 400);
    let mut kv = KvStore::for_model(model.config()).unwrap();
    let mut radix = RadixCache::new(None);
    let target = kv.alloc_seq().unwrap();
    radix.resume_prefill(&*model, &mut kv, &ctx, target).unwrap();
    let mut extended = ctx.clone();
    extended.extend(tokens(6, 4));
    group.bench_function("exact_hit", |b| b.iter(|| radix.resume_prefill(&*model, &mut kv, &ctx, target).unwrap()));
    group.bench_function("append_4", |b| b.iter(|| radix.resume_prefill(&*model, &mut kv, &extended, target).unwrap()));
    group.finish();
}

criterion_group!(benches, prefill, decode, splice, radix_resume);
criterion_main!(benches);
