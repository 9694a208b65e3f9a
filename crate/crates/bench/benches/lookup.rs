use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qnat_bench::{Algorithm, Workload, TABLE_RULE_COUNTS};

fn lookups(c: &mut Criterion) {
    let mut group = c.benchmark_group("rule_lookup");
    for &n in &TABLE_RULE_COUNTS {
        let w = Workload::new(n, 4096, 7);
        for alg in Algorithm::ALL {
            group.bench_with_input(BenchmarkId::new(alg.to_string(), n), &w, |b, w| {
                let mut i = 0;
                b.iter(|| {
                    let (ip, port) = w.queries[i & 4095];
                    i += 1;
                    black_box(w.lookup(alg, black_box(ip), black_box(port)))
                });
            });
        }
    }
    group.finish();
}

criterion_group!(benches, lookups);
criterion_main!(benches);
