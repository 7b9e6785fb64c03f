use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clinix_core::blocks::hgconv::{MAX_ORDER, MIN_ORDER};
use clinix_core::blocks::{Gating, HgConv};
use clinix_core::nn::{Ctx, Mode, Module, ParamStore};
use clinix_core::Tensor;

fn hgconv(c: &mut Criterion) {
    let channels = 32;
    let extents = [8usize, 8, 8];
    let mut group = c.benchmark_group("hgconv_forward");
    group.throughput(Throughput::Elements(extents.iter().product::<usize>() as u64));
    for order in MIN_ORDER..=MAX_ORDER {
        let hg = HgConv::new("hg", channels, order, None, Gating::Additive).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ParamStore::from_decls(&hg.params(), &mut rng).unwrap();
        let x = Tensor::randn(&[1, channels, extents[0], extents[1], extents[2]], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(order), &order, |b, _| {
            b.iter(|| {
                let mut ctx = Ctx::new(&params, Mode::Eval).frozen();
                let xv = ctx.tape.constant(x.clone());
                hg.forward(&mut ctx, xv).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, hgconv);
criterion_main!(benches);
