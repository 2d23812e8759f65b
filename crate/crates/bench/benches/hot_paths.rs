use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lexcopy::decode::{translate_document, SearchConfig};
use lexcopy::metrics::{bleu4, lc_score, Smoothing};
use lexcopy::vocab::BOS;
use lexcopy::{GateOverride, Variant};
use lexcopy_bench::{filled_context, target_documents, toy_model};

fn decode_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_step");
    for variant in [Variant::Sentence, Variant::HanJoint, Variant::Copy] {
        let model = toy_model(variant);
        let ctx = filled_context(&model, 1);
        let enc = model.encode(&[5, 6, 7, 8, 9, 10], &ctx).unwrap();
        let prefix = [BOS, 11, 12, 13, 14];
        group.bench_function(variant.name(), |b| {
            b.iter(|| model.decode_step(black_box(&prefix), &enc, &ctx, GateOverride::Learned).unwrap())
        });
    }
    group.finish();
}

fn translate(c: &mut Criterion) {
    let model = toy_model(Variant::Copy);
    let doc: Vec<Vec<u32>> = (0..4).map(|i| (5..12).map(|t| t + i).collect()).collect();
    let mut group = c.benchmark_group("translate_document");
    group.sample_size(10);
    for beam in [1, 4] {
        let search = SearchConfig {
            beam,
            ..SearchConfig::default()
        };
        group.bench_function(format!("beam{beam}"), |b| {
            b.iter(|| translate_document(&model, black_box(&doc), 1, &search, false).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let docs = target_documents(200);
    c.bench_function("bleu4_200_docs", |b| b.iter(|| bleu4(black_box(&docs), &docs, Smoothing::None).unwrap()));
    c.bench_function("lc_200_docs", |b| b.iter(|| lc_score(black_box(&docs)).unwrap()));
}

criterion_group!(benches, decode_step, translate, metrics);
criterion_main!(benches);
