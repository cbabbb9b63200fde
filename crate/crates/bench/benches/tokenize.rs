use std::hint::black_box;

use cmsenti::subword::{self, UnigramConfig, VocabKind};
use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "semma", "padam", "vera", "level", "thalaiva", "mass", "waste", "movie", "அருமை", "படம்", "trailer",
    "release", "eppo", "bro", "konjam", "boring",
];

fn corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..12).map(|_| *WORDS.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
        .collect()
}

fn encode(c: &mut Criterion) {
    let train = corpus(2000, 0);
    let texts = corpus(500, 1);
    let bytes: usize = texts.iter().map(String::len).sum();
    let mut group = c.benchmark_group("encode");
    group.throughput(Throughput::Bytes(bytes as u64));
    for (name, kind) in [("bpe", VocabKind::Bpe), ("unigram", VocabKind::Unigram)] {
        let vocab = subword::train(&train, kind, 200, &UnigramConfig::default()).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                for t in &texts {
                    black_box(vocab.encode(t));
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, encode);
criterion_main!(benches);
