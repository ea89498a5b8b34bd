#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use embinv::embedders::{Embedder, EmbeddingVector, SyntheticEmbedder};
use embinv::models::{Conditioning, InverterConfig, InverterModel, ParamStore, ProjectionHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// NLTK `sentence_bleu` with smoothing method2, ×100.
pub const NLTK_BLEU: &[(&str, &str, f64)] = &[
    ("sat dog in the cat far cat mat away", "sat dog in the cat far cat mat away", 100.0),
    ("dog on the cat the", "far on the cat", 49.49232004),
    ("the far sat a dog sat far", "the far sat a dog sat far", 100.0),
    ("cat away away in cat mat", "cat away away in on mat", 63.89431042),
    ("away sat ran a a", "away on ran in", 28.5744043),
    ("cat far dog sat mat", "cat far dog sat mat", 100.0),
    ("dog in away park far mat", "ran dog the in cat far", 25.40663741),
    ("park park a in", "the park park a in", 77.88007831),
    ("a sat park dog dog ran", "a sat park on dog dog ran", 50.3321045),
    ("a sat dog a park dog mat in dog on sat", "a sat dog far a park dog mat in dog on sat", 76.19389834),
    ("the ran away sat a a the", "the ran away sat a a the", 100.0),
    ("park far mat away far mat", "dog far mat away away mat", 42.72870064),
    ("in far dog dog dog cat ran in dog the", "in far dog dog dog dog cat ran in dog the", 90.4837418),
    ("ran the a ran", "cat the away sat", 31.94715521),
    ("ran a cat sat cat park mat park ran park", "ran a cat sat cat park mat park a ran park", 77.0212172),
    ("far a in cat", "far a in cat", 100.0),
    ("far mat sat far away on far park far far", "far mat sat mat on far far far", 31.40084867),
    ("mat park the mat cat ran a on park away mat mat", "mat park the the a ran a on park away mat", 57.47078645),
    ("away away the ran in cat mat sat cat in cat dog", "away away the ran in mat in cat in cat dog", 60.76795808),
    ("sat dog mat cat park sat sat away the sat", "ran dog park cat park sat sat sat the sat", 42.72870064),
    ("far park sat dog on", "far park sat dog on", 100.0),
    ("park the a far on away", "the a on a far on away", 57.18831189),
    ("dog far sat far sat far far ran cat away the", "dog far sat far sat far far the ran sat away the", 62.56256182),
    ("a in far cat", "mat in far far", 45.18010018),
    ("on a ran far on far on park far a", "on park a ran far far ran far on park far a", 51.57761347),
    ("sat park in in mat", "sat park in in mat", 100.0),
    ("a in park ran on far cat", "a sat ran on park cat", 28.71908945),
    ("mat cat park mat the mat far ran", "mat cat park mat the mat far ran ran", 88.24969026),
    ("far cat a cat on cat cat a a", "far cat cat on cat cat a a", 70.49141756),
    ("a dog the park dog sat far", "dog in a dog sat far", 40.6149258),
    ("cat a cat ran the mat far", "cat a cat ran the mat far", 100.0),
    ("a away sat the park on cat sat a", "a away sat the far park on cat sat a", 70.30119877),
    ("far on a ran the far in on", "far on a ran far in sat a", 50.86989137),
    ("sat ran cat dog in dog in on far ran", "ran cat in in dog in ran", 28.5744043),
    ("cat sat park cat", "cat in park a", 37.99178428),
    ("ran the a mat mat far mat on", "ran the a mat mat far mat on", 100.0),
    ("a on mat cat", "a on mat sat", 65.80370065),
    ("in on on far the cat a", "far in on on far the cat a", 86.68778998),
    ("the a a in on away far sat park", "the a a in on cat away far sat in", 58.7011511),
    ("far away in away", "far far away the in away", 36.0645288),
    ("dog ran far the in", "dog ran far the in", 100.0),
    ("ran far in park", "in far in on", 45.18010018),
    ("cat dog on cat mat in on park in", "cat a on park on on park in", 28.51753953),
    ("away away sat the ran the ran in", "away away sat the ran the ran a", 85.99476571),
    ("a park a ran ran ran cat far", "park far a ran ran ran cat far", 74.76743906),
    ("cat far ran a dog on on cat away cat sat", "cat far ran a dog on on cat away cat sat", 100.0),
    ("a mat away in dog a mat cat mat on ran", "a mat sat away in far a cat park mat on ran", 27.53102247),
    ("mat cat mat the a mat mat dog cat on park", "mat cat mat the mat mat dog cat on park", 73.33658261),
    ("cat dog dog sat mat dog far a the", "cat dog dog away cat mat dog a the", 35.24570878),
    ("on mat dog the in dog far on", "on mat dog the in dog far far on", 81.12994487),
];

/// Straightforward BLEU-4: clipped n-gram precisions, add-one on orders
/// 2..4, geometric mean, brevity penalty. Scale 0..100.
pub fn reference_bleu(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let grams = |s: &[&str]| -> Vec<String> {
            if s.len() < n {
                Vec::new()
            } else {
                (0..=s.len() - n).map(|i| s[i..i + n].join(" ")).collect()
            }
        };
        let pg = grams(&p);
        let mut rg = grams(&r);
        let mut hits = 0usize;
        for g in &pg {
            if let Some(k) = rg.iter().position(|x| x == g) {
                rg.swap_remove(k);
                hits += 1;
            }
        }
        let (num, den) = if n == 1 {
            if hits == 0 {
                return 0.0;
            }
            (hits as f64, pg.len() as f64)
        } else {
            (hits as f64 + 1.0, pg.len() as f64 + 1.0)
        };
        log_sum += (num / den).ln() / 4.0;
    }
    let bp = if p.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / p.len() as f64).exp()
    };
    100.0 * bp * log_sum.exp()
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest relative error between backprop and central finite differences
/// for `sum(R ⊙ P(e))` with respect to W1, W2 and e, in f64.
pub fn projection_gradient_error(d: usize, s: usize, d_enc: usize, seed: u64) -> f64 {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = randn(&mut rng, d * d);
    let w2 = randn(&mut rng, s * d_enc * d);
    let e = randn(&mut rng, d);
    let r = randn(&mut rng, s * d_enc);
    let weight = Tensor::from_vec(r.clone(), (1, s, d_enc), &dev).unwrap();
    let objective = |w1: &Tensor, w2: &Tensor, e: &Tensor| -> Tensor {
        let head = ProjectionHead::from_weights(w1.clone(), w2.clone(), s, d_enc).unwrap();
        (head.forward(e).unwrap() * &weight).unwrap().sum_all().unwrap()
    };
    let t = |v: &[f64], shape: (usize, usize)| Tensor::from_vec(v.to_vec(), shape, &dev).unwrap();
    let vw1 = Var::from_tensor(&t(&w1, (d, d))).unwrap();
    let vw2 = Var::from_tensor(&t(&w2, (s * d_enc, d))).unwrap();
    let ve = Var::from_tensor(&t(&e, (1, d))).unwrap();
    let grads = objective(vw1.as_tensor(), vw2.as_tensor(), ve.as_tensor()).backward().unwrap();
    let analytic = |v: &Var| -> Vec<f64> {
        grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    };
    let (g1, g2, ge) = (analytic(&vw1), analytic(&vw2), analytic(&ve));

    let h = 1e-6;
    let eval = |a: &[f64], b: &[f64], c: &[f64]| -> f64 {
        objective(&t(a, (d, d)), &t(b, (s * d_enc, d)), &t(c, (1, d)))
            .to_scalar::<f64>()
            .unwrap()
    };
    let mut worst = 0.0f64;
    let mut check = |numeric: f64, analytic: f64| {
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for which in 0..3 {
        let len = [w1.len(), w2.len(), e.len()][which];
        for i in 0..len {
            let mut vals = [w1.clone(), w2.clone(), e.clone()];
            vals[which][i] += h;
            let up = eval(&vals[0], &vals[1], &vals[2]);
            vals[which][i] -= 2.0 * h;
            let down = eval(&vals[0], &vals[1], &vals[2]);
            let numeric = (up - down) / (2.0 * h);
            check(numeric, [&g1, &g2, &ge][which][i]);
        }
    }
    worst
}

/// Number of randomized `(s, n)` cases whose encoder length is not `3s + n`.
pub fn encoder_length_failures(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = SyntheticEmbedder::new(6, seed);
    let mut failures = 0;
    for case in 0..cases {
        let s = rng.random_range(1..=5);
        let max_tokens = rng.random_range(1..=7);
        let mut cfg = InverterConfig::new("t", 20, embedder.descriptor().clone(), max_tokens);
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.encoder_layers = 1;
        cfg.decoder_layers = 1;
        cfg.ff_hidden = 16;
        cfg.projection_len = s;
        let mut ps = ParamStore::new(case as u64, DType::F32);
        let model = InverterModel::build(&cfg, &mut ps).unwrap();
        let target = EmbeddingVector::new(randn(&mut rng, 6).iter().map(|&v| v as f32).collect(), "m").unwrap();
        let lens: Vec<usize> = (0..3).map(|_| rng.random_range(0..=max_tokens)).collect();
        let hyps: Vec<Vec<u32>> = lens.iter().map(|&l| (0..l).map(|_| rng.random_range(4..20)).collect()).collect();
        let batch: Vec<Conditioning> = hyps
            .iter()
            .map(|h| Conditioning { target: &target, hypothesis: h, hypothesis_embedding: Some(&target) })
            .collect();
        let n = *lens.iter().max().unwrap();
        let memory = model.encode(&batch).unwrap().memory;
        if memory.dims() != [3, 3 * s + n, 8] || cfg.encoder_len(n) != 3 * s + n {
            failures += 1;
        }
    }
    failures
}
