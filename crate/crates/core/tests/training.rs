use dynperceiver::model::{DynPerceiver, ModelConfig};
use dynperceiver::nn::{Conv2d, Linear};
use dynperceiver::train::{
    batch_gradients, cross_entropy, generate_synthetic, idx_dataset, kl_soft, parse_idx_images, total_loss, train,
    write_history, AdamW, Dataset, LossWeights, LrSchedule, Split, SyntheticSpec, TrainConfig, HISTORY_HEADER,
};
use dynperceiver::{Error, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn random_logits(r: &mut ChaCha8Rng, b: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Direct `log softmax` of one row.
fn log_probs(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v - z.ln()).collect()
}

fn ce_oracle(logits: &Tensor, labels: &[usize], smoothing: f64) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let lp = log_probs(row);
        let uniform: f64 = lp.iter().sum::<f64>() / c as f64;
        total -= (1.0 - smoothing) * lp[y] + smoothing * uniform;
    }
    total / labels.len() as f64
}

fn kl_oracle(student: &Tensor, teacher: &Tensor) -> f64 {
    let c = student.shape()[1];
    let mut total = 0.0;
    for (s, t) in student.data().chunks(c).zip(teacher.data().chunks(c)) {
        let (ls, lt) = (log_probs(s), log_probs(t));
        total += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    }
    total / student.shape()[0] as f64
}

fn eval1(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v)[0]
}

#[test]
fn cross_entropy_matches_direct_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let logits = random_logits(&mut r, 6, 5, 4.0);
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
        let got = eval1(|g| {
            let x = g.constant(logits.clone());
            cross_entropy(g, x, &labels, 0.0).unwrap()
        });
        assert!((got - ce_oracle(&logits, &labels, 0.0)).abs() < 1e-12);
    }
    let mut prev = f64::INFINITY;
    for m in 0..10 {
        let ce = eval1(|g| {
            let x = g.constant(Tensor::new(vec![1, 3], vec![m as f64 * 0.5, 0.0, 0.0]).unwrap());
            cross_entropy(g, x, &[0], 0.0).unwrap()
        });
        assert!(ce < prev);
        prev = ce;
    }
}

#[test]
fn label_smoothing_mixes_in_uniform_targets() {
    let logits = Tensor::new(vec![2, 3], vec![2.0, 0.5, -1.0, 0.0, 1.0, 3.0]).unwrap();
    let got = eval1(|g| {
        let x = g.constant(logits.clone());
        cross_entropy(g, x, &[0, 1], 0.1).unwrap()
    });
    // Row by row: -(0.9·log p_y + 0.1·mean_c log p_c).
    let manual = |row: [f64; 3], y: usize| {
        let z = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let lp = row.map(|v| v - z);
        -(0.9 + 0.1 / 3.0) * lp[y] - (0.1 / 3.0) * lp.iter().enumerate().filter(|(c, _)| *c != y).map(|(_, v)| v).sum::<f64>()
    };
    let expect = (manual([2.0, 0.5, -1.0], 0) + manual([0.0, 1.0, 3.0], 1)) / 2.0;
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!((got - ce_oracle(&logits, &[0, 1], 0.1)).abs() < 1e-12);
}

#[test]
fn kl_examples_and_gibbs_inequality() {
    let kl = |s: &Tensor, t: &Tensor| {
        eval1(|g| {
            let (a, b) = (g.constant(s.clone()), g.constant(t.clone()));
            kl_soft(g, a, b, 1.0).unwrap()
        })
    };
    let teacher = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let student = Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
    // p_T = [1/2, 1/2], p_S = [3/4, 1/4].
    let direct = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((kl(&student, &teacher) - direct).abs() < 1e-12);
    assert!((direct - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);

    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let s = random_logits(&mut r, 2, 4, 3.0);
        let t = random_logits(&mut r, 2, 4, 3.0);
        let v = kl(&s, &t);
        assert!(v > 1e-12, "{v}");
        assert!((v - kl_oracle(&s, &t)).abs() < 1e-12);
        assert_eq!(kl(&t, &t), 0.0);
    }
}

fn outputs(g: &mut Graph, logits: &[Tensor]) -> [Option<Var>; 4] {
    let mut out = [None; 4];
    for (k, t) in logits.iter().enumerate() {
        out[k] = Some(g.leaf(t.clone()));
    }
    out
}

#[test]
fn total_loss_identities() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let labels = [0, 2, 1, 3, 3];
    let w = LossWeights { alpha: 0.5, label_smoothing: 0.0, temperature: 1.0 };
    for _ in 0..10 {
        let t = random_logits(&mut r, 5, 4, 3.0);
        let ce = ce_oracle(&t, &labels, 0.0);
        let same = eval1(|g| {
            let o = outputs(g, &[t.clone(), t.clone(), t.clone(), t.clone()]);
            total_loss(g, &o, &labels, &w).unwrap()
        });
        let expect = 0.5 * 3.0 * ce + ce;
        assert!((same - expect).abs() <= 4.0 * f64::EPSILON * expect, "{same} vs {expect}");

        let ts: Vec<Tensor> = (0..4).map(|_| random_logits(&mut r, 5, 4, 3.0)).collect();
        let pure = eval1(|g| {
            let o = outputs(g, &ts);
            total_loss(g, &o, &labels, &LossWeights { alpha: 1.0, ..w }).unwrap()
        });
        let ces: Vec<f64> = ts.iter().map(|t| ce_oracle(t, &labels, 0.0)).collect();
        assert!((pure - ces.iter().sum::<f64>()).abs() < 1e-12);

        let mixed = eval1(|g| {
            let o = outputs(g, &ts);
            total_loss(g, &o, &labels, &w).unwrap()
        });
        let hand: f64 = (0..3).map(|k| 0.5 * ces[k] + 0.5 * kl_oracle(&ts[k], &ts[3])).sum::<f64>() + ces[3];
        assert!((mixed - hand).abs() < 1e-12);

        // Missing exits are skipped; the last present one is the teacher.
        let partial = eval1(|g| {
            let mut o = outputs(g, &ts);
            o[1] = None;
            o[3] = None;
            total_loss(g, &o, &labels, &w).unwrap()
        });
        assert!((partial - (0.5 * ces[0] + 0.5 * kl_oracle(&ts[0], &ts[2]) + ces[2])).abs() < 1e-12);
    }
}

fn tiny_setup(seed: u64) -> (DynPerceiver, ParamStore, Tensor, Vec<usize>) {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut s) = DynPerceiver::build(&cfg, seed).unwrap();
    randomize(&mut s, seed, 0.3);
    let images = randn(seed + 1, &[3, 2, 8, 8]);
    (net, s, images, vec![0, 3, 1])
}

/// `Σ_{k<K} KL(exit_k ∥ teacher)` where the teacher logits are fixed values.
fn distillation_sum(net: &DynPerceiver, s: &ParamStore, images: &Tensor, teacher: &Tensor) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = net.forward(s, &mut g, x).unwrap();
    let t = g.constant(teacher.clone());
    let mut sum = 0.0;
    for k in 0..3 {
        let kd = kl_soft(&mut g, out.logits[k].unwrap(), t, 1.0).unwrap();
        sum += g.value(kd)[0];
    }
    sum
}

#[test]
fn distillation_sends_no_gradient_into_the_teacher() {
    let (net, mut s, images, _) = tiny_setup(4);
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = net.forward(&s, &mut g, x).unwrap();
    let teacher = out.logits[3].unwrap();
    let mut kd_sum = None;
    for k in 0..3 {
        let kd = kl_soft(&mut g, out.logits[k].unwrap(), teacher, 1.0).unwrap();
        kd_sum = Some(match kd_sum {
            None => kd,
            Some(acc) => g.add(acc, kd).unwrap(),
        });
    }
    let teacher_values = g.tensor(teacher);
    s.zero_grad();
    g.backward_into(kd_sum.unwrap(), &mut s).unwrap();
    let exit4: Vec<_> = s.ids().filter(|&id| s.path(id).starts_with("exit4.") || s.path(id).starts_with("fkt3to4")).collect();
    assert_eq!(exit4.len(), 4);
    for &id in &exit4 {
        // Never reached by backward at all, or reached with exact zeros.
        let untouched = s.get(id).grad.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0));
        assert!(untouched, "{} received distillation gradient", s.path(id));
    }
    // Some student parameter does receive gradient.
    let head1 = s.find("exit1.head.weight").unwrap();
    assert!(s.get(head1).grad.as_ref().unwrap().iter().any(|&v| v != 0.0));

    // Finite differences with the teacher held at its stop-gradient value.
    let eps = 1e-5;
    for &id in &exit4 {
        for j in 0..s.get(id).numel().min(6) {
            let base = s.get(id).data()[j];
            let mut plus = s.clone();
            plus.get_mut(id).data_mut()[j] = base + eps;
            let mut minus = s.clone();
            minus.get_mut(id).data_mut()[j] = base - eps;
            let fd = (distillation_sum(&net, &plus, &images, &teacher_values)
                - distillation_sum(&net, &minus, &images, &teacher_values))
                / (2.0 * eps);
            assert!(fd.abs() < 1e-8, "{}[{j}]: {fd}", s.path(id));
        }
    }
    // The same harness resolves a non-zero student derivative.
    let base = s.get(head1).data()[0];
    let analytic = s.get(head1).grad.as_ref().unwrap()[0];
    let mut plus = s.clone();
    plus.get_mut(head1).data_mut()[0] = base + eps;
    let mut minus = s.clone();
    minus.get_mut(head1).data_mut()[0] = base - eps;
    let fd = (distillation_sum(&net, &plus, &images, &teacher_values) - distillation_sum(&net, &minus, &images, &teacher_values))
        / (2.0 * eps);
    assert!((fd - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "{fd} vs {analytic}");
}

#[test]
fn chunked_batch_gradient_equals_single_graph_gradient() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut s) = DynPerceiver::build(&cfg, 5).unwrap();
    randomize(&mut s, 5, 0.3);
    let images = randn(6, &[11, 2, 8, 8]);
    let labels: Vec<usize> = (0..11).map(|i| i % 4).collect();
    let w = LossWeights::default();
    let loss = batch_gradients(&net, &mut s, &images, &labels, &w).unwrap();
    let chunked: Vec<Vec<f64>> = s.ids().map(|id| s.get(id).grad.clone().unwrap()).collect();

    let mut whole = s.clone();
    whole.zero_grad();
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = net.forward(&whole, &mut g, x).unwrap();
    let l = total_loss(&mut g, &out.logits, &labels, &w).unwrap();
    g.backward_into(l, &mut whole).unwrap();
    assert!((loss - g.value(l)[0]).abs() < 1e-12);
    for (id, c) in whole.ids().zip(&chunked) {
        for (a, b) in whole.get(id).grad.as_ref().unwrap().iter().zip(c) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{}", whole.path(id));
        }
    }
}

#[test]
fn one_step_lowers_the_loss_for_most_seeds() {
    let mut decreased = 0;
    for seed in 0..5 {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let (net, mut s) = DynPerceiver::build(&cfg, seed).unwrap();
        let images = randn(seed + 10, &[16, 2, 8, 8]);
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let w = LossWeights::default();
        let mut opt = AdamW::new(&s, 0.05);
        let before = batch_gradients(&net, &mut s, &images, &labels, &w).unwrap();
        opt.step(&mut s, 1e-3).unwrap();
        let after = batch_gradients(&net, &mut s, &images, &labels, &w).unwrap();
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 4, "loss decreased for only {decreased} of 5 seeds");
}

fn tiny_data(seed: u64) -> Dataset {
    let spec = SyntheticSpec { channels: 2, ..SyntheticSpec::new(4, 6, 8) };
    spec.generate(seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut s) = DynPerceiver::build(&cfg, 1).unwrap();
    let before = s.clone();
    let tc = TrainConfig { epochs: 1, batch_size: 5, lr: 0.0, ..Default::default() };
    let rows = train(&net, &mut s, &tiny_data(2), &tc, |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    for id in s.ids() {
        assert_eq!(s.get(id).data(), before.get(id).data(), "{}", s.path(id));
    }
}

#[test]
fn training_is_deterministic_and_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::preset("tiny").unwrap();
    let data = tiny_data(3);
    let run = |ckpt: &str| {
        let (net, mut s) = DynPerceiver::build(&cfg, 7).unwrap();
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 7, checkpoint: Some(dir.path().join(ckpt)), ..Default::default() };
        let mut seen = 0;
        let rows = train(&net, &mut s, &data, &tc, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        (rows, s)
    };
    let (a, sa) = run("a.ckpt");
    let (b, _) = run("b.ckpt");
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.accuracy.iter().all(Option::is_some)));
    let ck = dynperceiver::tensor::checkpoint::load_checkpoint(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(ck.config_hash, cfg.hash());
    assert_eq!(std::fs::read(dir.path().join("a.ckpt")).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
    assert_eq!(ck.records.len(), sa.len());

    let mut buf = Vec::new();
    write_history(&mut buf, &a).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), HISTORY_HEADER);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn training_rejects_mismatched_data() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, mut s) = DynPerceiver::build(&cfg, 1).unwrap();
    let wrong = generate_synthetic(4, 4, 8, 0).unwrap();
    assert!(matches!(train(&net, &mut s, &wrong, &TrainConfig::default(), |_| {}), Err(Error::Shape(_))));
    let mut no_train = tiny_data(1);
    no_train.splits.iter_mut().for_each(|t| *t = Split::Eval);
    assert!(matches!(train(&net, &mut s, &no_train, &TrainConfig::default(), |_| {}), Err(Error::Contract(_))));
}

#[test]
fn synthetic_data_is_seeded() {
    let a = generate_synthetic(5, 4, 16, 9).unwrap();
    let b = generate_synthetic(5, 4, 16, 9).unwrap();
    assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a, b);
    assert_ne!(a.images, generate_synthetic(5, 4, 16, 10).unwrap().images);
    let n = a.images.numel() as f64;
    let mean = a.images.data().iter().sum::<f64>() / n;
    let var = a.images.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
}

#[test]
fn noiseless_images_are_shifted_class_renders() {
    let spec = SyntheticSpec { noise: 0.0, ..SyntheticSpec::new(8, 5, 24) };
    let d = spec.generate(4).unwrap();
    let lo = d.images.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.images.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = spec.max_shift as i64;
    for i in 0..d.len() {
        let img = d.images.select(i).unwrap();
        let binary: Vec<f64> = img.data().iter().map(|v| ((v - lo) / (hi - lo)).round()).collect();
        let found = (-shift..=shift)
            .flat_map(|dx| (-shift..=shift).map(move |dy| (dx, dy)))
            .any(|(dx, dy)| spec.render(d.labels[i], dx, dy) == binary);
        assert!(found, "sample {i} is not a shifted render of class {}", d.labels[i]);
    }
    let still = SyntheticSpec { max_shift: 0, ..spec }.generate(4).unwrap();
    for i in 8..still.len() {
        assert_eq!(still.images.select(i).unwrap(), still.images.select(i - 8).unwrap());
    }
}

/// conv3x3/2 → GELU → conv3x3/2 → GELU → 4×4 pool → linear.
struct ConvBaseline {
    c1: Conv2d,
    c2: Conv2d,
    head: Linear,
}

impl ConvBaseline {
    fn logits(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.c1.forward(g, s, x).unwrap();
        let h = g.gelu(h);
        let h = self.c2.forward(g, s, h).unwrap();
        let h = g.gelu(h);
        let h = g.adaptive_avg_pool(h, 4).unwrap();
        let b = g.shape(h)[0];
        let h = g.reshape(h, &[b, 16 * 16]).unwrap();
        self.head.forward(g, s, h).unwrap()
    }
}

#[test]
fn small_conv_baseline_separates_the_synthetic_classes() {
    let data = generate_synthetic(8, 100, 32, 1).unwrap();
    let mut s = ParamStore::new();
    let net = ConvBaseline {
        c1: Conv2d::new(&mut s, "c1", 1, 8, 3, 2, 1, 1, 0).unwrap(),
        c2: Conv2d::new(&mut s, "c2", 8, 16, 3, 2, 1, 1, 0).unwrap(),
        head: Linear::new(&mut s, "head", 256, 8, true, 0).unwrap(),
    };
    let train_idx = data.indices(Split::Train);
    let (eval_x, eval_y) = data.gather(&data.held_out()).unwrap();
    let epochs = 20;
    let steps = train_idx.len().div_ceil(32);
    let schedule = LrSchedule { base: 5e-3, warmup_steps: steps, total_steps: epochs * steps };
    let mut opt = AdamW::new(&s, 0.05);
    let mut best = 0.0f64;
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order = train_idx.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(epoch as u64));
        for batch in order.chunks(32) {
            let (x, y) = data.gather(batch).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = net.logits(&mut g, &s, xv);
            let loss = cross_entropy(&mut g, logits, &y, 0.0).unwrap();
            s.zero_grad();
            g.backward_into(loss, &mut s).unwrap();
            opt.step(&mut s, schedule.lr(step)).unwrap();
            step += 1;
        }
        let mut g = Graph::inference();
        let xv = g.constant(eval_x.clone());
        let logits = net.logits(&mut g, &s, xv);
        let preds: Vec<usize> = g.value(logits).chunks(8).map(dynperceiver::engine::argmax).collect();
        let acc = preds.iter().zip(&eval_y).filter(|(p, y)| p == y).count() as f64 / eval_y.len() as f64;
        best = best.max(acc);
    }
    assert!(best >= 0.95, "baseline reached only {best}");
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn handcrafted_idx_pair_round_trips() {
    let pixels = [0u8, 255, 17, 128, 64, 3, 9, 200, 1, 2, 250, 77];
    let images = idx_bytes(0x803, &[2, 2, 3], &pixels);
    let labels = idx_bytes(0x801, &[2], &[1, 0]);
    let (n, rows, cols, raw) = parse_idx_images(&images).unwrap();
    assert_eq!((n, rows, cols), (2, 2, 3));
    assert_eq!(raw, pixels);
    let d = idx_dataset(&images, &labels).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(d.labels, vec![1, 0]);
    let scaled: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mean = scaled.iter().sum::<f64>() / 12.0;
    let std = (scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0).sqrt();
    for (got, v) in d.images.data().iter().zip(&scaled) {
        assert!((got - (v - mean) / std).abs() < 1e-12);
        // Undoing the standardisation recovers the byte exactly.
        assert_eq!(((got * std + mean) * 255.0).round(), v * 255.0);
    }
}

#[test]
fn malformed_idx_files_are_format_errors() {
    let images = idx_bytes(0x803, &[2, 2, 3], &[0; 12]);
    let labels = idx_bytes(0x801, &[2], &[0, 1]);
    match idx_dataset(&images[..20], &labels) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
        other => panic!("expected a format error, got {other:?}"),
    }
    match idx_dataset(&images[..10], &labels) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut bad = images.clone();
    bad[3] = 0x02;
    assert!(matches!(idx_dataset(&bad, &labels), Err(Error::Format { offset: 0, .. })));
    let three = idx_bytes(0x801, &[3], &[0, 1, 1]);
    assert!(matches!(idx_dataset(&images, &three), Err(Error::Format { offset: 4, .. })));
    assert!(matches!(idx_dataset(&labels, &images), Err(Error::Format { offset: 0, .. })));
}
