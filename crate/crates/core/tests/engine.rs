use dynperceiver::engine::{
    argmax, batch_evaluate, confidence, evaluate_records, exit_records, flops_profile, infer, write_trace_log,
    ExitPolicy,
};
use dynperceiver::model::{DynPerceiver, ModelConfig};
use dynperceiver::{Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

/// A valid small configuration with randomised widths, depths, token counts,
/// image size, enabled exits and FKT switch.
fn random_config(seed: u64) -> ModelConfig {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut c = ModelConfig::preset("tiny").unwrap();
    let c1 = [2, 4][r.random_range(0..2)];
    let c2 = [4, 8][r.random_range(0..2)];
    let c3 = [8, 16][r.random_range(0..2)];
    let c4 = c3 * r.random_range(1..=2);
    for (st, ch) in c.stages.iter_mut().zip([c1, c2, c3, c4]) {
        st.channels = ch;
        st.conv_blocks = r.random_range(0..=2);
        st.sa_blocks = r.random_range(1..=2);
        st.widening = r.random_range(1..=3);
        st.stride = 1;
    }
    c.stages[3].stride = r.random_range(1..=2);
    c.image.channels = r.random_range(1..=3);
    c.image.height = r.random_range(7..=10);
    c.image.width = r.random_range(7..=10);
    c.num_classes = r.random_range(2..=5);
    c.latent.tokens = [4, 8, 12][r.random_range(0..3)];
    for k in 0..3 {
        c.exits[k] = r.random_bool(0.7);
    }
    c.fkt = r.random_bool(0.5);
    c.validate().unwrap();
    c
}

fn random_model(cfg: &ModelConfig, seed: u64) -> (DynPerceiver, ParamStore) {
    let (net, mut s) = DynPerceiver::build(cfg, seed).unwrap();
    randomize(&mut s, seed, 0.3);
    (net, s)
}

fn images(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
    randn(seed, &[n, cfg.image.channels, cfg.image.height, cfg.image.width])
}

/// Runtime counter: FLOPs tallied by the graph while advancing to exit `k`.
fn counted(net: &DynPerceiver, s: &ParamStore, image: &Tensor, k: usize) -> u64 {
    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let mut exe = net.start(s, &mut g, x).unwrap();
    exe.advance_to_exit(k).unwrap();
    g.flops()
}

#[test]
fn closed_form_matches_runtime_counter_on_random_configs() {
    let mut configs = vec![ModelConfig::preset("tiny").unwrap()];
    configs.extend((0..8).map(random_config));
    for (n, cfg) in configs.iter().enumerate() {
        let (net, s) = DynPerceiver::build(cfg, n as u64).unwrap();
        let profile = flops_profile(cfg);
        for batch in [1, 3] {
            let img = images(cfg, batch, 100 + n as u64);
            for k in 1..=4 {
                assert_eq!(
                    counted(&net, &s, &img, k),
                    batch as u64 * profile.cost(k),
                    "config {n} exit {k} batch {batch}: {cfg:?}"
                );
            }
        }
        let mut g = Graph::inference();
        let x = g.constant(images(cfg, 1, 7));
        net.forward(&s, &mut g, x).unwrap();
        assert_eq!(g.flops(), profile.cost(4));
    }
}

#[test]
fn cumulative_costs_increase_with_all_exits_enabled() {
    for seed in 0..20 {
        let mut cfg = random_config(seed);
        cfg.exits = [true; 4];
        let c = flops_profile(&cfg).cumulative;
        assert!(c[0] < c[1] && c[1] < c[2] && c[2] <= c[3], "{c:?}");
    }
}

#[test]
fn zero_thresholds_stop_at_exit_one() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, s) = random_model(&cfg, 1);
    let profile = flops_profile(&cfg);
    let imgs = images(&cfg, 6, 2);
    for i in 0..6 {
        let t = infer(&net, &s, &imgs.select(i).unwrap(), &ExitPolicy::earliest(), &profile).unwrap();
        assert_eq!(t.exit_taken, 1);
        assert_eq!(t.flops_used, profile.cost(1));
        assert_eq!(t.confidences.len(), 1);
    }
    let labels = vec![0; 6];
    let ev = batch_evaluate(&net, &s, &imgs, &labels, &ExitPolicy::earliest()).unwrap();
    assert_eq!(ev.mean_flops, profile.cost(1) as f64);
    assert_eq!(ev.exit_histogram, [6, 0, 0, 0]);
}

#[test]
fn unreachable_thresholds_run_the_full_model() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, s) = random_model(&cfg, 3);
    let imgs = images(&cfg, 8, 4);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let mut g = Graph::inference();
    let x = g.constant(imgs.clone());
    let out = net.forward(&s, &mut g, x).unwrap();
    let l4 = out.logits_tensor(&g, 4).unwrap();
    let full_preds: Vec<usize> = (0..8).map(|b| argmax(&l4.data()[b * 4..(b + 1) * 4])).collect();
    let ev = batch_evaluate(&net, &s, &imgs, &labels, &ExitPolicy::full()).unwrap();
    assert_eq!(ev.exit_histogram, [0, 0, 0, 8]);
    let preds: Vec<usize> = ev.traces.iter().map(|t| t.prediction).collect();
    assert_eq!(preds, full_preds);
    let acc = full_preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / 8.0;
    assert_eq!(ev.accuracy, acc);
}

#[test]
fn gating_matches_post_hoc_replay_of_full_forward() {
    for seed in 0..4 {
        let cfg = if seed == 0 { ModelConfig::preset("tiny").unwrap() } else { random_config(seed) };
        let (net, s) = random_model(&cfg, 10 + seed);
        let imgs = images(&cfg, 12, 20 + seed);
        let records = exit_records(&net, &s, &imgs, 5).unwrap();
        let profile = flops_profile(&cfg);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let lo = 1.0 / cfg.num_classes as f64;
            let th = [r.random_range(lo..1.0), r.random_range(lo..1.0), r.random_range(lo..1.0), 0.0];
            let policy = ExitPolicy::new(th).unwrap();
            for (i, rec) in records.iter().enumerate() {
                let t = infer(&net, &s, &imgs.select(i).unwrap(), &policy, &profile).unwrap();
                let k = policy.gate(&rec.confidences, cfg.exits);
                assert_eq!(t.exit_taken, k);
                assert_eq!(t.prediction, rec.predictions[k - 1]);
                assert_eq!(t.flops_used, profile.cost(k));
                for &(j, c) in &t.confidences {
                    assert_eq!(c.to_bits(), rec.confidences[j - 1].to_bits());
                    assert_eq!(c.to_bits(), confidence(rec.logits[j - 1].as_ref().unwrap()).unwrap().to_bits());
                }
            }
            let labels: Vec<usize> = (0..12).map(|i| i % cfg.num_classes).collect();
            let ev = batch_evaluate(&net, &s, &imgs, &labels, &policy).unwrap();
            let replay = evaluate_records(&records, &labels, &policy, cfg.exits, &profile).unwrap();
            assert_eq!(ev, replay);
        }
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, s) = DynPerceiver::build(&cfg, 0).unwrap();
    let imgs = Tensor::zeros(&[0, 2, 8, 8]);
    assert!(matches!(batch_evaluate(&net, &s, &imgs, &[], &ExitPolicy::full()), Err(Error::Contract(_))));
}

#[test]
fn trace_log_has_one_line_per_sample() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let (net, s) = random_model(&cfg, 5);
    let imgs = images(&cfg, 3, 6);
    let ev = batch_evaluate(&net, &s, &imgs, &[0, 1, 2], &ExitPolicy::new([0.6, 0.6, 0.6, 0.0]).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_trace_log(&mut buf, &ev.traces).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample,exit,confidences,flops");
    assert_eq!(lines.len(), 4);
    for (i, (line, t)) in lines[1..].iter().zip(&ev.traces).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert_eq!(cols[1], t.exit_taken.to_string());
        assert_eq!(cols[2].split(';').count(), t.confidences.len());
        assert_eq!(cols[3], t.flops_used.to_string());
    }
}

proptest! {
    #[test]
    fn raising_a_threshold_never_exits_earlier(
        confs in prop::collection::vec(prop::array::uniform4(0.0f64..1.0), 1..30),
        base in prop::array::uniform3(0.0f64..1.0),
        which in 0usize..3,
        bump in 0.0f64..0.5,
    ) {
        let p0 = ExitPolicy::new([base[0], base[1], base[2], 0.0]).unwrap();
        let mut raised = [base[0], base[1], base[2], 0.0];
        raised[which] += bump;
        let p1 = ExitPolicy::new(raised).unwrap();
        for c in &confs {
            prop_assert!(p1.gate(c, [true; 4]) >= p0.gate(c, [true; 4]));
        }
    }
}
