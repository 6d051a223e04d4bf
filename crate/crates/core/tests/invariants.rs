use caphdr2ir::nn::{Graph, Tensor};
use caphdr2ir::trainer::{parse_log, render_log};
use caphdr2ir::{Generator, GeneratorConfig, LossWeights, RunConfig, StepLog, Variant, VARIANTS};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = RunConfig> {
    (
        any::<[bool; 4]>(),
        0.0f64..100.0,
        0.0f64..10.0,
        1e-6f64..1e-1,
        1usize..32,
        any::<u64>(),
        0.05f64..1.0,
        prop::sample::select(vec![vec![4, 8], vec![4, 8, 16], vec![8, 8, 8, 8]]),
    )
        .prop_map(|(t, alpha, beta, lr, bs, seed, key, channels)| {
            let mut c = RunConfig::default();
            let v = Variant::from_toggles(t[0], t[1], t[2], t[3]);
            c.apply_variant(v);
            c.loss = LossWeights {
                alpha,
                beta: if alpha == 0.0 { beta + 0.1 } else { beta },
            };
            c.train.lr = lr;
            c.train.batch_size = bs;
            c.train.seed = seed >> 1;
            c.tonemap.key = key;
            c.scales = channels.len();
            c.channels = channels;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_toml_round_trips(c in config()) {
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn toggles_land_on_a_named_row(t in any::<[bool; 4]>()) {
        let v = Variant::from_toggles(t[0], t[1], t[2], t[3]);
        prop_assert!(VARIANTS.iter().any(|r| r.name == v.name));
        prop_assert_eq!(v.hdr_input, t[0]);
        prop_assert_eq!(v.caption_branch, t[2]);
    }

    #[test]
    fn loss_weight_rules(alpha in -1.0f64..20.0, beta in -1.0f64..2.0) {
        let ok = LossWeights { alpha, beta }.validate().is_ok();
        prop_assert_eq!(ok, alpha >= 0.0 && beta >= 0.0 && (alpha > 0.0 || beta > 0.0));
    }

    #[test]
    fn train_config_rules(bs in 0usize..4, lr in -1e-3f64..1e-2, b1 in -0.5f64..1.5, b2 in -0.5f64..1.5) {
        let mut c = RunConfig::default();
        c.train.batch_size = bs;
        c.train.lr = lr;
        c.train.adam_beta1 = b1;
        c.train.adam_beta2 = b2;
        let want = bs >= 1 && lr > 0.0 && (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2);
        prop_assert_eq!(c.validate().is_ok(), want);
    }

    #[test]
    fn step_log_round_trips(rows in prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>()), 0..20)) {
        let rows: Vec<StepLog> = rows
            .iter()
            .enumerate()
            .filter(|(_, (a, b, c))| a.is_finite() && b.is_finite() && c.is_finite())
            .map(|(i, &(a, b, c))| StepLog {
                step: i as u64 + 1,
                per_loss: a as f64,
                g_loss: b as f64,
                d_loss: c as f64,
                total: a as f64 + b as f64,
            })
            .collect();
        prop_assert_eq!(parse_log(&render_log(&rows)).unwrap(), rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn encoder_and_decoder_dims_follow_the_schedule(k in 1usize..4, scales in 2usize..4) {
        let size = k << scales;
        let widths: Vec<usize> = (0..scales).map(|i| 2 << i).collect();
        let cfg = GeneratorConfig::with_channels(widths.clone());
        let gen = Generator::<f32>::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::full([1, 3, size, size], 0.5));
        let caps: Vec<_> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| g.constant(Tensor::full([1, c, size >> (i + 1), size >> (i + 1)], 0.1)))
            .collect();
        let out = gen.forward(&mut g, &gen.params.bind(false), x, Some(&caps)).unwrap();
        for (i, &l) in out.levels.iter().enumerate() {
            let (c, h, w) = cfg.level_shape(i + 1, size, size);
            prop_assert_eq!(g.value(l).shape(), [1, c, h, w]);
        }
        prop_assert_eq!(g.value(out.output).shape(), [1, 1, size, size]);
    }
}
