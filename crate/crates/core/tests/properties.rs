use proptest::prelude::*;

use integral_core::attention::{score_matrix, ScoreVariant};
use integral_core::backbone::{Model, ModelConfig};
use integral_core::data::{TokenizerMode, Vocabulary};
use integral_core::tensor::{softmax, Mask, Tensor};
use integral_core::training::{batch_indices, lr_schedule, Checkpoint, TrainConfig, Trainer};

fn square(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, n * n)
        .prop_map(move |d| Tensor::new(vec![n, n], d).unwrap())
}

fn logits() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=16).prop_flat_map(|n| (square(n), square(n)))
}

fn row_sums(t: &Tensor, abs: bool) -> Vec<f64> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .map(|v| if abs { v.abs() } else { *v })
                .sum()
        })
        .collect()
}

proptest! {
    #[test]
    fn score_rows_keep_their_mass((z1, z2) in logits(), lambda in 0.0f64..1.0) {
        let mask = Mask::causal(z1.rows());
        let v = score_matrix(ScoreVariant::Vanilla, std::slice::from_ref(&z1), 0.0, Some(&mask)).unwrap().values;
        let c = score_matrix(ScoreVariant::Cog, std::slice::from_ref(&z1), 0.0, Some(&mask)).unwrap().values;
        let d = score_matrix(ScoreVariant::Diff, &[z1.clone(), z2.clone()], lambda, Some(&mask)).unwrap().values;
        let i = score_matrix(ScoreVariant::intg(2), &[z1, z2], 0.0, Some(&mask)).unwrap().values;
        for s in row_sums(&v, false).into_iter().chain(row_sums(&i, false)).chain(row_sums(&c, true)) {
            prop_assert!((s - 1.0).abs() <= 1e-10);
        }
        for s in row_sums(&d, false) {
            prop_assert!((s - (1.0 - lambda)).abs() <= 1e-10);
        }
        for t in [&v, &c, &d, &i] {
            for r in 0..t.rows() {
                for col in r + 1..t.cols() {
                    prop_assert_eq!(t.get(r, col), 0.0);
                }
            }
        }
    }

    #[test]
    fn intg_depends_only_on_the_mean_logit((z1, z2) in logits()) {
        let mean = Tensor::new(
            z1.shape().to_vec(),
            z1.data().iter().zip(z2.data()).map(|(a, b)| (a + b) / 2.0).collect(),
        ).unwrap();
        let i = score_matrix(ScoreVariant::intg(2), &[z1, z2], 0.0, None).unwrap().values;
        let v = score_matrix(ScoreVariant::Vanilla, &[mean], 0.0, None).unwrap().values;
        for (a, b) in i.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_shifts(z in prop::collection::vec(-30.0f64..30.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn char_tokenizer_round_trips(text in "[a-y ,.!?0-9]{0,80}") {
        let vocab = Vocabulary::build("abcdefghijklmnopqrstuvwxy ,.!?0123456789", TokenizerMode::Char);
        prop_assert_eq!(vocab.detokenize(&vocab.tokenize(&text)), text);
    }

    #[test]
    fn every_epoch_visits_each_window_once(n in 1usize..40, seed in any::<u64>(), batch in 1usize..8) {
        let steps = n.div_ceil(batch) * 2;
        let seen: Vec<usize> = (0..steps).flat_map(|s| batch_indices(n, seed, s, 0, 1, batch)).collect();
        let mut first: Vec<usize> = seen[..n].to_vec();
        first.sort_unstable();
        prop_assert_eq!(first, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_indices(n, seed, 3, 0, 1, batch), batch_indices(n, seed, 3, 0, 1, batch));
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(total in 1usize..5000, frac in 0.0f64..1.0, at in 0.0f64..=1.0) {
        let warmup = (total as f64 * frac) as usize;
        let step = (total as f64 * at) as usize;
        let lr = lr_schedule(step, warmup, 1.0, total).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&lr));
        if step >= warmup {
            prop_assert!(lr >= 0.1 - 1e-12);
        }
    }
}

#[test]
fn checkpoints_round_trip_through_bytes() {
    let cfg = ModelConfig::with_dims(16, 2, 2, 24, 12, 16)
        .with_schedule(vec![ScoreVariant::Vanilla, ScoreVariant::Diff]);
    let model = Model::init(cfg, 11).unwrap();
    let train = TrainConfig {
        steps: 4,
        batch_size: 2,
        seq_len: 8,
        warmup_steps: 1,
        ..TrainConfig::desk()
    };
    let trainer = Trainer::new(model, train).unwrap();
    let ck = trainer.checkpoint(Some("abc".into()));
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    let mut bad = ck.to_bytes();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}
