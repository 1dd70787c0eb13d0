use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use morepair::autograd::{softmax, Reduction, Tape, Tensor};
use morepair::dataprep::{
    build_guidance_prompt, decode_bytes, encode_bytes, fence, render_training_pair, Objective, RenderOptions,
    RepairExample,
};
use morepair::evalharness::top_k;
use morepair::infer::{extract_patch, nucleus_distribution, sample_next, SamplingConfig};
use morepair::quant::{codebook, double_dequant, quantize_nf4};
use morepair::train::{combined_loss, TrainConfig};

fn matrix() -> impl Strategy<Value = Vec<Vec<bool>>> {
    (1usize..12).prop_flat_map(|w| prop::collection::vec(prop::collection::vec(any::<bool>(), w), 1..30))
}

proptest! {
    #[test]
    fn byte_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(decode_bytes(&encode_bytes(&bytes)), bytes);
    }

    #[test]
    fn extract_inverts_fence(
        code in "[a-z0-9 ;(){}=+<>\n]{0,80}",
        lang in "[a-z+]{0,6}",
        before in "[A-Za-z .,]{0,40}",
        after in "[A-Za-z .,\n]{0,40}",
    ) {
        let mut want = code.clone();
        if !want.ends_with('\n') {
            want.push('\n');
        }
        let wrapped = format!("{before}\n{}{after}", fence(&code, &lang));
        prop_assert_eq!(extract_patch(&fence(&code, &lang)), want.clone());
        prop_assert_eq!(extract_patch(&wrapped), want);
    }

    #[test]
    fn nucleus_keeps_top_token(
        logits in prop::collection::vec(-20.0f64..20.0, 1..40),
        temperature in 0.05f64..4.0,
        top_p in 0.001f64..=1.0,
    ) {
        let dist = nucleus_distribution(&logits, temperature, top_p).unwrap();
        prop_assert!(!dist.is_empty());
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let top = logits.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(dist[0].0 as usize, top);
        let total: f64 = dist.iter().map(|d| d.1).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn greedy_ignores_temperature(
        logits in prop::collection::vec(-20.0f64..20.0, 1..40),
        t1 in 0.05f64..4.0,
        t2 in 0.05f64..4.0,
    ) {
        let pick = |t| {
            let cfg = SamplingConfig { do_sample: false, temperature: t, ..SamplingConfig::default() };
            sample_next(&logits, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };
        prop_assert_eq!(pick(t1), pick(t2));
    }

    #[test]
    fn top_k_monotone_and_prefix(m in matrix()) {
        let w = m[0].len();
        let mut prev = 0.0;
        for k in 1..=w {
            let v = top_k(&m, k).unwrap();
            prop_assert!(v >= prev && (0.0..=100.0).contains(&v));
            let cut: Vec<Vec<bool>> = m.iter().map(|r| r[..k].to_vec()).collect();
            prop_assert_eq!(top_k(&cut, k).unwrap(), v);
            prev = v;
        }
    }

    #[test]
    fn quantization_error_within_bound(
        data in prop::collection::vec(-50.0f64..50.0, 1..400),
        bs1 in 1usize..80,
        bs2 in 1usize..10,
    ) {
        let w = Tensor::new(vec![data.len()], data).unwrap();
        let q = quantize_nf4(&w, bs1, bs2).unwrap();
        let back = double_dequant(&q).unwrap();
        let bounds = q.block_error_bounds();
        for (i, (a, b)) in w.data().iter().zip(back.data()).enumerate() {
            prop_assert!((a - b).abs() <= bounds[i / bs1]);
        }
    }

    #[test]
    fn coding_is_monotone(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let book = codebook();
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(book.nearest(lo) <= book.nearest(hi));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..30),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let p = softmax(&Tensor::new(vec![1, n], row.clone()).unwrap(), 1).unwrap();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax(&Tensor::new(vec![1, n], shifted).unwrap(), 1).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        targets in prop::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::new(vec![3, 4], logits).unwrap());
        let loss = tape.cross_entropy(id, &targets, &[true; 3], Reduction::Mean).unwrap();
        prop_assert!(tape.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn combined_loss_is_the_weighted_sum(l1 in 0.0f64..20.0, l2 in 0.0f64..20.0, lambda in 0.0f64..5.0) {
        let cfg = TrainConfig { lambda, ..TrainConfig::default() };
        let b = combined_loss(l1, Some(l2), &cfg).unwrap();
        prop_assert!(b.combined >= 0.0);
        prop_assert!((b.combined - (l1 + lambda * l2)).abs() <= 1e-12);
    }

    #[test]
    fn objectives_share_the_prompt(
        desc in "D[a-z ]{0,20}",
        buggy in "B[a-z;= ]{1,30}",
        fixed in "F[a-z;= ]{1,30}",
        guidance in "G[a-z. ]{0,30}",
        include_description in any::<bool>(),
    ) {
        let ex = RepairExample {
            id: "x".into(),
            task_description: desc,
            buggy_code: buggy,
            fixed_code: fixed,
            guidance: Some(guidance),
            language_tag: "cpp".into(),
        };
        let opts = RenderOptions { include_description, ..RenderOptions::default() };
        let a = render_training_pair(&ex, Objective::Code, &opts).unwrap();
        let b = render_training_pair(&ex, Objective::Guided, &opts).unwrap();
        prop_assert_eq!(&a.input_tokens, &b.input_tokens);
        prop_assert_ne!(&a.target_tokens, &b.target_tokens);
        prop_assert_eq!(a.guidance_token_count, 0);
        prop_assert!(b.guidance_token_count > 0);
        prop_assert_eq!(a.loss_mask.len(), a.len());
    }

    #[test]
    fn guidance_prompt_quotes_each_field_once(
        desc in "\u{2460}[a-z ]{0,20}",
        buggy in "\u{2461}[a-z;= ]{1,30}",
        fixed in "\u{2462}[a-z;= ]{1,30}",
    ) {
        let ex = RepairExample {
            id: "x".into(),
            task_description: desc.clone(),
            buggy_code: buggy.clone(),
            fixed_code: fixed.clone(),
            guidance: None,
            language_tag: "cpp".into(),
        };
        let prompt = build_guidance_prompt(&ex).unwrap();
        for field in [&desc, &buggy, &fixed] {
            prop_assert_eq!(prompt.matches(field.as_str()).count(), 1);
        }
    }
}
