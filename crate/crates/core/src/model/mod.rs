//! Decoder-only transformer: pre-norm blocks, learned positions, output
//! projection tied to the token embedding.

mod backward;
mod forward;
mod ops;
mod params;
mod scalar;

pub use backward::{sequence_loss, NllSum};
pub use forward::{attention_maps, extend, forward, AttentionCapture, ExtendOptions, ExtendOutput, KvCache, Logits};
pub use params::{Layout, LayerOffsets, ModelConfig, ModelParams};
pub use scalar::Scalar;

/// Numerically stable softmax of one logit row.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            max_seq_len: 32,
            vocab_size: vocab,
            dropout: 0.0,
        }
    }

    #[test]
    fn logits_shape() {
        let p = ModelParams::<f32>::init(tiny(11), 0).unwrap();
        let out = forward(&p, &[vec![3]]).unwrap();
        assert_eq!((out.batch, out.seq_len, out.vocab, out.data.len()), (1, 1, 11, 11));
        assert!(forward(&p, &[vec![3], vec![1, 2]]).is_err());
        assert!(forward(&p, &[vec![11]]).is_err());
        assert!(forward(&p, &[vec![1; 33]]).is_err());
    }

    #[test]
    fn causal_prefix_is_exact() {
        let p = ModelParams::<f32>::init(tiny(13), 1).unwrap();
        let a: Vec<u32> = vec![1, 5, 7, 2, 9, 4, 4, 0];
        let mut b = a.clone();
        b[5] = 12;
        b[7] = 3;
        let out = forward(&p, &[a, b]).unwrap();
        for t in 0..5 {
            assert_eq!(out.row(0, t), out.row(1, t), "position {t}");
        }
        assert_ne!(out.row(0, 5), out.row(1, 5));
    }

    #[test]
    fn zero_embedding_gives_uniform_distribution() {
        let mut p = ModelParams::<f64>::init(tiny(10), 2).unwrap();
        let layout = p.layout();
        // tied output projection zeroed: every logit is 0
        p.data[layout.wte.clone()].fill(0.0);
        let out = forward(&p, &[vec![1, 2, 3]]).unwrap();
        for probs in (0..3).map(|t| softmax(out.row(0, t))) {
            for q in probs {
                assert!((q - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = ModelParams::<f32>::init(tiny(9), 3).unwrap();
        let maps = attention_maps(&p, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(maps.len(), 2);
        for layer in &maps {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for (i, row) in head.chunks(6).enumerate() {
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let p = ModelParams::<f64>::init(tiny(17), 4).unwrap();
        let ids: Vec<u32> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let full = forward(&p, &[ids.clone()]).unwrap();
        let mut cache = KvCache::new(&p);
        extend(&p, &mut cache, &ids[..3], ExtendOptions::default()).unwrap();
        for t in 3..ids.len() {
            let out = extend(&p, &mut cache, &ids[t..t + 1], ExtendOptions::default()).unwrap();
            for (a, b) in out.logits.iter().zip(full.row(0, t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        cache.truncate(2);
        assert_eq!(cache.tokens(), &ids[..2]);
        let out = extend(&p, &mut cache, &ids[2..4], ExtendOptions::default()).unwrap();
        for (a, b) in out.logits.iter().zip(full.row(0, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_path_agrees_with_inference_path() {
        let p = ModelParams::<f64>::init(tiny(17), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs: Vec<u32> = (0..12).map(|_| rng.gen_range(0..17)).collect();
        let targets: Vec<u32> = (0..12).map(|_| rng.gen_range(0..17)).collect();
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let loss = sequence_loss(&p, &inputs, &targets, &mask, None, None).unwrap();
        let logits = forward(&p, &[inputs]).unwrap();
        let mut want = 0.0;
        for t in 0..12 {
            if mask[t] {
                want -= softmax(logits.row(0, t))[targets[t] as usize].ln();
            }
        }
        assert_eq!(loss.count, 8);
        assert!((loss.sum - want).abs() < 1e-10);
    }
}
