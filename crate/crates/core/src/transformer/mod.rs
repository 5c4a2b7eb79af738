//! The toy masked-LM transformer and its node inventory.

mod model;
mod node;

pub use model::{
    interpolate_input, qoi_score, ForwardOptions, Intervention, LayerParams, ModelConfig, QoiSpec,
    ToyTransformer, Trace, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use node::NodeId;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{max_rel_err, Tensor};
    use crate::oracle::reference;

    fn small(layers: usize, heads: usize, hidden: usize, seed: u64) -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            layers,
            heads,
            hidden,
            max_len: 8,
            vocab: 11,
            ffn_width: 2 * hidden,
            seed,
            tied_output: false,
            init_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn zero_model_gives_flat_logits() {
        let m = ToyTransformer::zeros(small(2, 2, 8, 0).config).unwrap();
        let logits = m.logits(&[1, 2, 3, 4]).unwrap();
        for r in 0..logits.rows() {
            let row = logits.row(r);
            assert!(row.iter().all(|v| *v == row[0]));
        }
    }

    #[test]
    fn seeded_forward_is_reproducible() {
        let a = small(2, 2, 8, 7).logits(&[3, 1, 4, 1, 5]).unwrap();
        let b = small(2, 2, 8, 7).logits(&[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(a.data(), b.data());
        let c = small(2, 2, 8, 8).logits(&[3, 1, 4, 1, 5]).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn taped_forward_equals_eager_bitwise() {
        let m = small(1, 2, 8, 0);
        let ids = [1, 5, 2, 9];
        let taped = m.forward(&ids, &ForwardOptions::default()).unwrap();
        assert_eq!(taped.logits().data(), m.logits(&ids).unwrap().data());
        assert!(taped.tape.is_recording());
    }

    #[test]
    fn hand_sized_model_matches_loop_reimplementation() {
        for tied in [false, true] {
            let mut cfg = small(1, 1, 2, 3).config;
            cfg.tied_output = tied;
            let m = ToyTransformer::new(cfg).unwrap();
            let ids = [0, 4, 7];
            let logits = m.logits(&ids).unwrap();
            let (_, want) = reference::forward::<f64>(&m, &m.embed(&ids).unwrap());
            let flat: Vec<f64> = want.into_iter().flatten().collect();
            assert!(max_rel_err(logits.data(), &flat) < 1e-10);
        }
        let m = small(3, 4, 16, 11);
        let ids = [2, 3, 5, 7, 1];
        let (_, want) = reference::forward::<f64>(&m, &m.embed(&ids).unwrap());
        let flat: Vec<f64> = want.into_iter().flatten().collect();
        assert!(max_rel_err(m.logits(&ids).unwrap().data(), &flat) < 1e-10);
    }

    #[test]
    fn every_node_is_registered() {
        let m = small(2, 3, 12, 1);
        let t = m
            .forward(
                &[1, 2, 3],
                &ForwardOptions {
                    qoi: Some(QoiSpec {
                        position: 2,
                        correct: 4,
                        wrong: 5,
                    }),
                    ..Default::default()
                },
            )
            .unwrap();
        // per position: x, 2 x (h, skip, 3 heads), logits; plus qoi
        assert_eq!(t.nodes.len(), 3 * (1 + 2 * 5 + 1) + 1);
        for (name, _) in t.tape.markers() {
            assert!(!name.is_empty());
        }
        assert_eq!(
            t.tape.marker("a^{2,1}_0").unwrap(),
            t.marker(&NodeId::Head {
                layer: 2,
                head: 1,
                pos: 0
            })
            .unwrap()
        );
        let q = qoi_score(t.logits(), 2, 4, 5).unwrap();
        assert_eq!(t.qoi_value().unwrap(), q);
    }

    #[test]
    fn head_and_skip_decomposition_is_exact() {
        let m = small(2, 2, 8, 5);
        let ids = [1, 2, 3, 4];
        let emb = m.embed(&ids).unwrap();
        let t = m
            .forward(
                &ids,
                &ForwardOptions {
                    embeddings: Some(&emb),
                    ..Default::default()
                },
            )
            .unwrap();
        let cot: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        for l in 1..=2 {
            for j in 0..4 {
                let upper = NodeId::embedding(l, j);
                for i in 0..4 {
                    let lower = NodeId::embedding(l - 1, i);
                    let total = t.vjp(&upper, &lower, &cot).unwrap();
                    let mut routed = vec![0.0; 8];
                    let mut mids: Vec<NodeId> = (0..2)
                        .map(|k| NodeId::Head {
                            layer: l,
                            head: k,
                            pos: j,
                        })
                        .collect();
                    mids.push(NodeId::Skip { layer: l, pos: j });
                    for mid in mids {
                        let g = t.vjp(&upper, &mid, &cot).unwrap();
                        let g = t.vjp(&mid, &lower, &g).unwrap();
                        for (r, v) in routed.iter_mut().zip(g) {
                            *r += v;
                        }
                    }
                    assert!(max_rel_err(&total, &routed) < 1e-10, "l={l} j={j} i={i}");
                }
            }
        }
    }

    #[test]
    fn vocabulary_permutation_permutes_logits() {
        let m = small(2, 2, 8, 2);
        let (r1, r2) = (3, 8);
        let mut p = m.clone();
        let h = m.config.hidden;
        for d in 0..h {
            p.token_embedding.data_mut().swap(r1 * h + d, r2 * h + d);
        }
        let w = p.output_weight.as_mut().unwrap();
        let v = m.config.vocab;
        for d in 0..h {
            w.data_mut().swap(d * v + r1, d * v + r2);
        }
        p.output_bias.data_mut().swap(r1, r2);
        let ids = [1, 3, 5, 6];
        let swapped: Vec<usize> = ids
            .iter()
            .map(|&i| if i == r1 { r2 } else if i == r2 { r1 } else { i })
            .collect();
        let a = m.logits(&ids).unwrap();
        let b = p.logits(&swapped).unwrap();
        for r in 0..ids.len() {
            for c in 0..v {
                let c2 = if c == r1 { r2 } else if c == r2 { r1 } else { c };
                assert_eq!(a.at(r, c), b.at(r, c2));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = small(2, 2, 8, 9);
        let back = ToyTransformer::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let ids = [1, 2, 3];
        assert_eq!(m.logits(&ids).unwrap().data(), back.logits(&ids).unwrap().data());

        let mut bad: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        bad["version"] = 99.into();
        assert!(ToyTransformer::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn rejects_bad_sequences_and_configs() {
        let m = small(1, 1, 4, 0);
        assert!(m.logits(&[0; 9]).is_err());
        assert!(m.logits(&[11]).is_err());
        let mut cfg = m.config.clone();
        cfg.heads = 3;
        assert!(ToyTransformer::new(cfg).is_err());
        let mut cfg = m.config.clone();
        cfg.layers = 0;
        assert!(ToyTransformer::new(cfg).is_err());
    }

    #[test]
    fn qoi_arithmetic() {
        let logits = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.5]]).unwrap();
        assert_eq!(qoi_score(&logits, 1, 0, 1).unwrap(), 1.5);
        assert_eq!(qoi_score(&logits, 1, 1, 1).unwrap(), 0.0);
        assert!(qoi_score(&logits, 5, 0, 1).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 6.0]]).unwrap();
        let b = [0.5, 0.25];
        let traced = [0, 1];
        assert_eq!(interpolate_input(&x, &b, &traced, 1.0).unwrap(), x);
        let z = interpolate_input(&x, &b, &traced, 0.0).unwrap();
        assert_eq!(z.row(0), &b);
        assert_eq!(z.row(1), &b);
        assert_eq!(z.row(2), x.row(2));
        let mid = interpolate_input(&x, &b, &traced, 0.5).unwrap();
        assert_eq!(mid.row(0), &[0.75, 1.125]);
        assert_eq!(mid.row(1), &[1.75, -1.875]);
        assert!(interpolate_input(&x, &b, &traced, 1.5).is_err());
    }

    #[test]
    fn intervention_overwrites_rows() {
        let m = small(2, 2, 8, 4);
        let ids = [1, 2, 3];
        let mut iv = Intervention::new();
        iv.zero(NodeId::Layer { layer: 1, pos: 1 }, 8);
        let t = m
            .forward(
                &ids,
                &ForwardOptions {
                    intervention: Some(&iv),
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(t.value(&NodeId::Layer { layer: 1, pos: 1 }).unwrap().iter().all(|v| *v == 0.0));
        assert_ne!(t.logits().data(), m.logits(&ids).unwrap().data());
    }
}
