//! Masked graph-attention layers.
//!
//! Attention coefficients follow the additive formulation: for nodes `i, j`
//! with transformed features `hW`, the logit is
//! `LeakyReLU([h_i W || h_j W] . a)`, softmax-normalized over the masked
//! neighborhood of `i` (which always contains `i` itself). The layer output
//! is `ELU(A (H W))`.
//!
//! The concatenation never materializes: with `a` split into halves
//! `a1, a2`, the logit is `(h_i W . a1) + (h_j W . a2)`, an outer sum of two
//! per-node scores.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tape handles for one layer's learnable tensors: `w` is `[F, F']`,
/// `a` is `[2 F']`.
#[derive(Clone, Copy, Debug)]
pub struct GatLayerVars {
    pub w: Var,
    pub a: Var,
}

/// Attention and the shared linear transform for one layer.
///
/// `h`: `[B, n, F]` node features. Returns `(hw, attention)` with
/// `hw = [B, n, F']` and row-stochastic `attention = [B, n, n]` that is
/// exactly zero outside the mask.
fn attention_parts<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layer: GatLayerVars,
    mask: &Tensor<T>,
    leaky_slope: f64,
) -> Result<(Var, Var)> {
    let hs = tape.value(h).shape().to_vec();
    if hs.len() != 3 {
        return Err(Error::Shape(format!(
            "gat: node features must be [B, n, F], got {hs:?}"
        )));
    }
    let (b, n) = (hs[0], hs[1]);
    let ws = tape.value(layer.w).shape().to_vec();
    let fp = ws[1];
    if tape.value(layer.a).shape() != [2 * fp] {
        return Err(Error::Shape(format!(
            "gat: attention vector must be [2*{fp}], got {:?}",
            tape.value(layer.a).shape()
        )));
    }
    let hw = tape.matmul(h, layer.w)?;
    let a_src = tape.slice1(layer.a, 0, fp)?;
    let a_dst = tape.slice1(layer.a, fp, fp)?;
    let a_src = tape.reshape(a_src, vec![fp, 1])?;
    let a_dst = tape.reshape(a_dst, vec![fp, 1])?;
    let score_src = tape.matmul(hw, a_src)?;
    let score_src = tape.reshape(score_src, vec![b, n])?;
    let score_dst = tape.matmul(hw, a_dst)?;
    let score_dst = tape.reshape(score_dst, vec![b, n])?;
    let logits = tape.outer_sum(score_src, score_dst)?;
    let logits = tape.leaky_relu(logits, leaky_slope)?;
    let attention = tape.masked_row_softmax(logits, mask)?;
    Ok((hw, attention))
}

use alloc::format;

/// Masked attention coefficients only (`[B, n, n]`).
pub fn attention_coefficients<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layer: GatLayerVars,
    mask: &Tensor<T>,
    leaky_slope: f64,
) -> Result<Var> {
    Ok(attention_parts(tape, h, layer, mask, leaky_slope)?.1)
}

/// One GAT layer: `ELU(A (H W))`. Returns `(output, attention)`.
pub fn gat_layer_forward<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layer: GatLayerVars,
    mask: &Tensor<T>,
    leaky_slope: f64,
) -> Result<(Var, Var)> {
    let (hw, attention) = attention_parts(tape, h, layer, mask, leaky_slope)?;
    let aggregated = tape.bmm(attention, hw)?;
    let out = tape.elu(aggregated, 1.0)?;
    Ok((out, attention))
}

/// Sequential GAT layers with dropout on node features between layers.
///
/// Dropout runs only when `rng` is provided (train mode); pass `None` for
/// deterministic evaluation. Returns the final features and the attention
/// matrix of every layer.
pub fn gat_stack<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    h0: Var,
    layers: &[GatLayerVars],
    mask: &Tensor<T>,
    leaky_slope: f64,
    dropout: f64,
    mut rng: Option<&mut R>,
) -> Result<(Var, Vec<Var>)> {
    let mut h = h0;
    let mut attentions = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let (out, att) = gat_layer_forward(tape, h, *layer, mask, leaky_slope)?;
        attentions.push(att);
        h = out;
        if li + 1 < layers.len() {
            if let Some(r) = rng.as_deref_mut() {
                h = tape.dropout(h, dropout, r)?;
            }
        }
    }
    Ok((h, attentions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MontageGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn singleton_neighborhood_gets_full_attention() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = tape.input(rand_tensor(&mut rng, vec![1, 2, 3]));
        let w = tape.param(rand_tensor(&mut rng, vec![3, 2]));
        let a = tape.param(rand_tensor(&mut rng, vec![4]));
        let mask = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let layer = GatLayerVars { w, a };
        let att = attention_coefficients(&mut tape, h, layer, &mask, 0.2).unwrap();
        let ad = tape.value(att).data();
        assert_eq!(ad, &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = vec![0.3, -1.2, 0.7];
        let mut h = Vec::new();
        for _ in 0..4 {
            h.extend_from_slice(&row);
        }
        let h = tape.input(t64(vec![1, 4, 3], h));
        let w = tape.param(rand_tensor(&mut rng, vec![3, 2]));
        let a = tape.param(rand_tensor(&mut rng, vec![4]));
        // Ring of 4 with self-loops: |N_i| = 3.
        let mut mask = vec![0.0; 16];
        for i in 0..4usize {
            mask[i * 4 + i] = 1.0;
            mask[i * 4 + (i + 1) % 4] = 1.0;
            mask[i * 4 + (i + 3) % 4] = 1.0;
        }
        let mask = t64(vec![4, 4], mask);
        let att = attention_coefficients(&mut tape, h, GatLayerVars { w, a }, &mask, 0.2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = tape.value(att).data()[i * 4 + j];
                if mask.data()[i * 4 + j] > 0.0 {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12, "alpha[{i}][{j}] = {v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn toy_graph_matches_loop_oracle() {
        // Direct per-row softmax with explicit concatenation, no shortcuts.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, f, fp) = (4usize, 5usize, 3usize);
        let hv = rand_tensor(&mut rng, vec![1, n, f]);
        let wv = rand_tensor(&mut rng, vec![f, fp]);
        let av = rand_tensor(&mut rng, vec![2 * fp]);
        let mask_v = vec![
            1.0, 1.0, 0.0, 1.0, //
            1.0, 1.0, 1.0, 0.0, //
            0.0, 1.0, 1.0, 1.0, //
            1.0, 0.0, 1.0, 1.0,
        ];
        let mask = t64(vec![n, n], mask_v.clone());

        let mut tape = Tape::<f64>::new();
        let h = tape.input(hv.clone());
        let w = tape.param(wv.clone());
        let a = tape.param(av.clone());
        let att = attention_coefficients(&mut tape, h, GatLayerVars { w, a }, &mask, 0.2).unwrap();
        let got = tape.value(att).data();

        // Oracle.
        let mut hw = vec![0.0f64; n * fp];
        for i in 0..n {
            for c in 0..fp {
                for k in 0..f {
                    hw[i * fp + c] += hv.data()[i * f + k] * wv.data()[k * fp + c];
                }
            }
        }
        let leaky = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        for i in 0..n {
            let mut exps = vec![0.0f64; n];
            let mut sum = 0.0;
            for j in 0..n {
                if mask_v[i * n + j] == 0.0 {
                    continue;
                }
                let mut logit = 0.0;
                for c in 0..fp {
                    logit += hw[i * fp + c] * av.data()[c];
                    logit += hw[j * fp + c] * av.data()[fp + c];
                }
                exps[j] = leaky(logit).exp();
                sum += exps[j];
            }
            for j in 0..n {
                let expect = exps[j] / sum;
                assert!(
                    (got[i * n + j] - expect).abs() < 1e-9,
                    "alpha[{i}][{j}]: got {} want {}",
                    got[i * n + j],
                    expect
                );
            }
        }
    }

    #[test]
    fn identity_mask_identity_weight_is_identity_on_nonnegative() {
        let mut tape = Tape::<f64>::new();
        let hv = t64(vec![1, 3, 3], vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.3, 0.0, 0.7, 1.5]);
        let h = tape.input(hv.clone());
        let eye = t64(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let w = tape.param(eye.clone());
        let a = tape.param(Tensor::zeros(vec![6]));
        let (out, _) =
            gat_layer_forward(&mut tape, h, GatLayerVars { w, a }, &eye, 0.2).unwrap();
        for (g, e) in tape.value(out).data().iter().zip(hv.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_over_equal_rows_reduces_to_single_row() {
        // All rows equal => attention uniform and the convex combination
        // returns the row itself: out = ELU(row . W).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let row = vec![0.4, -0.9, 1.3];
        let mut h = Vec::new();
        for _ in 0..3 {
            h.extend_from_slice(&row);
        }
        let wv = rand_tensor(&mut rng, vec![3, 3]);
        let mut tape = Tape::<f64>::new();
        let hvar = tape.input(t64(vec![1, 3, 3], h));
        let w = tape.param(wv.clone());
        let a = tape.param(rand_tensor(&mut rng, vec![6]));
        let mask = Tensor::ones(vec![3, 3]);
        let (out, _) = gat_layer_forward(&mut tape, hvar, GatLayerVars { w, a }, &mask, 0.2).unwrap();
        let mut expect = vec![0.0f64; 3];
        for c in 0..3 {
            for k in 0..3 {
                expect[c] += row[k] * wv.data()[k * 3 + c];
            }
            expect[c] = if expect[c] > 0.0 {
                expect[c]
            } else {
                expect[c].exp() - 1.0
            };
        }
        for i in 0..3 {
            for c in 0..3 {
                assert!((tape.value(out).data()[i * 3 + c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_output_shape_and_zero_input_rows_identical() {
        let graph = MontageGraph::build();
        let mask = graph.mask::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::<f64>::new();
        let h0 = tape.input(Tensor::zeros(vec![2, 12, 24]));
        let widths = [(24, 37), (37, 32), (32, 16)];
        let layers: Vec<GatLayerVars> = widths
            .iter()
            .map(|&(fi, fo)| GatLayerVars {
                w: tape.param(rand_tensor(&mut rng, vec![fi, fo])),
                a: tape.param(rand_tensor(&mut rng, vec![2 * fo])),
            })
            .collect();
        let (out, atts) = gat_stack::<f64, ChaCha8Rng>(
            &mut tape, h0, &layers, &mask, 0.2, 0.2, None,
        )
        .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 12, 16]);
        assert_eq!(atts.len(), 3);
        // Zero features: every node aggregates the same zero vector, so all
        // rows agree (no biases in the attention path).
        let od = tape.value(out).data();
        for b in 0..2 {
            for i in 1..12 {
                for c in 0..16 {
                    assert_eq!(od[(b * 12 + i) * 16 + c], od[(b * 12) * 16 + c]);
                }
            }
        }
    }

    #[test]
    fn eval_stack_is_deterministic() {
        let graph = MontageGraph::build();
        let mask = graph.mask::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h0v = rand_tensor(&mut rng, vec![1, 12, 24]);
        let wv: Vec<Tensor<f64>> = [(24, 37), (37, 32), (32, 16)]
            .iter()
            .map(|&(fi, fo)| rand_tensor(&mut rng, vec![fi, fo]))
            .collect();
        let av: Vec<Tensor<f64>> = [37, 32, 16]
            .iter()
            .map(|&fo| rand_tensor(&mut rng, vec![2 * fo]))
            .collect();
        let run = || {
            let mut tape = Tape::<f64>::new();
            let h0 = tape.input(h0v.clone());
            let layers: Vec<GatLayerVars> = wv
                .iter()
                .zip(&av)
                .map(|(w, a)| GatLayerVars {
                    w: tape.param(w.clone()),
                    a: tape.param(a.clone()),
                })
                .collect();
            let (out, _) = gat_stack::<f64, ChaCha8Rng>(
                &mut tape, h0, &layers, &mask, 0.2, 0.2, None,
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }
}
