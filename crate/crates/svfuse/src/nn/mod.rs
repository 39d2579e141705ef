//! Reverse-mode differentiation over small dense tensors: enough machinery
//! to train the update blocks, attention projections, decoder heads, and
//! stand-in encoders, with exact analytic gradients throughout.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{BoundParams, CheckpointError, Param, ParamSet};
pub use tape::{Gradients, NnError, Tape, Var, GATHER_PAD};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{assert_gradients, DEFAULT_STEP};
    use super::layers::{mgu_cell, Activation, Mlp};
    use super::params::ParamSet;
    use super::tape::{Tape, Var, GATHER_PAD};
    use super::tensor::Tensor;
    use crate::rng::seeded_rng;

    const TOL: f64 = 1e-4;

    fn rand34(seed: u64) -> Tensor {
        Tensor::randn(&[3, 4], 1.0, &mut seeded_rng(seed))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::row(&[0.0, 0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert!((tape.value(y)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 5]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    // Every primitive against central finite differences on random 3x4
    // tensors. The reduction to a scalar uses a fixed random projection so
    // all output components receive distinct upstream gradients.
    fn project_to_scalar(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let n = tape.value(y).len();
        let w = Tensor::randn(&[n], 1.0, &mut seeded_rng(seed));
        let flat = tape.reshape(y, &[n]).unwrap();
        let wv = tape.leaf(&w);
        let prod = tape.mul(flat, wv).unwrap();
        tape.sum_all(prod)
    }

    #[test]
    fn fd_matmul() {
        let a = rand34(1);
        let b = Tensor::randn(&[4, 5], 1.0, &mut seeded_rng(2));
        assert_gradients("matmul", &[a, b], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 7)
        });
    }

    #[test]
    fn fd_add_sub_mul() {
        let a = rand34(3);
        let b = rand34(4);
        assert_gradients("add", &[a.clone(), b.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 8)
        });
        assert_gradients("sub", &[a.clone(), b.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 9)
        });
        assert_gradients("mul", &[a, b], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 10)
        });
    }

    #[test]
    fn fd_broadcast_bias() {
        let x = rand34(5);
        let b = Tensor::randn(&[1, 4], 1.0, &mut seeded_rng(6));
        assert_gradients("add_bcast_row", &[x, b.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.add_bcast_row(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 11)
        });
        assert_gradients("broadcast", &[b], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.broadcast(v[0], 3).unwrap();
            project_to_scalar(t, y, 12)
        });
    }

    #[test]
    fn fd_pointwise() {
        let x = rand34(13);
        assert_gradients("sigmoid", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.sigmoid(v[0]);
            project_to_scalar(t, y, 14)
        });
        assert_gradients("tanh", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.tanh(v[0]);
            project_to_scalar(t, y, 15)
        });
        // Keep inputs away from the relu kink at 0 and the clamp edges.
        let off: Vec<f64> = x.data.iter().map(|v| v + 3.0 * v.signum()).collect();
        let shifted = Tensor::from_vec(&[3, 4], off);
        assert_gradients("relu", &[shifted.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.relu(v[0]);
            project_to_scalar(t, y, 16)
        });
        assert_gradients("clamp", &[shifted], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.clamp(v[0], -100.0, 100.0);
            project_to_scalar(t, y, 17)
        });
        let pos = Tensor::from_vec(&[3, 4], x.data.iter().map(|v| v.abs() + 0.5).collect());
        assert_gradients("rsqrt", &[pos], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.rsqrt(v[0]);
            project_to_scalar(t, y, 18)
        });
        assert_gradients("scale/add_scalar", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.scale(v[0], -2.5);
            let y = t.add_scalar(y, 0.75);
            project_to_scalar(t, y, 19)
        });
    }

    #[test]
    fn fd_softmax() {
        let x = rand34(20);
        assert_gradients("softmax_lastdim", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.softmax_lastdim(v[0]).unwrap();
            project_to_scalar(t, y, 21)
        });
    }

    #[test]
    fn fd_concat_slice_reshape() {
        let a = rand34(22);
        let b = rand34(23);
        assert_gradients("concat_rows", &[a.clone(), b.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            project_to_scalar(t, y, 24)
        });
        assert_gradients("concat_cols", &[a.clone(), b.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            project_to_scalar(t, y, 25)
        });
        assert_gradients("slice_rows", &[a.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.slice_rows(v[0], 1, 2).unwrap();
            project_to_scalar(t, y, 26)
        });
        assert_gradients("slice_cols", &[a.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.slice_cols(v[0], 1, 3).unwrap();
            project_to_scalar(t, y, 27)
        });
        assert_gradients("reshape", &[a], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.reshape(v[0], &[4, 3]).unwrap();
            project_to_scalar(t, y, 28)
        });
    }

    #[test]
    fn fd_gather_and_reductions() {
        let x = rand34(29);
        assert_gradients("gather_rows", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 0, GATHER_PAD, 1]).unwrap();
            project_to_scalar(t, y, 30)
        });
        assert_gradients("mean_all", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            t.mean_all(v[0])
        });
        assert_gradients("sum_all", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            t.sum_all(v[0])
        });
        assert_gradients("mean_rows", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.mean_rows(v[0]).unwrap();
            project_to_scalar(t, y, 31)
        });
        assert_gradients("max_rows", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.max_rows(v[0]).unwrap();
            project_to_scalar(t, y, 32)
        });
    }

    #[test]
    fn fd_segments() {
        let mut rng = seeded_rng(50);
        let x = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let lens = vec![2usize, 1, 4];
        assert_gradients("segment_mean", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.segment_mean(v[0], lens.clone()).unwrap();
            project_to_scalar(t, y, 51)
        });
        assert_gradients("segment_sum", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.segment_sum(v[0], lens.clone()).unwrap();
            project_to_scalar(t, y, 52)
        });
        assert_gradients("segment_max", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.segment_max(v[0], lens.clone()).unwrap();
            project_to_scalar(t, y, 53)
        });
        let col = Tensor::randn(&[7, 1], 1.0, &mut seeded_rng(54));
        assert_gradients("segment_softmax", &[col], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.segment_softmax(v[0], lens.clone()).unwrap();
            project_to_scalar(t, y, 55)
        });
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[5, 1], vec![1.0, -2.0, 0.5, 3.0, 3.0]));
        let y = tape.segment_softmax(x, vec![2, 3]).unwrap();
        let v = tape.value(y);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] + v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fd_losses() {
        let x = rand34(33);
        let target = rand34(34);
        assert_gradients("mse", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            t.mse(v[0], &target).unwrap()
        });
        let target2 = rand34(35);
        assert_gradients("l1", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            t.l1(v[0], &target2).unwrap()
        });
        let labels = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        assert_gradients("bce_with_logits", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            t.bce_with_logits(v[0], &labels).unwrap()
        });
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = seeded_rng(36);
        let x = Tensor::randn(&[4 * 5, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[9 * 2, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[1, 3], 0.5, &mut rng);
        assert_gradients("conv2d", &[x, w, b], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 4, 5).unwrap();
            project_to_scalar(t, y, 37)
        });
    }

    #[test]
    fn fd_sparse_conv3() {
        let mut rng = seeded_rng(38);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4 * 3, 2], 0.5, &mut rng);
        let b = Tensor::randn(&[1, 2], 0.5, &mut rng);
        let neighbors: Vec<i64> = vec![
            0, 1, -1, 2, //
            3, -1, -1, -1, //
            4, 5, 0, 1, //
        ];
        assert_gradients("sparse_conv3", &[x, w, b], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t
                .sparse_conv3(v[0], v[1], v[2], neighbors.clone(), 4)
                .unwrap();
            project_to_scalar(t, y, 39)
        });
    }

    #[test]
    fn fd_pool_and_interp() {
        let mut rng = seeded_rng(40);
        let x = Tensor::randn(&[4 * 6, 2], 1.0, &mut rng);
        assert_gradients("avg_pool2", &[x.clone()], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.avg_pool2(v[0], 4, 6).unwrap();
            project_to_scalar(t, y, 41)
        });
        assert_gradients("interp2x", &[x], DEFAULT_STEP, TOL, &mut |t, v| {
            let y = t.interp2x(v[0], 4, 6).unwrap();
            project_to_scalar(t, y, 42)
        });
    }

    #[test]
    fn fd_trilinear() {
        // Geometry handled by the grid module; here exercise the primitive
        // directly with synthetic weights and sub-cell derivatives.
        let mut rng = seeded_rng(43);
        let feats = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let pos = Tensor::row(&[0.3, 0.6, 0.2]);
        let rows = [0, 1, 2, GATHER_PAD, 3, 4, 0, 1];
        // w_c = product of per-axis hat weights at frac = pos (cell size 1).
        let build_weights = |p: &[f64]| {
            let mut weights = [0.0; 8];
            let mut dweights = [[0.0; 3]; 8];
            for c in 0..8 {
                let d = [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64];
                let mut w = 1.0;
                for a in 0..3 {
                    w *= if d[a] == 1.0 { p[a] } else { 1.0 - p[a] };
                }
                weights[c] = w;
                for a in 0..3 {
                    let mut dw = if d[a] == 1.0 { 1.0 } else { -1.0 };
                    for b in 0..3 {
                        if b != a {
                            dw *= if d[b] == 1.0 { p[b] } else { 1.0 - p[b] };
                        }
                    }
                    dweights[c][a] = dw;
                }
            }
            (weights, dweights)
        };
        assert_gradients("trilinear", &[feats, pos], DEFAULT_STEP, TOL, &mut |t, v| {
            let p = t.value(v[1]).to_vec();
            let (weights, dweights) = build_weights(&p);
            let y = t.trilinear(v[0], v[1], rows, weights, dweights).unwrap();
            project_to_scalar(t, y, 44)
        });
    }

    #[test]
    fn fd_mgu_cell() {
        let mut rng = seeded_rng(45);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let wf = Tensor::randn(&[7, 4], 0.5, &mut rng);
        let bf = Tensor::randn(&[1, 4], 0.5, &mut rng);
        let wh = Tensor::randn(&[7, 4], 0.5, &mut rng);
        let bh = Tensor::randn(&[1, 4], 0.5, &mut rng);
        assert_gradients(
            "mgu_cell",
            &[x, h, wf, bf, wh, bh],
            DEFAULT_STEP,
            TOL,
            &mut |t, v| {
                let y = mgu_cell(t, v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
                project_to_scalar(t, y, 46)
            },
        );
    }

    #[test]
    fn fd_mlp_composite() {
        let mut rng = seeded_rng(47);
        let mut params = ParamSet::new();
        let mlp = Mlp::init(&mut params, "net", &[5, 8, 2], Activation::Tanh, &mut rng);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut inputs = vec![x];
        let names: Vec<String> = params.names().cloned().collect();
        for n in &names {
            inputs.push(params.get(n).clone());
        }
        assert_gradients("mlp", &inputs, DEFAULT_STEP, 1e-3, &mut |t, v| {
            // Rebind: v[0] is the input, the rest follow sorted param order.
            let mut set = ParamSet::new();
            for (i, n) in names.iter().enumerate() {
                set.insert(n, t.tensor(v[i + 1]));
            }
            // Use the already-created leaves rather than new ones.
            let mut bound_vars = std::collections::BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                bound_vars.insert(n.clone(), v[i + 1]);
            }
            let bound = crate::nn::params::BoundParams::from_vars(bound_vars);
            let y = mlp.forward(t, &bound, v[0]).unwrap();
            project_to_scalar(t, y, 48)
        });
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let mut rng = seeded_rng(49);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let t1 = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let t2 = Tensor::randn(&[3, 3], 1.0, &mut rng);

        let grad_of = |targets: &[&Tensor]| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let mut losses = Vec::new();
            for t in targets {
                losses.push(tape.mse(xv, t).unwrap());
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = tape.add(total, *l).unwrap();
            }
            let grads = tape.backward(total);
            grads.get(xv).unwrap().to_vec()
        };

        let g1 = grad_of(&[&t1]);
        let g2 = grad_of(&[&t2]);
        let gsum = grad_of(&[&t1, &t2]);
        for i in 0..9 {
            assert!((gsum[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }
}
