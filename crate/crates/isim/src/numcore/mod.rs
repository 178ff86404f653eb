//! Dense-array core: tensors, layer kernels, and a static-graph
//! reverse-mode differentiator. Everything is f64; forward passes on the
//! same inputs are bitwise reproducible.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Activation, Graph, NodeId};
pub use kernels::PixelCeSpec;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::kernels as k;
    use super::*;

    /// Independent O(everything) cross-correlation oracle.
    fn conv_oracle(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (co, k, _): (usize, usize, usize),
        b: &[f64],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let wo = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b[o];
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky * dil) as i64 - pad as i64;
                                    let ix = (xx * stride + kx * dil) as i64 - pad as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += x[((ni * ci + i) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * ci + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((ni * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        // xorshift-based, keeps the oracle tests dependency-free
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let out = k::conv2d_fwd(
            &t(&[1, 1, 1, 1], &[5.0]),
            &t(&[1, 1, 1, 1], &[1.0]),
            &t(&[1], &[0.0]),
            1,
            0,
            1,
        )
        .unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv2d_ones_padded_matches_oracle() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let out = k::conv2d_fwd(
            &t(&[1, 1, 3, 3], &x),
            &t(&[1, 1, 3, 3], &w),
            &t(&[1], &[0.0]),
            1,
            1,
            1,
        )
        .unwrap();
        let expect = conv_oracle(&x, (1, 1, 3, 3), &w, (1, 3, 3), &[0.0], 1, 1, 1);
        assert_eq!(out.data(), &expect[..]);
        assert_eq!(out.data()[0], 4.0); // corner
        assert_eq!(out.data()[1], 6.0); // edge center
        assert_eq!(out.data()[4], 9.0); // center
    }

    #[test]
    fn conv2d_dilated_matches_oracle() {
        let x = rand_vec(25, 7);
        let w = rand_vec(9, 8);
        let out = k::conv2d_fwd(
            &t(&[1, 1, 5, 5], &x),
            &t(&[1, 1, 3, 3], &w),
            &t(&[1], &[0.0]),
            1,
            0,
            2,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        let expect = conv_oracle(&x, (1, 1, 5, 5), &w, (1, 3, 3), &[0.0], 1, 0, 2);
        assert!((out.data()[0] - expect[0]).abs() < 1e-12);
    }

    #[test]
    fn conv2d_random_strided_matches_oracle() {
        let x = rand_vec(2 * 3 * 9 * 9, 11);
        let w = rand_vec(4 * 3 * 3 * 3, 12);
        let b = rand_vec(4, 13);
        for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (3, 0, 1)] {
            let out = k::conv2d_fwd(
                &t(&[2, 3, 9, 9], &x),
                &t(&[4, 3, 3, 3], &w),
                &t(&[4], &b),
                stride,
                pad,
                dil,
            )
            .unwrap();
            let expect = conv_oracle(&x, (2, 3, 9, 9), &w, (4, 3, 3), &b, stride, pad, dil);
            for (a, e) in out.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "stride={stride} pad={pad} dil={dil}");
            }
        }
    }

    #[test]
    fn conv2d_shape_errors_name_dimension() {
        let err = k::conv2d_fwd(
            &t(&[1, 2, 3, 3], &vec![0.0; 18]),
            &t(&[1, 3, 3, 3], &vec![0.0; 27]),
            &t(&[1], &[0.0]),
            1,
            0,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv_transpose_broadcast_and_identity() {
        let out = k::conv_transpose2d_fwd(
            &t(&[1, 1, 1, 1], &[3.5]),
            &t(&[1, 1, 2, 2], &[1.0; 4]),
            2,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[3.5; 4]);

        let x = rand_vec(16, 3);
        let out = k::conv_transpose2d_fwd(
            &t(&[1, 1, 4, 4], &x),
            &t(&[1, 1, 1, 1], &[1.0]),
            1,
        )
        .unwrap();
        assert_eq!(out.data(), &x[..]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x,w), y> == <x, conv_t(y,w)> for stride 2, pad 0, dil 1
        let x = rand_vec(1 * 2 * 5 * 5, 21);
        let w = rand_vec(3 * 2 * 3 * 3, 22);
        let xt = t(&[1, 2, 5, 5], &x);
        let wt = t(&[3, 2, 3, 3], &w);
        let zero_b = t(&[3], &[0.0; 3]);
        let cx = k::conv2d_fwd(&xt, &wt, &zero_b, 2, 0, 1).unwrap();
        let y = rand_vec(cx.numel(), 23);
        let yt = t(cx.shape(), &y);
        let cty = k::conv_transpose2d_fwd(&yt, &wt, 2).unwrap();
        assert_eq!(cty.shape(), xt.shape());
        let lhs: f64 = cx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(cty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn upsample_bilinear_cases() {
        // constant stays constant
        let out = k::upsample_bilinear_fwd(&t(&[1, 1, 2, 2], &[2.5; 4]), 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));

        // [[0,1],[0,1]] widened to 2x4 interpolates each row 0 -> 1
        let out =
            k::upsample_bilinear_fwd(&t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]), 2, 4).unwrap();
        for row in 0..2 {
            let r = &out.data()[row * 4..row * 4 + 4];
            let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            for (a, e) in r.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }

        // same size is identity
        let x = rand_vec(12, 5);
        let out = k::upsample_bilinear_fwd(&t(&[1, 1, 3, 4], &x), 3, 4).unwrap();
        assert_eq!(out.data(), &x[..]);
    }

    #[test]
    fn global_average_pool_cases() {
        let out = k::global_average_pool_fwd(&t(&[1, 1, 3, 3], &[4.0; 9])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let out = k::global_average_pool_fwd(&t(&[1, 2, 1, 1], &[7.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[7.0, -1.0]);
        let out =
            k::global_average_pool_fwd(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0])).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn elementwise_cases() {
        let out = k::relu_fwd(&t(&[2], &[-2.0, 3.0]));
        assert_eq!(out.data(), &[0.0, 3.0]);
        assert_eq!(k::sigmoid(0.0), 0.5);
        let out = k::log_softmax_fwd(&t(&[1, 4], &[0.3; 4])).unwrap();
        for &v in out.data() {
            assert!((v + 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_exp_sums_to_one() {
        let x = rand_vec(2 * 5 * 3 * 3, 31);
        let out = k::log_softmax_fwd(&t(&[2, 5, 3, 3], &x)).unwrap();
        for ni in 0..2 {
            for s in 0..9 {
                let sum: f64 = (0..5).map(|c| out.data()[(ni * 5 + c) * 9 + s].exp()).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn determinism_two_forward_passes_bitwise_equal() {
        let x = t(&[1, 2, 6, 6], &rand_vec(72, 41));
        let w = t(&[3, 2, 3, 3], &rand_vec(54, 42));
        let b = t(&[3], &rand_vec(3, 43));
        let a = k::conv2d_fwd(&x, &w, &b, 2, 1, 1).unwrap();
        let bb = k::conv2d_fwd(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(a.data(), bb.data());
    }

    #[test]
    fn backward_identity_and_fanout() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        // node feeding two consumers accumulates both adjoints
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &rand_vec(3, 2)).with_grad());
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let tot = g.weighted_sum(&[s1, s2], vec![1.0, 1.0]).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(g.backward(x).is_err());
    }

    /// Central finite differences on a scalar-valued closure over one leaf.
    fn fd_check<F>(shape: &[usize], seed: u64, build: F, tol: f64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let numel: usize = shape.iter().product();
        let base = rand_vec(numel, seed);
        let mut g = Graph::new();
        let x = g.leaf(t(shape, &base).with_grad());
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let eps = 1e-3;
        let eval = |data: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(t(shape, data));
            let loss = build(&mut g, x);
            g.value(loss).item()
        };
        for i in 0..numel {
            let mut hi = base.clone();
            hi[i] += eps;
            let mut lo = base.clone();
            lo[i] -= eps;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * eps);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "index {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn finite_difference_gradients_per_op() {
        // conv2d input gradient through sum
        fd_check(
            &[1, 2, 5, 5],
            51,
            |g, x| {
                let w = g.leaf(t(&[2, 2, 3, 3], &rand_vec(36, 52)));
                let b = g.leaf(t(&[2], &rand_vec(2, 53)));
                let c = g.conv2d(x, w, b, 1, 1, 1).unwrap();
                g.sum(c)
            },
            1e-4,
        );
        // conv2d weight gradient
        fd_check(
            &[2, 1, 3, 3],
            54,
            |g, w| {
                let x = g.leaf(t(&[1, 1, 5, 5], &rand_vec(25, 55)));
                let b = g.leaf(t(&[2], &rand_vec(2, 56)));
                let c = g.conv2d(x, w, b, 2, 1, 1).unwrap();
                g.sum(c)
            },
            1e-4,
        );
        // transposed conv, both inputs
        fd_check(
            &[1, 2, 3, 3],
            57,
            |g, x| {
                let w = g.leaf(t(&[2, 1, 3, 3], &rand_vec(18, 58)));
                let c = g.conv_transpose2d(x, w, 2).unwrap();
                g.sum(c)
            },
            1e-4,
        );
        // bilinear upsample + relu + gap chain
        fd_check(
            &[1, 2, 3, 3],
            59,
            |g, x| {
                let u = g.upsample_bilinear(x, 5, 6).unwrap();
                let r = g.elementwise(u, Activation::Relu).unwrap();
                let p = g.global_average_pool(r).unwrap();
                g.sum(p)
            },
            1e-4,
        );
        // sigmoid and log-softmax
        fd_check(
            &[2, 4],
            60,
            |g, x| {
                let s = g.elementwise(x, Activation::Sigmoid).unwrap();
                g.sum(s)
            },
            1e-4,
        );
        fd_check(
            &[2, 3, 2, 2],
            61,
            |g, x| {
                let s = g.elementwise(x, Activation::LogSoftmaxChannelwise).unwrap();
                // weight entries unevenly so the softmax jacobian is exercised
                let sq = g.elementwise(s, Activation::Sigmoid).unwrap();
                g.sum(sq)
            },
            1e-4,
        );
        // losses
        fd_check(
            &[3, 4],
            62,
            |g, x| {
                let targets = vec![
                    1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0,
                ];
                g.multilabel_soft_margin(x, targets).unwrap()
            },
            1e-4,
        );
        fd_check(
            &[2, 3, 2, 2],
            63,
            |g, x| {
                let spec = PixelCeSpec {
                    labels: vec![0, 1, 2, 0, 2, 2, 1, 0],
                    gate: vec![1.0, 1.0],
                    normalize_by_gated: true,
                    literal_gate: false,
                };
                g.pixel_cross_entropy(x, spec).unwrap()
            },
            1e-4,
        );
        // concat
        fd_check(
            &[1, 2, 3, 3],
            64,
            |g, x| {
                let other = g.leaf(t(&[1, 1, 3, 3], &rand_vec(9, 65)));
                let c = g.concat_channels(&[x, other]).unwrap();
                let r = g.elementwise(c, Activation::Sigmoid).unwrap();
                g.sum(r)
            },
            1e-4,
        );
    }
}
