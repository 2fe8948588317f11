//! Dense tensors and the handful of differentiable operators the agent needs.
//!
//! Gradients are computed layer by layer from cached forward inputs; there is
//! no general computation graph.

mod activation;
mod adam;
mod conv;
mod tensor;

pub use activation::{flush_subnormal, log_softmax_into, relu, relu_backward, softmax_into, softmax_lastdim};
pub use adam::AdamState;
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayerParams};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    /// Scalar probe loss `Σ r_i · f(x)_i` evaluated in f64.
    fn probe(out: &Tensor, r: &[f32]) -> f64 {
        out.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        const H: f32 = 1e-3;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, o, h, w) = (2, 3, 3 + seed as usize % 3, 3);
            let input = Tensor::new(vec![c, h, w], rand_vec(c * h * w, &mut rng)).unwrap();
            let mut params = ConvLayerParams::new(
                Tensor::new(vec![o, c, 3, 3], rand_vec(o * c * 9, &mut rng)).unwrap(),
                Tensor::new(vec![o], rand_vec(o, &mut rng)).unwrap(),
            )
            .unwrap();
            let r = rand_vec(o * h * w, &mut rng);
            let grad_out = Tensor::new(vec![o, h, w], r.clone()).unwrap();
            let g = conv2d_backward(&grad_out, Some(&input), &params, true).unwrap();

            let mut x = input.clone();
            let mut fd = Vec::new();
            for i in 0..x.len() {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + H;
                let lp = probe(&conv2d_forward(&x, &params).unwrap(), &r);
                x.data_mut()[i] = orig - H;
                let lm = probe(&conv2d_forward(&x, &params).unwrap(), &r);
                x.data_mut()[i] = orig;
                fd.push((lp - lm) / (2.0 * H as f64));
            }
            let an: Vec<f64> = g.input.unwrap().data().iter().map(|&v| v as f64).collect();
            assert!(rel_err(&an, &fd) < 1e-3, "input grad seed {seed}");

            let mut fd = Vec::new();
            for i in 0..params.kernel.len() {
                let orig = params.kernel.data()[i];
                params.kernel.data_mut()[i] = orig + H;
                let lp = probe(&conv2d_forward(&input, &params).unwrap(), &r);
                params.kernel.data_mut()[i] = orig - H;
                let lm = probe(&conv2d_forward(&input, &params).unwrap(), &r);
                params.kernel.data_mut()[i] = orig;
                fd.push((lp - lm) / (2.0 * H as f64));
            }
            let an: Vec<f64> = g.kernel.data().iter().map(|&v| v as f64).collect();
            assert!(rel_err(&an, &fd) < 1e-3, "kernel grad seed {seed}");

            let mut fd = Vec::new();
            for i in 0..o {
                let orig = params.bias.data()[i];
                params.bias.data_mut()[i] = orig + H;
                let lp = probe(&conv2d_forward(&input, &params).unwrap(), &r);
                params.bias.data_mut()[i] = orig - H;
                let lm = probe(&conv2d_forward(&input, &params).unwrap(), &r);
                params.bias.data_mut()[i] = orig;
                fd.push((lp - lm) / (2.0 * H as f64));
            }
            let an: Vec<f64> = g.bias.data().iter().map(|&v| v as f64).collect();
            assert!(rel_err(&an, &fd) < 1e-3, "bias grad seed {seed}");
        }
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        const H: f32 = 1e-3;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            // keep away from the kink so the central difference is defined
            let x: Vec<f32> = rand_vec(16, &mut rng)
                .into_iter()
                .map(|v| if v.abs() < 0.01 { 0.5 } else { v })
                .collect();
            let x = Tensor::new(vec![16], x).unwrap();
            let r = rand_vec(16, &mut rng);
            let an = relu_backward(&Tensor::new(vec![16], r.clone()).unwrap(), &x).unwrap();
            let mut xp = x.clone();
            let mut fd = Vec::new();
            for i in 0..16 {
                let orig = xp.data()[i];
                xp.data_mut()[i] = orig + H;
                let lp = probe(&relu(&xp), &r);
                xp.data_mut()[i] = orig - H;
                let lm = probe(&relu(&xp), &r);
                xp.data_mut()[i] = orig;
                fd.push((lp - lm) / (2.0 * H as f64));
            }
            let an: Vec<f64> = an.data().iter().map(|&v| v as f64).collect();
            assert!(rel_err(&an, &fd) < 1e-3);
        }
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        const H: f32 = 1e-3;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let z = rand_vec(27, &mut rng);
            let r = rand_vec(27, &mut rng);
            let t = Tensor::new(vec![27], z.clone()).unwrap();
            let p = softmax_lastdim(&t);
            // d/dz_k Σ r_i p_i = p_k (r_k - Σ r_i p_i)
            let dot: f64 = p.data().iter().zip(&r).map(|(&a, &b)| a as f64 * b as f64).sum();
            let an: Vec<f64> = p
                .data()
                .iter()
                .zip(&r)
                .map(|(&pk, &rk)| pk as f64 * (rk as f64 - dot))
                .collect();
            let mut fd = Vec::new();
            let mut zp = t.clone();
            for i in 0..27 {
                let orig = zp.data()[i];
                zp.data_mut()[i] = orig + H;
                let lp = probe(&softmax_lastdim(&zp), &r);
                zp.data_mut()[i] = orig - H;
                let lm = probe(&softmax_lastdim(&zp), &r);
                zp.data_mut()[i] = orig;
                fd.push((lp - lm) / (2.0 * H as f64));
            }
            assert!(rel_err(&an, &fd) < 1e-3, "seed {seed}: {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::new(vec![3, 8, 8], rand_vec(192, &mut rng)).unwrap();
        let params = ConvLayerParams::new(
            Tensor::new(vec![4, 3, 3, 3], rand_vec(108, &mut rng)).unwrap(),
            Tensor::new(vec![4], rand_vec(4, &mut rng)).unwrap(),
        )
        .unwrap();
        let a = conv2d_forward(&input, &params).unwrap();
        let b = conv2d_forward(&input, &params).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
