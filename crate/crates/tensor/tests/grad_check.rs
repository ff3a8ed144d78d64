//! Central finite-difference checks (f64, h=1e-4) for every
//! differentiable op, each at 20 random seeds.

use latentsr_tensor::check::{central_diff, max_rel_error};
use latentsr_tensor::{backward, no_grad, scaled_dot_product_attention, ComplexTensor, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Builds inputs, forms `sum(w * f(inputs))`, and compares the analytic
/// gradient of every input against central differences.
fn fd_check<F>(name: &str, shapes: &[&[usize]], ranges: &[(f64, f64)], f: F)
where
    F: Fn(&[Tensor<f64>]) -> latentsr_tensor::Result<Tensor<f64>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9d5c + seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .zip(ranges)
            .map(|(s, &(lo, hi))| rand_vec(&mut rng, s.iter().product(), lo, hi))
            .collect();
        let vars: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(shapes)
            .map(|(d, s)| Tensor::var(d.clone(), s).unwrap())
            .collect();
        let out = f(&vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
        let w_data = rand_vec(&mut rng, out.numel(), -1.0, 1.0);
        let weights = Tensor::from_vec(w_data.clone(), out.shape()).unwrap();
        let loss = out.mul(&weights).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();

        for (i, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(var)
                .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"))
                .to_vec();
            let mut eval = |flat: &[f64]| -> f64 {
                no_grad(|| {
                    let mut probe: Vec<Tensor<f64>> = Vec::with_capacity(vars.len());
                    for (j, s) in shapes.iter().enumerate() {
                        let data = if j == i {
                            flat.to_vec()
                        } else {
                            inputs[j].clone()
                        };
                        probe.push(Tensor::from_vec(data, s).unwrap());
                    }
                    let out = f(&probe).unwrap();
                    let w = Tensor::from_vec(w_data.clone(), out.shape()).unwrap();
                    out.mul(&w).unwrap().sum_all().unwrap().item()
                })
            };
            let numeric = central_diff(&mut eval, &inputs[i], H);
            let err = max_rel_error(&analytic, &numeric);
            assert!(
                err < TOL,
                "{name}: input {i}, seed {seed}: rel error {err:.3e} >= {TOL:.0e}"
            );
        }
    }
}

#[test]
fn grad_add() {
    fd_check(
        "add",
        &[&[4, 4], &[4, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].add(&v[1]),
    );
}

#[test]
fn grad_sub() {
    fd_check(
        "sub",
        &[&[4, 4], &[4, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].sub(&v[1]),
    );
}

#[test]
fn grad_mul() {
    fd_check(
        "mul",
        &[&[4, 4], &[4, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].mul(&v[1]),
    );
}

#[test]
fn grad_scalar_ops() {
    fd_check("add_scalar", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        v[0].add_scalar(0.37)
    });
    fd_check("mul_scalar", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        v[0].mul_scalar(-1.91)
    });
}

#[test]
fn grad_abs() {
    // Inputs kept away from the kink at zero.
    fd_check("abs", &[&[4, 4]], &[(0.2, 1.0)], |v| {
        v[0].mul_scalar(1.0)?.abs()
    });
    fd_check("abs_neg", &[&[4, 4]], &[(-1.0, -0.2)], |v| v[0].abs());
}

#[test]
fn grad_sqrt() {
    fd_check("sqrt", &[&[4, 4]], &[(0.5, 2.0)], |v| v[0].sqrt());
}

#[test]
fn grad_silu_gelu() {
    fd_check("silu", &[&[4, 4]], &[(-2.0, 2.0)], |v| v[0].silu());
    fd_check("gelu", &[&[4, 4]], &[(-2.0, 2.0)], |v| v[0].gelu());
}

#[test]
fn grad_matmul() {
    fd_check(
        "matmul",
        &[&[4, 3], &[3, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].matmul(&v[1]),
    );
    fd_check(
        "matmul_batched",
        &[&[2, 3, 4], &[2, 4, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].matmul(&v[1]),
    );
    fd_check(
        "matmul_nt",
        &[&[4, 3], &[5, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].matmul_nt(&v[1]),
    );
    fd_check(
        "matmul_nt_batched",
        &[&[2, 4, 3], &[2, 5, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].matmul_nt(&v[1]),
    );
}

#[test]
fn grad_conv2d() {
    fd_check(
        "conv2d_s1",
        &[&[2, 2, 4, 4], &[3, 2, 3, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].conv2d(&v[1], 1, 1),
    );
    fd_check(
        "conv2d_s2",
        &[&[1, 2, 4, 4], &[3, 2, 3, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].conv2d(&v[1], 2, 1),
    );
    fd_check(
        "conv2d_1x1",
        &[&[1, 3, 4, 4], &[2, 3, 1, 1]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].conv2d(&v[1], 1, 0),
    );
}

#[test]
fn grad_biases() {
    fd_check(
        "add_channel_bias",
        &[&[2, 3, 4, 4], &[3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].add_channel_bias(&v[1]),
    );
    fd_check(
        "add_batch_channel_bias",
        &[&[2, 3, 4, 4], &[2, 3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].add_batch_channel_bias(&v[1]),
    );
    fd_check(
        "add_row_bias",
        &[&[5, 3], &[3]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| v[0].add_row_bias(&v[1]),
    );
}

#[test]
fn grad_group_norm() {
    fd_check(
        "group_norm",
        &[&[2, 4, 4, 4], &[4], &[4]],
        &[(-1.0, 1.0), (0.5, 1.5), (-0.5, 0.5)],
        |v| v[0].group_norm(&v[1], &v[2], 2, 1e-5),
    );
}

#[test]
fn grad_softmax() {
    fd_check("softmax_last", &[&[3, 5]], &[(-2.0, 2.0)], |v| {
        v[0].softmax_last()
    });
}

#[test]
fn grad_reductions() {
    fd_check("mean_all", &[&[4, 4]], &[(-1.0, 1.0)], |v| v[0].mean_all());
    fd_check("sum_all", &[&[4, 4]], &[(-1.0, 1.0)], |v| v[0].sum_all());
}

#[test]
fn grad_shape_ops() {
    fd_check("reshape", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        v[0].reshape(&[2, 8])?.silu()
    });
    fd_check(
        "concat_channels",
        &[&[1, 2, 4, 4], &[1, 3, 4, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| Tensor::concat_channels(&v[0], &v[1]),
    );
    fd_check(
        "concat_rows",
        &[&[3, 4], &[2, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        |v| Tensor::concat_rows(&v[0], &v[1]),
    );
    fd_check("slice_rows", &[&[6, 4]], &[(-1.0, 1.0)], |v| {
        v[0].slice_rows(1, 3)
    });
    fd_check("index_select_rows", &[&[5, 3]], &[(-1.0, 1.0)], |v| {
        v[0].index_select_rows(&[4, 0, 0, 2, 3])
    });
    fd_check("upsample_nearest_2x", &[&[1, 2, 4, 4]], &[(-1.0, 1.0)], |v| {
        v[0].upsample_nearest_2x()
    });
    fd_check("nchw_to_tokens", &[&[2, 3, 2, 2]], &[(-1.0, 1.0)], |v| {
        v[0].nchw_to_tokens()?.silu()
    });
    fd_check("tokens_to_nchw", &[&[2, 4, 3]], &[(-1.0, 1.0)], |v| {
        v[0].tokens_to_nchw(2, 2)?.silu()
    });
    fd_check("split_heads", &[&[2, 3, 4]], &[(-1.0, 1.0)], |v| {
        v[0].split_heads(2)?.silu()
    });
    fd_check("merge_heads", &[&[4, 3, 2]], &[(-1.0, 1.0)], |v| {
        v[0].merge_heads(2)?.silu()
    });
}

#[test]
fn grad_attention() {
    fd_check(
        "attention",
        &[&[1, 4, 4], &[1, 4, 4], &[1, 4, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
        |v| scaled_dot_product_attention(&v[0], &v[1], &v[2], 2),
    );
}

#[test]
fn grad_fft_ops() {
    fd_check("fft2_re", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        Ok(v[0].fft2()?.re)
    });
    fd_check("fft2_im", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        Ok(v[0].fft2()?.im)
    });
    fd_check("ifft2_real", &[&[4, 4], &[4, 4]], &[(-1.0, 1.0), (-1.0, 1.0)], |v| {
        let z = ComplexTensor::new(v[0].clone(), v[1].clone())?;
        Tensor::ifft2_real(&z)
    });
    fd_check("complex_mul", &[&[4, 4], &[4, 4], &[4, 4], &[4, 4]], &[(-1.0, 1.0); 4], |v| {
        let a = ComplexTensor::new(v[0].clone(), v[1].clone())?;
        let b = ComplexTensor::new(v[2].clone(), v[3].clone())?;
        let c = a.mul(&b)?;
        c.re.add(&c.im)
    });
    fd_check("magnitude", &[&[4, 4], &[4, 4]], &[(0.2, 1.0), (0.2, 1.0)], |v| {
        ComplexTensor::new(v[0].clone(), v[1].clone())?.magnitude()
    });
    // Round trip through the frequency domain and back.
    fd_check("fft_roundtrip_chain", &[&[4, 4]], &[(-1.0, 1.0)], |v| {
        let z = v[0].fft2()?;
        Tensor::ifft2_real(&z)
    });
}

/// A 3-op chain where the whole-graph gradient must equal the manually
/// composed chain-rule product of the per-stage gradients.
#[test]
fn composite_chain_matches_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x_data = rand_vec(&mut rng, 16, -1.5, 1.5);
    let x = Tensor::<f64>::var(x_data.clone(), &[4, 4]).unwrap();

    // loss = mean(z * z), z = silu(x)
    let z = x.silu().unwrap();
    let w = z.mul(&z).unwrap();
    let loss = w.mean_all().unwrap();
    let grads = backward(&loss).unwrap();
    let whole = grads.get(&x).unwrap().to_vec();

    // Manual: dL/dw = 1/n, dw/dz = 2z, dz/dx = silu'(x)
    let n = 16.0;
    for (i, &xv) in x_data.iter().enumerate() {
        let s = 1.0 / (1.0 + (-xv).exp());
        let zv = xv * s;
        let dz_dx = s * (1.0 + xv * (1.0 - s));
        let manual = (1.0 / n) * 2.0 * zv * dz_dx;
        let got = whole[i];
        assert!(
            (manual - got).abs() <= 1e-12 * manual.abs().max(1.0),
            "element {i}: manual {manual} vs whole-graph {got}"
        );
    }
}

/// Reusing a node twice must accumulate both contributions exactly once
/// per node visit: d(x*x + x*x)/dx = 4x.
#[test]
fn diamond_graph_accumulates_once() {
    let x = Tensor::<f64>::var(vec![0.5, -1.25, 2.0], &[3]).unwrap();
    let a = x.mul(&x).unwrap();
    let b = x.mul(&x).unwrap();
    let loss = a.add(&b).unwrap().sum_all().unwrap();
    let grads = backward(&loss).unwrap();
    let g = grads.get(&x).unwrap().to_vec();
    for (gv, xv) in g.iter().zip(x.to_vec()) {
        assert!((gv - 4.0 * xv).abs() < 1e-12);
    }
}

/// Detached branches contribute no gradient.
#[test]
fn detach_stops_gradient() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0], &[2]).unwrap();
    let straight = x.detach();
    let loss = x.mul(&straight).unwrap().sum_all().unwrap();
    let grads = backward(&loss).unwrap();
    // d(x * const)/dx = const = the detached values
    assert_eq!(grads.get(&x).unwrap().to_vec(), vec![1.0, 2.0]);
}

/// Tape visits every node exactly once and in execution order.
#[test]
fn tape_order_is_execution_order() {
    let x = Tensor::<f64>::var(vec![1.0; 4], &[4]).unwrap();
    let a = x.silu().unwrap();
    let b = a.mul(&a).unwrap();
    let c = b.sum_all().unwrap();
    let tape = latentsr_tensor::Tape::from_output(&c);
    let ids = tape.node_ids();
    assert_eq!(ids.len(), 4);
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "ids must be strictly increasing");
    let unique: std::collections::HashSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len());
}
