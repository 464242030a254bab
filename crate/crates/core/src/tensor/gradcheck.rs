//! Central-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{contract_err, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar-valued `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; every input is perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return contract_err(format!("grad_check needs a scalar function, got {:?}", t.shape()));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng::normal_vec(&mut rng::rng(seed), n, 1.0)).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights so every output
    /// coordinate contributes a distinct gradient.
    pub(crate) fn probe(g: &mut Graph, v: Var) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
        let w = g.constant(Tensor::new(&shape, w)?);
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn sum_has_zero_error() {
        let x = rand_tensor(&[3, 4], 1);
        let e = grad_check(|g, x| Ok(g.sum(x)), &x, DEFAULT_EPS).unwrap();
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn matmul_grads() {
        let a = rand_tensor(&[4, 5], 2);
        let b = rand_tensor(&[5, 3], 3);
        let e = grad_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                probe(g, p)
            },
            &[a.clone(), b.clone()],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let a2 = if ta { rand_tensor(&[5, 4], 4) } else { a.clone() };
            let b2 = if tb { rand_tensor(&[3, 5], 5) } else { b.clone() };
            let e = grad_check_many(
                |g, v| {
                    let p = g.matmul_t(v[0], v[1], ta, tb)?;
                    probe(g, p)
                },
                &[a2, b2],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(e < 1e-6, "ta={ta} tb={tb}: {e}");
        }
    }

    #[test]
    fn matmul_chain_and_batched() {
        let a = rand_tensor(&[3, 4], 6);
        let b = rand_tensor(&[4, 4], 7);
        let c = rand_tensor(&[4, 2], 8);
        let e = grad_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let q = g.matmul(p, v[2])?;
                probe(g, q)
            },
            &[a, b, c],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
        let a = rand_tensor(&[2, 3, 4], 9);
        let b = rand_tensor(&[2, 5, 4], 10);
        let e = grad_check_many(
            |g, v| {
                let p = g.matmul_t(v[0], v[1], false, true)?;
                probe(g, p)
            },
            &[a, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn conv_grads() {
        let x = rand_tensor(&[2, 8, 8], 11);
        let w = rand_tensor(&[3, 2, 3, 3], 12);
        let b = rand_tensor(&[3], 13);
        let e = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y)
            },
            &[x.clone(), w, b.clone()],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
        let w1 = rand_tensor(&[3, 2, 1, 1], 14);
        let e = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y)
            },
            &[x, w1, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn layer_norm_softmax_gelu_grads() {
        let x = rand_tensor(&[4, 8], 15);
        let gam = rand_tensor(&[8], 16);
        let bet = rand_tensor(&[8], 17);
        let e = grad_check_many(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                probe(g, y)
            },
            &[x, gam, bet],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");

        let x = rand_tensor(&[3, 7], 18);
        let e = grad_check(|g, x| {
            let y = g.softmax(x)?;
            probe(g, y)
        }, &x, DEFAULT_EPS)
        .unwrap();
        assert!(e < 1e-5, "{e}");

        let x = rand_tensor(&[10], 19);
        let e = grad_check(|g, x| {
            let y = g.gelu(x);
            probe(g, y)
        }, &x, DEFAULT_EPS)
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn data_movement_and_broadcast_grads() {
        let x = rand_tensor(&[8, 2, 2], 20);
        let s = rand_tensor(&[8], 21);
        let b = rand_tensor(&[2, 2], 22);
        let e = grad_check_many(
            |g, v| {
                let y = g.pixel_shuffle(v[0], 2)?;
                let y = g.pixel_unshuffle(y, 2)?;
                let y = g.scale_rows(y, v[1])?;
                let y = g.add_broadcast(y, v[2])?;
                let n = g.narrow_rows(y, 1, 5)?;
                let r = g.reshape(n, &[5, 4])?;
                let c = g.narrow_cols(r, 3)?;
                let k = g.concat(&[c, c])?;
                let inv = g.add_scalar(v[1], 2.5);
                let inv = g.recip(inv);
                let k2 = g.sum(inv);
                let p = probe(g, k)?;
                g.add(p, k2)
            },
            &[x, s, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn composite_conv_layernorm_softmax() {
        let x = rand_tensor(&[2, 4, 4], 23);
        let w = rand_tensor(&[2, 2, 3, 3], 24);
        let b = rand_tensor(&[2], 25);
        let gam = rand_tensor(&[4], 26);
        let bet = rand_tensor(&[4], 27);
        let e = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                let r = g.reshape(y, &[8, 4])?;
                let n = g.layer_norm(r, v[3], v[4])?;
                let s = g.softmax(n)?;
                probe(g, s)
            },
            &[x, w, b, gam, bet],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn wrong_backward_rule_is_detected() {
        fn bad_df(x: f64) -> f64 {
            -x.sin() // true derivative of sin is cos
        }
        let x = rand_tensor(&[6], 28);
        let e = grad_check(|g, x| {
            let y = g.elementwise(x, f64::sin, bad_df);
            Ok(g.sum(y))
        }, &x, DEFAULT_EPS)
        .unwrap();
        assert!(e > 1e-2, "{e}");
        let ok = grad_check(|g, x| {
            let y = g.elementwise(x, f64::sin, f64::cos);
            Ok(g.sum(y))
        }, &x, DEFAULT_EPS)
        .unwrap();
        assert!(ok < 1e-8);
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = rand_tensor(&[2], 29);
        assert!(grad_check(|_, x| Ok(x), &x, DEFAULT_EPS).is_err());
    }
}
