//! Central finite-difference verification of the resampler backward pass.
//!
//! The probe loss is the sum of squares of the operator output, so the
//! upstream gradient is `2·out`. Relative error per entry is
//! `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::favr::{
    attend_backward, attend_forward, favr_backward, favr_forward, init_params, AttentionWeights,
    InitScheme, ResamplerParams,
};
use crate::matrix::Matrix;

/// Denominator floor that keeps near-zero gradients from dominating the
/// relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    CrossAttend,
    FavrFuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: GradOp,
    pub max_rel_err: f64,
    /// `tensor[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
    pub eps: f64,
    pub tol: f64,
    pub passed: bool,
}

/// A named flat tensor with its analytic gradient.
struct Slot {
    name: String,
    values: Vec<f64>,
    grad: Vec<f64>,
}

fn compare(
    op: GradOp,
    mut slots: Vec<Slot>,
    eps: f64,
    tol: f64,
    tamper: &dyn Fn(&str, &mut [f64]),
    loss: &dyn Fn(&[Slot]) -> Result<f64>,
) -> Result<GradReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    for s in &mut slots {
        if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "non-finite input {}[{i}]",
                s.name
            )));
        }
        tamper(&s.name, &mut s.grad);
        if let Some(i) = s.grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("{}[{i}]", s.name)));
        }
    }

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0;
    for si in 0..slots.len() {
        for k in 0..slots[si].values.len() {
            let orig = slots[si].values[k];
            slots[si].values[k] = orig + eps;
            let plus = loss(&slots)?;
            slots[si].values[k] = orig - eps;
            let minus = loss(&slots)?;
            slots[si].values[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "numeric {}[{k}]",
                    slots[si].name
                )));
            }
            let analytic = slots[si].grad[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}]", slots[si].name));
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        op,
        max_rel_err: worst.0,
        worst: worst.1,
        checked,
        eps,
        tol,
        passed: worst.0 <= tol,
    })
}

fn slot(name: &str, m: &Matrix, g: &Matrix) -> Slot {
    Slot {
        name: name.to_string(),
        values: m.data().to_vec(),
        grad: g.data().to_vec(),
    }
}

fn rebuild(like: &Matrix, values: &[f64]) -> Matrix {
    Matrix::from_fn(like.rows(), like.dim(), |r, c| values[r * like.dim() + c])
}

pub fn check_cross_attend(
    queries: &Matrix,
    context: &Matrix,
    weights: &AttentionWeights,
    eps: f64,
    tol: f64,
) -> Result<GradReport> {
    check_cross_attend_with(queries, context, weights, eps, tol, &|_, _| {})
}

/// Like [`check_cross_attend`], but lets the caller alter analytic gradients
/// before comparison.
pub fn check_cross_attend_with(
    queries: &Matrix,
    context: &Matrix,
    weights: &AttentionWeights,
    eps: f64,
    tol: f64,
    tamper: &dyn Fn(&str, &mut [f64]),
) -> Result<GradReport> {
    let (out, cache) = attend_forward(queries, context, weights)?;
    let mut d_out = out.clone();
    d_out.scale(2.0);
    let g = attend_backward(&cache, weights, &d_out)?;

    let slots = vec![
        slot("queries", queries, &g.queries),
        slot("context", context, &g.context),
        slot("w_q", &weights.w_q, &g.weights.w_q),
        slot("w_k", &weights.w_k, &g.weights.w_k),
        slot("w_v", &weights.w_v, &g.weights.w_v),
    ];
    let loss = |s: &[Slot]| -> Result<f64> {
        let w = AttentionWeights {
            w_q: rebuild(&weights.w_q, &s[2].values),
            w_k: rebuild(&weights.w_k, &s[3].values),
            w_v: rebuild(&weights.w_v, &s[4].values),
        };
        let out = attend_forward(
            &rebuild(queries, &s[0].values),
            &rebuild(context, &s[1].values),
            &w,
        )?
        .0;
        Ok(out.sum_squares())
    };
    compare(GradOp::CrossAttend, slots, eps, tol, tamper, &loss)
}

pub fn check_favr_fuse(
    frontal: &Matrix,
    lateral: Option<&Matrix>,
    params: &ResamplerParams,
    eps: f64,
    tol: f64,
) -> Result<GradReport> {
    check_favr_fuse_with(frontal, lateral, params, eps, tol, &|_, _| {})
}

pub fn check_favr_fuse_with(
    frontal: &Matrix,
    lateral: Option<&Matrix>,
    params: &ResamplerParams,
    eps: f64,
    tol: f64,
    tamper: &dyn Fn(&str, &mut [f64]),
) -> Result<GradReport> {
    let (fused, cache) = favr_forward(frontal, lateral, params)?;
    let mut d_z = fused.z.clone();
    d_z.scale(2.0);
    let g = favr_backward(&cache, params, &d_z)?;

    let mut slots: Vec<Slot> = params
        .tensors()
        .into_iter()
        .zip(g.params.tensors())
        .map(|((name, v), (_, gv))| Slot {
            name: name.to_string(),
            values: v.to_vec(),
            grad: gv.to_vec(),
        })
        .collect();
    let n_param_slots = slots.len();
    slots.push(slot("frontal_tokens", frontal, &g.frontal));
    if let (Some(hl), Some(ghl)) = (lateral, &g.lateral) {
        slots.push(slot("lateral_tokens", hl, ghl));
    }

    let loss = |s: &[Slot]| -> Result<f64> {
        let mut p = params.clone();
        for ((_, dst), src) in p.tensors_mut().into_iter().zip(&s[..n_param_slots]) {
            dst.copy_from_slice(&src.values);
        }
        if p.share_lateral {
            p.lateral = p.frontal.clone();
        }
        let hf = rebuild(frontal, &s[n_param_slots].values);
        let hl = lateral.map(|m| rebuild(m, &s[n_param_slots + 1].values));
        Ok(favr_forward(&hf, hl.as_ref(), &p)?.0.z.sum_squares())
    };
    compare(GradOp::FavrFuse, slots, eps, tol, tamper, &loss)
}

/// Shapes for a randomized gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShapes {
    pub n_queries: usize,
    pub model_dim: usize,
    pub out_dim: usize,
    pub frontal_tokens: usize,
    pub lateral_tokens: usize,
}

impl Default for ToyShapes {
    fn default() -> Self {
        Self {
            n_queries: 2,
            model_dim: 3,
            out_dim: 2,
            frontal_tokens: 4,
            lateral_tokens: 3,
        }
    }
}

/// Gradient check on inputs drawn from `seed`: Gaussian tokens and
/// scaled-Gaussian parameters.
pub fn check_random(
    op: GradOp,
    seed: u64,
    shapes: ToyShapes,
    eps: f64,
    tol: f64,
) -> Result<GradReport> {
    let params = init_params(
        seed,
        shapes.n_queries,
        shapes.model_dim,
        shapes.out_dim,
        InitScheme::ScaledGaussian,
        false,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut draw = |rows: usize| {
        Matrix::from_fn(rows, shapes.model_dim, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        })
    };
    let frontal = draw(shapes.frontal_tokens);
    let lateral = (shapes.lateral_tokens > 0).then(|| draw(shapes.lateral_tokens));
    match op {
        GradOp::CrossAttend => {
            check_cross_attend(&params.queries, &frontal, &params.frontal, eps, tol)
        }
        GradOp::FavrFuse => check_favr_fuse(&frontal, lateral.as_ref(), &params, eps, tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_fuse_passes() {
        let r = check_random(GradOp::FavrFuse, 1, ToyShapes::default(), 1e-4, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.checked > 30);
    }

    #[test]
    fn identity_attention_passes() {
        let p = init_params(0, 2, 2, 2, InitScheme::Identity, false).unwrap();
        let hf = Matrix::from_rows(&[[0.3, -0.2], [1.0, 0.5], [-0.7, 0.1]]).unwrap();
        let hl = Matrix::from_rows(&[[0.2, 0.9]]).unwrap();
        let r = check_favr_fuse(&hf, Some(&hl), &p, 1e-4, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        let r = check_cross_attend(&p.queries, &hf, &p.frontal, 1e-4, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn shared_lateral_passes() {
        let p = init_params(4, 3, 4, 2, InitScheme::ScaledGaussian, true).unwrap();
        let hf = Matrix::from_fn(5, 4, |r, c| ((r + 2 * c) as f64).cos());
        let hl = Matrix::from_fn(2, 4, |r, c| ((3 * r + c) as f64).sin());
        let r = check_favr_fuse(&hf, Some(&hl), &p, 1e-4, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn single_row_context_gives_linear_gradient() {
        // One key: attention is 1 everywhere, so out_r = c·W_v for every query
        // row and the loss is M·|c·W_v|². Closed form: dW_v = 2M·cᵀ(c·W_v),
        // dW_q = dW_k = 0.
        let p = init_params(9, 2, 3, 3, InitScheme::ScaledGaussian, false).unwrap();
        let c = Matrix::from_rows(&[[0.4, -1.1, 0.6]]).unwrap();
        let (out, cache) = attend_forward(&p.queries, &c, &p.frontal).unwrap();
        let mut d_out = out.clone();
        d_out.scale(2.0);
        let g = attend_backward(&cache, &p.frontal, &d_out).unwrap();

        let cw = c.matmul(&p.frontal.w_v).unwrap();
        let mut expected = c.t_matmul(&cw).unwrap();
        expected.scale(2.0 * 2.0);
        assert!(g.weights.w_v.max_abs_diff(&expected) < 1e-14);
        assert!(g.weights.w_q.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.w_k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sabotaged_gradient_fails() {
        let shapes = ToyShapes::default();
        let params = init_params(3, 2, 3, 2, InitScheme::ScaledGaussian, false).unwrap();
        let hf = Matrix::from_fn(shapes.frontal_tokens, 3, |r, c| {
            ((r * 5 + c) as f64 * 0.3).sin()
        });
        let tamper = |name: &str, g: &mut [f64]| {
            if name == "w_k" {
                g.iter_mut().for_each(|v| *v += 0.1);
            }
        };
        let r = check_cross_attend_with(&params.queries, &hf, &params.frontal, 1e-4, 1e-4, &tamper)
            .unwrap();
        assert!(!r.passed);
        assert!(r.worst.starts_with("w_k"), "{}", r.worst);
        assert!(r.max_rel_err > 1e-4);
    }

    #[test]
    fn non_finite_gradient_reported() {
        let p = init_params(3, 2, 2, 2, InitScheme::Identity, false).unwrap();
        let hf = Matrix::identity(2);
        let tamper = |name: &str, g: &mut [f64]| {
            if name == "w_v" {
                g[0] = f64::NAN;
            }
        };
        assert!(matches!(
            check_cross_attend_with(&p.queries, &hf, &p.frontal, 1e-4, 1e-4, &tamper),
            Err(Error::NumericalFailure(loc)) if loc == "w_v[0]"
        ));
        assert!(check_cross_attend(&p.queries, &hf, &p.frontal, 0.0, 1e-4).is_err());
    }
}
