//! Frontal-guided resampling: learnable disease queries attend over frontal
//! tokens, the resulting tokens attend over lateral tokens, and both are
//! concatenated per query and projected to a fixed width.
//!
//! Each resampler is one single-head scaled dot-product cross-attention with
//! learned Q/K/V projections and no residual or normalization layers. The
//! fused output always has `n_queries` rows regardless of how many tokens the
//! views contribute. Missing lateral views contribute a zero block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix, TokenMatrix};

/// Projections of one cross-attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    /// `[query_in × key_dim]`
    pub w_q: Matrix,
    /// `[context_in × key_dim]`
    pub w_k: Matrix,
    /// `[context_in × value_dim]`
    pub w_v: Matrix,
}

impl AttentionWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            w_q: Matrix::identity(dim),
            w_k: Matrix::identity(dim),
            w_v: Matrix::identity(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Matrix::zeros(self.w_q.rows(), self.w_q.dim()),
            w_k: Matrix::zeros(self.w_k.rows(), self.w_k.dim()),
            w_v: Matrix::zeros(self.w_v.rows(), self.w_v.dim()),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.dim()
    }

    pub fn axpy(&mut self, scale: f64, other: &AttentionWeights) -> Result<()> {
        self.w_q.axpy(scale, &other.w_q)?;
        self.w_k.axpy(scale, &other.w_k)?;
        self.w_v.axpy(scale, &other.w_v)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.w_k.dim() == self.w_q.dim()
            && self.w_k.rows() == self.w_v.rows()
            && self.w_q.dim() > 0;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "attention weights W_q {:?}, W_k {:?}, W_v {:?}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape()
            )));
        }
        Ok(())
    }
}

/// Intermediates of one attention forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    queries: Matrix,
    context: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-stochastic attention matrix `[M × N]`.
    pub attention: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub queries: Matrix,
    pub context: Matrix,
    pub weights: AttentionWeights,
}

/// `softmax(Q Kᵀ / √d_k) V` with `Q = queries·W_q`, `K = context·W_k`,
/// `V = context·W_v`.
pub fn cross_attend(
    queries: &TokenMatrix,
    context: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<TokenMatrix> {
    attend_forward(queries, context, w).map(|(out, _)| out)
}

pub fn attend_forward(
    queries: &TokenMatrix,
    context: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<(TokenMatrix, AttentionCache)> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    w.validate()?;
    let q = queries.matmul(&w.w_q)?;
    let k = context.matmul(&w.w_k)?;
    let v = context.matmul(&w.w_v)?;
    let mut attention = q.matmul_t(&k)?;
    attention.scale(1.0 / (w.key_dim() as f64).sqrt());
    for r in 0..attention.rows() {
        softmax_in_place(attention.row_mut(r));
    }
    let out = attention.matmul(&v)?;
    Ok((
        out,
        AttentionCache {
            queries: queries.clone(),
            context: context.clone(),
            q,
            k,
            v,
            attention,
        },
    ))
}

pub fn attend_backward(
    cache: &AttentionCache,
    w: &AttentionWeights,
    d_out: &Matrix,
) -> Result<AttentionGrads> {
    let a = &cache.attention;
    let d_attn = d_out.matmul_t(&cache.v)?;
    let d_v = a.t_matmul(d_out)?;

    // Softmax Jacobian per row: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
    let mut d_scores = Matrix::zeros(a.rows(), a.dim());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let dar = d_attn.row(r);
        let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for ((o, &x), &y) in d_scores.row_mut(r).iter_mut().zip(ar).zip(dar) {
            *o = x * (y - inner);
        }
    }
    d_scores.scale(1.0 / (w.key_dim() as f64).sqrt());

    let d_q = d_scores.matmul(&cache.k)?;
    let d_k = d_scores.t_matmul(&cache.q)?;

    let mut d_context = d_k.matmul_t(&w.w_k)?;
    d_context.add_assign(&d_v.matmul_t(&w.w_v)?)?;

    Ok(AttentionGrads {
        queries: d_q.matmul_t(&w.w_q)?,
        context: d_context,
        weights: AttentionWeights {
            w_q: cache.queries.t_matmul(&d_q)?,
            w_k: cache.context.t_matmul(&d_k)?,
            w_v: cache.context.t_matmul(&d_v)?,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplerParams {
    /// Learnable disease queries `[n_queries × model_dim]`.
    pub queries: TokenMatrix,
    pub frontal: AttentionWeights,
    pub lateral: AttentionWeights,
    /// When set, the lateral resampler reuses the frontal weights and
    /// `lateral` is ignored.
    #[serde(default)]
    pub share_lateral: bool,
    /// `[2·model_dim × out_dim]`
    pub projection: Matrix,
    pub bias: Vec<f64>,
}

impl ResamplerParams {
    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.queries.dim()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.dim()
    }

    pub fn lateral_weights(&self) -> &AttentionWeights {
        if self.share_lateral {
            &self.frontal
        } else {
            &self.lateral
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            queries: Matrix::zeros(self.queries.rows(), self.queries.dim()),
            frontal: self.frontal.zeros_like(),
            lateral: self.lateral.zeros_like(),
            share_lateral: self.share_lateral,
            projection: Matrix::zeros(self.projection.rows(), self.projection.dim()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn axpy(&mut self, scale: f64, other: &ResamplerParams) -> Result<()> {
        self.queries.axpy(scale, &other.queries)?;
        self.frontal.axpy(scale, &other.frontal)?;
        self.lateral.axpy(scale, &other.lateral)?;
        self.projection.axpy(scale, &other.projection)?;
        for (b, g) in self.bias.iter_mut().zip(&other.bias) {
            *b += scale * g;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        if self.n_queries() == 0 || d == 0 {
            return Err(Error::ShapeMismatch(
                "resampler needs at least one query and one feature".into(),
            ));
        }
        for (name, w) in [
            ("frontal", &self.frontal),
            ("lateral", self.lateral_weights()),
        ] {
            w.validate()?;
            if w.w_q.shape() != (d, d) || w.w_k.shape() != (d, d) || w.w_v.shape() != (d, d) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} projections must be {d}x{d}"
                )));
            }
        }
        if self.projection.rows() != 2 * d || self.bias.len() != self.out_dim() {
            return Err(Error::ShapeMismatch(format!(
                "projection {:?} and bias {} do not fit model dim {d}",
                self.projection.shape(),
                self.bias.len()
            )));
        }
        let finite = self.queries.all_finite()
            && self.projection.all_finite()
            && self.bias.iter().all(|b| b.is_finite());
        if !finite {
            return Err(Error::InvalidRecord(
                "non-finite resampler parameter".into(),
            ));
        }
        Ok(())
    }

    /// Flat views of every trainable tensor, in a fixed order. Shared lateral
    /// weights are skipped.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = vec![
            ("queries", self.queries.data()),
            ("frontal.w_q", self.frontal.w_q.data()),
            ("frontal.w_k", self.frontal.w_k.data()),
            ("frontal.w_v", self.frontal.w_v.data()),
        ];
        if !self.share_lateral {
            v.extend([
                ("lateral.w_q", self.lateral.w_q.data()),
                ("lateral.w_k", self.lateral.w_k.data()),
                ("lateral.w_v", self.lateral.w_v.data()),
            ]);
        }
        v.push(("projection", self.projection.data()));
        v.push(("bias", &self.bias));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v = vec![
            ("queries", self.queries.data_mut()),
            ("frontal.w_q", self.frontal.w_q.data_mut()),
            ("frontal.w_k", self.frontal.w_k.data_mut()),
            ("frontal.w_v", self.frontal.w_v.data_mut()),
        ];
        if !self.share_lateral {
            v.extend([
                ("lateral.w_q", self.lateral.w_q.data_mut()),
                ("lateral.w_k", self.lateral.w_k.data_mut()),
                ("lateral.w_v", self.lateral.w_v.data_mut()),
            ]);
        }
        v.push(("projection", self.projection.data_mut()));
        v.push(("bias", self.bias.as_mut_slice()));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Identity projections and `P_v = [I; I] / 2`; needs `model_dim == out_dim`.
    Identity,
    /// Independent N(0, 1/model_dim) entries.
    ScaledGaussian,
}

/// Deterministic parameter initialization. Identity queries are the unit
/// vectors `e_{i mod D}`; biases start at zero under both schemes.
pub fn init_params(
    seed: u64,
    n_queries: usize,
    model_dim: usize,
    out_dim: usize,
    scheme: InitScheme,
    share_lateral: bool,
) -> Result<ResamplerParams> {
    if n_queries == 0 || model_dim == 0 || out_dim == 0 {
        return Err(Error::ShapeMismatch(
            "resampler dimensions must be at least 1".into(),
        ));
    }
    let params = match scheme {
        InitScheme::Identity => {
            if model_dim != out_dim {
                return Err(Error::ShapeMismatch(format!(
                    "identity init needs model_dim == out_dim, got {model_dim} and {out_dim}"
                )));
            }
            let half = Matrix::from_fn(2 * model_dim, model_dim, |r, c| {
                if r % model_dim == c {
                    0.5
                } else {
                    0.0
                }
            });
            ResamplerParams {
                queries: Matrix::from_fn(n_queries, model_dim, |r, c| {
                    if r % model_dim == c {
                        1.0
                    } else {
                        0.0
                    }
                }),
                frontal: AttentionWeights::identity(model_dim),
                lateral: AttentionWeights::identity(model_dim),
                share_lateral,
                projection: half,
                bias: vec![0.0; out_dim],
            }
        }
        InitScheme::ScaledGaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0 / (model_dim as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut draw = |rows, cols| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
            let queries = draw(n_queries, model_dim);
            let frontal = AttentionWeights {
                w_q: draw(model_dim, model_dim),
                w_k: draw(model_dim, model_dim),
                w_v: draw(model_dim, model_dim),
            };
            let lateral = AttentionWeights {
                w_q: draw(model_dim, model_dim),
                w_k: draw(model_dim, model_dim),
                w_v: draw(model_dim, model_dim),
            };
            let projection = draw(2 * model_dim, out_dim);
            ResamplerParams {
                queries,
                lateral: if share_lateral {
                    frontal.clone()
                } else {
                    lateral
                },
                frontal,
                share_lateral,
                projection,
                bias: vec![0.0; out_dim],
            }
        }
    };
    Ok(params)
}

/// Fixed-size visual features handed to the decoder: `[n_queries × out_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeatures {
    pub z: TokenMatrix,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    frontal: AttentionCache,
    lateral: Option<AttentionCache>,
    concat: Matrix,
}

impl FuseCache {
    pub fn frontal_attention(&self) -> &Matrix {
        &self.frontal.attention
    }

    pub fn lateral_attention(&self) -> Option<&Matrix> {
        self.lateral.as_ref().map(|c| &c.attention)
    }
}

pub fn favr_fuse(
    frontal: &TokenMatrix,
    lateral: Option<&TokenMatrix>,
    params: &ResamplerParams,
) -> Result<FusedFeatures> {
    favr_forward(frontal, lateral, params).map(|(f, _)| f)
}

pub fn favr_forward(
    frontal: &TokenMatrix,
    lateral: Option<&TokenMatrix>,
    params: &ResamplerParams,
) -> Result<(FusedFeatures, FuseCache)> {
    if frontal.is_empty() {
        return Err(Error::MissingFrontal);
    }
    params.validate()?;
    let (t_front, front_cache) = attend_forward(&params.queries, frontal, &params.frontal)?;
    let (t_lat, lat_cache) = match lateral {
        Some(hl) if !hl.is_empty() => {
            let (t, c) = attend_forward(&t_front, hl, params.lateral_weights())?;
            (t, Some(c))
        }
        _ => (Matrix::zeros(t_front.rows(), t_front.dim()), None),
    };
    let concat = t_front.hcat(&t_lat)?;
    let mut z = concat.matmul(&params.projection)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&params.bias) {
            *v += b;
        }
    }
    Ok((
        FusedFeatures { z },
        FuseCache {
            frontal: front_cache,
            lateral: lat_cache,
            concat,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub params: ResamplerParams,
    pub frontal: Matrix,
    pub lateral: Option<Matrix>,
}

pub fn favr_backward(
    cache: &FuseCache,
    params: &ResamplerParams,
    d_z: &Matrix,
) -> Result<FuseGrads> {
    let d = params.model_dim();
    let mut grads = params.zeros_like();

    grads.projection = cache.concat.t_matmul(d_z)?;
    for r in 0..d_z.rows() {
        for (g, v) in grads.bias.iter_mut().zip(d_z.row(r)) {
            *g += v;
        }
    }
    let d_concat = d_z.matmul_t(&params.projection)?;
    let mut d_front = d_concat.columns(0, d);

    let d_lateral = match &cache.lateral {
        Some(lc) => {
            let d_tl = d_concat.columns(d, 2 * d);
            let g = attend_backward(lc, params.lateral_weights(), &d_tl)?;
            d_front.add_assign(&g.queries)?;
            if params.share_lateral {
                grads.frontal.axpy(1.0, &g.weights)?;
            } else {
                grads.lateral = g.weights;
            }
            Some(g.context)
        }
        None => None,
    };

    let g = attend_backward(&cache.frontal, &params.frontal, &d_front)?;
    grads.frontal.axpy(1.0, &g.weights)?;
    grads.queries = g.queries;

    Ok(FuseGrads {
        params: grads,
        frontal: g.context,
        lateral: d_lateral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_routes_value() {
        let w = AttentionWeights::identity(3);
        let ctx = m(&[&[0.3, -1.0, 2.0]]);
        let q = m(&[&[1.0, 0.0, 0.0], &[5.0, 5.0, -5.0]]);
        let out = cross_attend(&q, &ctx, &w).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), ctx.row(0));
        }
    }

    #[test]
    fn identical_keys_average_to_value() {
        let w = AttentionWeights::identity(2);
        let ctx = m(&[&[0.25, 0.5], &[0.25, 0.5], &[0.25, 0.5]]);
        let out = cross_attend(&m(&[&[3.0, -1.0]]), &ctx, &w).unwrap();
        assert!((out.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_key_hand_computed() {
        // Scores (1/√2, 0); weight on the first key is 1 / (1 + e^{-1/√2}).
        let oracle_w0 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        assert!((oracle_w0 - 0.6698).abs() < 5e-5);
        let w = AttentionWeights::identity(2);
        let out = cross_attend(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]]), &w).unwrap();
        assert!((out.get(0, 0) - oracle_w0).abs() < 1e-15);
        assert!((out.get(0, 1) - (1.0 - oracle_w0)).abs() < 1e-15);
    }

    #[test]
    fn empty_context_rejected() {
        let w = AttentionWeights::identity(2);
        assert!(matches!(
            cross_attend(&m(&[&[1.0, 0.0]]), &Matrix::zeros(0, 2), &w),
            Err(Error::EmptyContext)
        ));
    }

    #[test]
    fn missing_lateral_is_zero_block() {
        let p = init_params(3, 4, 3, 2, InitScheme::ScaledGaussian, false).unwrap();
        let hf = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let z = favr_fuse(&hf, None, &p).unwrap().z;
        let tf = cross_attend(&p.queries, &hf, &p.frontal).unwrap();
        let expected = tf
            .hcat(&Matrix::zeros(4, 3))
            .unwrap()
            .matmul(&p.projection)
            .unwrap();
        assert!(z.max_abs_diff(&expected) < 1e-15);
        assert_eq!(z.shape(), (4, 2));
    }

    #[test]
    fn fuse_matches_hand_trace() {
        // N_q = 2, D = d = 2, identity weights, queries e0 and e1, P = [I; I]/2,
        // three frontal tokens and no lateral view.
        let p = init_params(0, 2, 2, 2, InitScheme::Identity, false).unwrap();
        let hf = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let s = 1.0 / 2f64.sqrt();
        // Query e0 scores (1, 0, 1)·s; query e1 scores (0, 1, 1)·s.
        let w_hi = s.exp() / (2.0 * s.exp() + 1.0);
        let w_lo = 1.0 / (2.0 * s.exp() + 1.0);
        let t0 = [w_hi + w_hi, w_lo + w_hi];
        let t1 = [w_lo + w_hi, w_hi + w_hi];
        let z = favr_fuse(&hf, None, &p).unwrap().z;
        let expected = m(&[&[t0[0] / 2.0, t0[1] / 2.0], &[t1[0] / 2.0, t1[1] / 2.0]]);
        assert!(z.max_abs_diff(&expected) < 1e-15, "{z:?} vs {expected:?}");
    }

    #[test]
    fn missing_frontal_rejected() {
        let p = init_params(1, 2, 2, 2, InitScheme::Identity, false).unwrap();
        assert!(matches!(
            favr_fuse(&Matrix::zeros(0, 2), None, &p),
            Err(Error::MissingFrontal)
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(7, 4, 8, 4, InitScheme::ScaledGaussian, false).unwrap();
        let b = init_params(7, 4, 8, 4, InitScheme::ScaledGaussian, false).unwrap();
        assert_eq!(a, b);
        let c = init_params(8, 4, 8, 4, InitScheme::ScaledGaussian, false).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_init_layout() {
        let p = init_params(0, 3, 2, 2, InitScheme::Identity, false).unwrap();
        assert_eq!(p.frontal.w_q, Matrix::identity(2));
        assert_eq!(
            p.projection,
            m(&[&[0.5, 0.0], &[0.0, 0.5], &[0.5, 0.0], &[0.0, 0.5]])
        );
        assert!(matches!(
            init_params(0, 2, 3, 2, InitScheme::Identity, false),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gaussian_init_scale() {
        // 160 x 64 query entries = 10240 samples; expected std 1/8.
        let p = init_params(11, 160, 64, 8, InitScheme::ScaledGaussian, false).unwrap();
        let xs = p.queries.data();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.125).abs() < 0.1 * 0.125, "std {std}");
    }

    #[test]
    fn shared_lateral_uses_frontal_weights() {
        let p = init_params(5, 2, 3, 3, InitScheme::ScaledGaussian, true).unwrap();
        assert_eq!(p.lateral_weights(), &p.frontal);
        assert_eq!(p.tensors().len(), 6);
    }
}
