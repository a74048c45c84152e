//! Softmax-family and proxy-based losses with exact analytic gradients,
//! plus the gradient decomposition used to diagnose how hard an embedding
//! is being pulled toward (and pushed away from) class weights.
//!
//! All losses share one calling convention: `loss_forward(cfg, X, y, W)`
//! where X is B x D (one embedding per row), W is D x C (one class weight
//! per column, bias fixed at zero) and labels index columns of W. The
//! returned value is the minimized objective (nonnegative for the
//! cross-entropy family) and the gradients are exact derivatives of that
//! value with respect to every entry of X and W.
//!
//! Virtual classes need no special handling here: extending X with queued
//! embeddings and W with queued weight columns (under fresh label ids) and
//! calling the same function is the whole mechanism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, norm, stable_log_softmax, stable_softmax, Matrix};

/// Cosines are clamped to [-1 + COS_CLAMP, 1 - COS_CLAMP] before arccos-style
/// margin transforms; the derivative of sqrt(1 - c^2) blows up at the poles.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Softmax,
    NormSoftmax,
    CosFace,
    ArcFace,
    CurricularFace,
    ProxyNca,
    ProxyAnchor,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::Softmax,
        LossVariant::NormSoftmax,
        LossVariant::CosFace,
        LossVariant::ArcFace,
        LossVariant::CurricularFace,
        LossVariant::ProxyNca,
        LossVariant::ProxyAnchor,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Softmax => "softmax",
            LossVariant::NormSoftmax => "norm_softmax",
            LossVariant::CosFace => "cos_face",
            LossVariant::ArcFace => "arc_face",
            LossVariant::CurricularFace => "curricular_face",
            LossVariant::ProxyNca => "proxy_nca",
            LossVariant::ProxyAnchor => "proxy_anchor",
        }
    }
}

/// Hyper-parameters for the loss family.
///
/// `margin` is a cosine offset for CosFace and an angle in radians for
/// ArcFace / CurricularFace. `curricular_t` is CurricularFace's running
/// hard-negative statistic; it is carried explicitly in and out of
/// [`loss_forward`] so the function stays pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub gamma: f64,
    pub margin: f64,
    pub curricular_t: f64,
    pub proxy_anchor_alpha: f64,
    pub proxy_anchor_delta: f64,
}

impl LossConfig {
    /// Defaults: gamma 16; margin 0.35 (CosFace) / 0.5 rad (ArcFace,
    /// CurricularFace) / 0 otherwise; Proxy-Anchor alpha 32, delta 0.1.
    pub fn new(variant: LossVariant) -> Self {
        let margin = match variant {
            LossVariant::CosFace => 0.35,
            LossVariant::ArcFace | LossVariant::CurricularFace => 0.5,
            _ => 0.0,
        };
        LossConfig {
            variant,
            gamma: 16.0,
            margin,
            curricular_t: 0.0,
            proxy_anchor_alpha: 32.0,
            proxy_anchor_delta: 0.1,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        match self.variant {
            LossVariant::CosFace => {
                if self.margin >= 1.0 {
                    return Err(Error::Config(format!(
                        "cos_face margin must lie in [0, 1), got {}",
                        self.margin
                    )));
                }
            }
            LossVariant::ArcFace | LossVariant::CurricularFace => {
                if self.margin >= std::f64::consts::FRAC_PI_2 {
                    return Err(Error::Config(format!(
                        "angular margin must lie in [0, pi/2) rad, got {}",
                        self.margin
                    )));
                }
            }
            _ => {}
        }
        if !(self.proxy_anchor_alpha > 0.0 && self.proxy_anchor_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "proxy_anchor_alpha must be positive, got {}",
                self.proxy_anchor_alpha
            )));
        }
        Ok(())
    }
}

/// Loss value plus exact gradients for every input entry.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// B x D, dL/dX.
    pub d_embeddings: Matrix,
    /// D x C, dL/dW.
    pub d_weights: Matrix,
    /// Next value of CurricularFace's running statistic (echoes the input
    /// for every other variant).
    pub curricular_t: f64,
}

/// Coefficients of the softmax gradient written in the class-weight basis:
/// the pull toward the target weight (`tau0`) and the push away from each
/// virtual copy of it (`tau_virtual`, one entry per selected past step,
/// strictly negative).
#[derive(Debug, Clone)]
pub struct GradDecomposition {
    pub tau0: f64,
    pub tau_virtual: Vec<f64>,
    pub target_weight_index: usize,
}

fn check_inputs(x: &Matrix, y: &[usize], w: &Matrix) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings are {}-dim but weights are {}-dim",
            x.cols(),
            w.rows()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} embeddings",
            y.len(),
            x.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    for &label in y {
        if label >= w.cols() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: w.cols(),
            });
        }
    }
    Ok(())
}

/// Normalized views shared by every cosine-logit loss.
struct CosineParts {
    x_norm: Vec<f64>,
    x_hat: Matrix,
    w_norm: Vec<f64>,
    w_hat: Matrix, // D x C, columns normalized
    /// B x C cosine table.
    cos: Matrix,
}

fn cosine_parts(x: &Matrix, w: &Matrix) -> Result<CosineParts> {
    let b = x.rows();
    let c = w.cols();
    let d = x.cols();
    let mut x_norm = Vec::with_capacity(b);
    let mut x_hat = Matrix::zeros(b, d);
    for i in 0..b {
        let row = x.row(i);
        let n = norm(row);
        let unit = l2_normalize(row)?;
        x_norm.push(n);
        x_hat.row_mut(i).copy_from_slice(&unit);
    }
    let mut w_norm = Vec::with_capacity(c);
    let mut w_hat = Matrix::zeros(d, c);
    for j in 0..c {
        let col = w.column(j);
        let n = norm(&col);
        let unit = l2_normalize(&col)?;
        w_norm.push(n);
        for (r, v) in unit.iter().enumerate() {
            w_hat.set(r, j, *v);
        }
    }
    let cos = x_hat.matmul(&w_hat)?;
    Ok(CosineParts {
        x_norm,
        x_hat,
        w_norm,
        w_hat,
        cos,
    })
}

/// Pulls a dL/dcos table back onto the raw embeddings and weights.
///
/// d cos_ij / d x_i = (w_hat_j - cos_ij * x_hat_i) / |x_i|
/// d cos_ij / d W_j = (x_hat_i - cos_ij * w_hat_j) / |W_j|
fn cosine_backprop(parts: &CosineParts, d_cos: &Matrix) -> (Matrix, Matrix) {
    let b = d_cos.rows();
    let c = d_cos.cols();
    let d = parts.x_hat.cols();
    let mut d_x = Matrix::zeros(b, d);
    let mut d_w = Matrix::zeros(d, c);
    for i in 0..b {
        let xh = parts.x_hat.row(i);
        let g = d_cos.row(i);
        let mut along_x = 0.0;
        for j in 0..c {
            along_x += g[j] * parts.cos.get(i, j);
        }
        let inv_xn = 1.0 / parts.x_norm[i];
        let dxr = d_x.row_mut(i);
        for r in 0..d {
            let mut acc = 0.0;
            for j in 0..c {
                acc += g[j] * parts.w_hat.get(r, j);
            }
            dxr[r] = (acc - along_x * xh[r]) * inv_xn;
        }
        for j in 0..c {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            let cos_ij = parts.cos.get(i, j);
            let inv_wn = 1.0 / parts.w_norm[j];
            for r in 0..d {
                let add = gj * (xh[r] - cos_ij * parts.w_hat.get(r, j)) * inv_wn;
                *d_w.data_mut().get_mut(r * c + j).unwrap() += add;
            }
        }
    }
    (d_x, d_w)
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

/// cos(theta + m) from cos(theta), plus its derivative w.r.t. the cosine.
/// Returns (value, dvalue/dcos); the derivative is zero in the clamped zone.
fn angular_margin(cos_t: f64, cos_m: f64, sin_m: f64) -> (f64, f64) {
    let clamped = clamp_cos(cos_t);
    let sin_t = (1.0 - clamped * clamped).sqrt();
    let value = clamped * cos_m - sin_t * sin_m;
    let deriv = if cos_t == clamped {
        cos_m + sin_m * clamped / sin_t
    } else {
        0.0
    };
    (value, deriv)
}

/// Plain softmax cross-entropy on raw inner-product logits.
fn softmax_forward(x: &Matrix, y: &[usize], w: &Matrix) -> Result<LossOutput> {
    let b = x.rows();
    let c = w.cols();
    let logits = x.matmul(w)?;
    let mut value = 0.0;
    let mut d_logits = Matrix::zeros(b, c);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let ls = stable_log_softmax(logits.row(i));
        value -= ls[y[i]] * inv_b;
        let drow = d_logits.row_mut(i);
        for j in 0..c {
            drow[j] = ls[j].exp() * inv_b;
        }
        drow[y[i]] -= inv_b;
    }
    let d_embeddings = d_logits.matmul(&w.transpose())?;
    let d_weights = x.transpose().matmul(&d_logits)?;
    Ok(LossOutput {
        value,
        d_embeddings,
        d_weights,
        curricular_t: 0.0,
    })
}

/// Cross-entropy over transformed cosine logits: NormSoftmax, CosFace,
/// ArcFace and CurricularFace differ only in the per-entry logit transform.
fn cosine_ce_forward(cfg: &LossConfig, x: &Matrix, y: &[usize], w: &Matrix) -> Result<LossOutput> {
    let parts = cosine_parts(x, w)?;
    let b = x.rows();
    let c = w.cols();
    let gamma = cfg.gamma;
    let cos_m = cfg.margin.cos();
    let sin_m = cfg.margin.sin();

    // CurricularFace modulates hard negatives with the statistic carried in
    // the config; the refreshed statistic is returned for the next step.
    let t_in = cfg.curricular_t;
    let mut target_cos_sum = 0.0;

    let mut logits = Matrix::zeros(b, c);
    // dlogit/dcos, same shape.
    let mut slope = Matrix::zeros(b, c);
    for i in 0..b {
        let target = y[i];
        let cos_t = parts.cos.get(i, target);
        target_cos_sum += cos_t;
        let (target_logit, target_slope) = match cfg.variant {
            LossVariant::NormSoftmax => (cos_t, 1.0),
            LossVariant::CosFace => (cos_t - cfg.margin, 1.0),
            LossVariant::ArcFace | LossVariant::CurricularFace => {
                angular_margin(cos_t, cos_m, sin_m)
            }
            _ => unreachable!("cosine_ce_forward only handles CE variants"),
        };
        for j in 0..c {
            if j == target {
                logits.set(i, j, gamma * target_logit);
                slope.set(i, j, gamma * target_slope);
            } else {
                let cos_j = parts.cos.get(i, j);
                if cfg.variant == LossVariant::CurricularFace && cos_j > target_logit {
                    // Hard negative: emphasized by cos * (t + cos).
                    logits.set(i, j, gamma * cos_j * (t_in + cos_j));
                    slope.set(i, j, gamma * (t_in + 2.0 * cos_j));
                } else {
                    logits.set(i, j, gamma * cos_j);
                    slope.set(i, j, gamma);
                }
            }
        }
    }

    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut d_cos = Matrix::zeros(b, c);
    for i in 0..b {
        let ls = stable_log_softmax(logits.row(i));
        value -= ls[y[i]] * inv_b;
        for j in 0..c {
            let mut dl = ls[j].exp() * inv_b;
            if j == y[i] {
                dl -= inv_b;
            }
            d_cos.set(i, j, dl * slope.get(i, j));
        }
    }
    let (d_embeddings, d_weights) = cosine_backprop(&parts, &d_cos);
    let curricular_t = if cfg.variant == LossVariant::CurricularFace {
        0.01 * (target_cos_sum * inv_b) + 0.99 * t_in
    } else {
        t_in
    };
    Ok(LossOutput {
        value,
        d_embeddings,
        d_weights,
        curricular_t,
    })
}

/// Proxy-NCA: squared euclidean distance between normalized embedding and
/// proxies, target distance against the log-sum of negative proximities.
fn proxy_nca_forward(cfg: &LossConfig, x: &Matrix, y: &[usize], w: &Matrix) -> Result<LossOutput> {
    let c = w.cols();
    if c < 2 {
        return Err(Error::InvalidSpec(
            "proxy_nca needs at least 2 classes".into(),
        ));
    }
    let parts = cosine_parts(x, w)?;
    let b = x.rows();
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut d_cos = Matrix::zeros(b, c);
    for i in 0..b {
        let target = y[i];
        // d_j = |x_hat - w_hat_j|^2 = 2 - 2 cos_ij
        let d_t = 2.0 - 2.0 * parts.cos.get(i, target);
        let neg_logits: Vec<f64> = (0..c)
            .filter(|j| *j != target)
            .map(|j| -(2.0 - 2.0 * parts.cos.get(i, j)))
            .collect();
        let ls = stable_log_softmax(&neg_logits);
        let max = neg_logits
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max
            + neg_logits
                .iter()
                .map(|z| (z - max).exp())
                .sum::<f64>()
                .ln();
        value += (d_t + log_sum) * inv_b;
        d_cos.set(i, target, -2.0 * inv_b);
        let mut idx = 0;
        for j in 0..c {
            if j == target {
                continue;
            }
            // d value_i / d cos_ij = 2 q_ij with q the softmax over -d.
            d_cos.set(i, j, 2.0 * ls[idx].exp() * inv_b);
            idx += 1;
        }
    }
    let (d_embeddings, d_weights) = cosine_backprop(&parts, &d_cos);
    Ok(LossOutput {
        value,
        d_embeddings,
        d_weights,
        curricular_t: cfg.curricular_t,
    })
}

/// Proxy-Anchor: per-proxy log(1 + sum e^{-alpha(s - delta)}) over positives
/// averaged on proxies-with-positives, plus log(1 + sum e^{alpha(s + delta)})
/// over negatives averaged on all proxies.
fn proxy_anchor_forward(
    cfg: &LossConfig,
    x: &Matrix,
    y: &[usize],
    w: &Matrix,
) -> Result<LossOutput> {
    let parts = cosine_parts(x, w)?;
    let b = x.rows();
    let c = w.cols();
    let alpha = cfg.proxy_anchor_alpha;
    let delta = cfg.proxy_anchor_delta;

    let mut with_pos: Vec<usize> = y.to_vec();
    with_pos.sort_unstable();
    with_pos.dedup();
    let num_pos_proxies = with_pos.len() as f64;

    let mut value = 0.0;
    let mut d_cos = Matrix::zeros(b, c);
    for p in 0..c {
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        for i in 0..b {
            let s = parts.cos.get(i, p);
            if y[i] == p {
                pos_sum += (-alpha * (s - delta)).exp();
            } else {
                neg_sum += (alpha * (s + delta)).exp();
            }
        }
        let has_pos = with_pos.binary_search(&p).is_ok();
        if has_pos {
            value += pos_sum.ln_1p() / num_pos_proxies;
        }
        value += neg_sum.ln_1p() / c as f64;
        for i in 0..b {
            let s = parts.cos.get(i, p);
            if y[i] == p {
                let g = -alpha * (-alpha * (s - delta)).exp() / (1.0 + pos_sum);
                d_cos.set(i, p, g / num_pos_proxies);
            } else {
                let g = alpha * (alpha * (s + delta)).exp() / (1.0 + neg_sum);
                d_cos.set(i, p, g / c as f64);
            }
        }
    }
    let (d_embeddings, d_weights) = cosine_backprop(&parts, &d_cos);
    Ok(LossOutput {
        value,
        d_embeddings,
        d_weights,
        curricular_t: cfg.curricular_t,
    })
}

/// Forward + backward pass of the configured loss.
pub fn loss_forward(cfg: &LossConfig, x: &Matrix, y: &[usize], w: &Matrix) -> Result<LossOutput> {
    cfg.validate()?;
    check_inputs(x, y, w)?;
    match cfg.variant {
        LossVariant::Softmax => softmax_forward(x, y, w),
        LossVariant::ProxyNca => proxy_nca_forward(cfg, x, y, w),
        LossVariant::ProxyAnchor => proxy_anchor_forward(cfg, x, y, w),
        _ => cosine_ce_forward(cfg, x, y, w),
    }
}

/// tau = 1 - softmax(target logit): the residual pull toward the target
/// weight under plain softmax, with raw inner-product logits.
pub fn grad_decompose_baseline(x: &[f64], y: usize, w: &Matrix) -> Result<GradDecomposition> {
    let c = w.cols();
    if y >= c {
        return Err(Error::LabelOutOfRange { label: y, classes: c });
    }
    if x.len() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "embedding is {}-dim but weights are {}-dim",
            x.len(),
            w.rows()
        )));
    }
    let logits: Vec<f64> = (0..c).map(|j| dot(&w.column(j), x)).collect();
    let p = stable_softmax(&logits);
    Ok(GradDecomposition {
        tau0: 1.0 - p[y],
        tau_virtual: Vec::new(),
        target_weight_index: y,
    })
}

/// Decomposition over an extended weight matrix holding the actual classes
/// in columns [0, C) and N queued snapshots after them, snapshot n's copy of
/// class j living at column j + n*C. tau0 stays in (0, 1); each virtual
/// coefficient is strictly negative, pushing the embedding off its own past
/// copies.
pub fn grad_decompose_memvir(
    x: &[f64],
    y: usize,
    w_ext: &Matrix,
    n_steps: usize,
    num_classes: usize,
) -> Result<GradDecomposition> {
    let expected = (n_steps + 1) * num_classes;
    if w_ext.cols() != expected {
        return Err(Error::ShapeMismatch(format!(
            "extended weights have {} columns, expected (N+1)C = {}",
            w_ext.cols(),
            expected
        )));
    }
    if y >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: num_classes,
        });
    }
    if x.len() != w_ext.rows() {
        return Err(Error::DimensionMismatch(format!(
            "embedding is {}-dim but weights are {}-dim",
            x.len(),
            w_ext.rows()
        )));
    }
    let logits: Vec<f64> = (0..w_ext.cols()).map(|j| dot(&w_ext.column(j), x)).collect();
    let p = stable_softmax(&logits);
    let tau_virtual = (1..=n_steps).map(|n| -p[y + n * num_classes]).collect();
    Ok(GradDecomposition {
        tau0: 1.0 - p[y],
        tau_virtual,
        target_weight_index: y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_loss_gradients, max_rel_error, FD_STEP, GRADCHECK_TOL};
    use crate::linalg::stable_softmax;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        b: usize,
        d: usize,
        c: usize,
    ) -> (Matrix, Vec<usize>, Matrix) {
        let x = Matrix::from_vec(
            b,
            d,
            (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Matrix::from_vec(
            d,
            c,
            (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = (0..b).map(|_| rng.gen_range(0..c)).collect();
        (x, y, w)
    }

    #[test]
    fn softmax_uniform_logits_is_ln2() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let cfg = LossConfig::new(LossVariant::Softmax);
        let out = loss_forward(&cfg, &x, &[0], &w).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn norm_softmax_aligned_example() {
        // x on W_0, other class orthogonal, gamma = 1: frozen value of
        // -log(e / (e + 1)) from a high-precision evaluation.
        let w = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let x = Matrix::from_vec(1, 2, vec![5.0, 0.0]).unwrap();
        let cfg = LossConfig::new(LossVariant::NormSoftmax).with_gamma(1.0);
        let out = loss_forward(&cfg, &x, &[0], &w).unwrap();
        assert!((out.value - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn cosface_zero_margin_matches_norm_softmax_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..10 {
            let (x, y, w) = random_instance(&mut rng, 5, 6, 4);
            let ns = loss_forward(
                &LossConfig::new(LossVariant::NormSoftmax),
                &x,
                &y,
                &w,
            )
            .unwrap();
            let cf = loss_forward(
                &LossConfig::new(LossVariant::CosFace).with_margin(0.0),
                &x,
                &y,
                &w,
            )
            .unwrap();
            assert_eq!(ns.value.to_bits(), cf.value.to_bits());
            for (a, b) in ns.d_embeddings.data().iter().zip(cf.d_embeddings.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in ns.d_weights.data().iter().zip(cf.d_weights.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn every_variant_passes_a_quick_finite_difference_check() {
        // The full 100-instance sweep is in the acceptance suite; this is a
        // fast smoke pass over each variant.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for variant in LossVariant::ALL {
            let mut cfg = LossConfig::new(variant).with_gamma(8.0);
            cfg.curricular_t = 0.3;
            for _ in 0..3 {
                let (x, y, w) = random_instance(&mut rng, 6, 8, 5);
                let out = loss_forward(&cfg, &x, &y, &w).unwrap();
                let (fd_x, fd_w) = fd_loss_gradients(&cfg, &x, &y, &w, FD_STEP).unwrap();
                let err = max_rel_error(&out.d_embeddings, &fd_x)
                    .max(max_rel_error(&out.d_weights, &fd_w));
                assert!(
                    err < GRADCHECK_TOL,
                    "{} gradcheck failed: {err:e}",
                    variant.name()
                );
            }
        }
    }

    #[test]
    fn softmax_value_invariant_under_shared_logit_shift() {
        // For a single sample, W' = W + c * x / |x|^2 shifts every logit by
        // the same constant; the loss value must not move.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Matrix::from_vec(1, 4, (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let w = Matrix::from_vec(
            4,
            3,
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let cfg = LossConfig::new(LossVariant::Softmax);
        let base = loss_forward(&cfg, &x, &[1], &w).unwrap();
        let xx = dot(x.row(0), x.row(0));
        let c = 7.5;
        let mut w_shifted = w.clone();
        for r in 0..4 {
            for j in 0..3 {
                w_shifted.set(r, j, w.get(r, j) + c * x.get(0, r) / xx);
            }
        }
        let shifted = loss_forward(&cfg, &x, &[1], &w_shifted).unwrap();
        assert!((base.value - shifted.value).abs() < 1e-12);
    }

    #[test]
    fn norm_softmax_value_invariant_to_row_and_column_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (x, y, w) = random_instance(&mut rng, 4, 5, 3);
        let cfg = LossConfig::new(LossVariant::NormSoftmax);
        let base = loss_forward(&cfg, &x, &y, &w).unwrap();
        let mut x2 = x.clone();
        for v in x2.row_mut(2) {
            *v *= 9.0;
        }
        let mut w2 = w.clone();
        for r in 0..5 {
            w2.set(r, 1, w.get(r, 1) * 0.125);
        }
        let scaled = loss_forward(&cfg, &x2, &y, &w2).unwrap();
        assert!((base.value - scaled.value).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let x = Matrix::zeros(1, 2);
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = LossConfig::new(LossVariant::Softmax);
        assert!(matches!(
            loss_forward(&cfg, &x, &[2], &w),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn zero_embedding_is_rejected_by_normalized_variants() {
        let x = Matrix::zeros(1, 2);
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = LossConfig::new(LossVariant::NormSoftmax);
        assert!(matches!(
            loss_forward(&cfg, &x, &[0], &w),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn curricular_t_statistic_is_carried_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (x, y, w) = random_instance(&mut rng, 4, 6, 3);
        let mut cfg = LossConfig::new(LossVariant::CurricularFace);
        cfg.curricular_t = 0.5;
        let out = loss_forward(&cfg, &x, &y, &w).unwrap();
        assert!(out.curricular_t != 0.5, "statistic should move");
        // EMA with coefficient 0.01 on the batch mean target cosine.
        assert!((out.curricular_t - 0.5).abs() < 0.011 * 1.5 + 1e-12);
        let echoed = loss_forward(&LossConfig::new(LossVariant::Softmax), &x, &y, &w).unwrap();
        assert_eq!(echoed.curricular_t, 0.0);
    }

    #[test]
    fn decompose_uniform_two_and_four_classes() {
        let w2 = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let d = grad_decompose_baseline(&[1.0, 0.0], 0, &w2).unwrap();
        assert!((d.tau0 - 0.5).abs() < 1e-15);

        // Any x orthogonal to all weights gives equal logits.
        let mut w4 = Matrix::zeros(3, 4);
        for j in 0..4 {
            w4.set(0, j, 1.0);
        }
        let d = grad_decompose_baseline(&[0.0, 1.0, 0.0], 2, &w4).unwrap();
        assert!((d.tau0 - 0.75).abs() < 1e-15);
        assert!(d.tau_virtual.is_empty());
    }

    #[test]
    fn decompose_tau_falls_as_embedding_approaches_target_weight() {
        // x = t * W_y with the other columns orthogonal; tau must decrease
        // monotonically in t. Expected values frozen from an independent
        // high-precision evaluation of 1 - e^t / (e^t + 3).
        let mut w = Matrix::zeros(4, 4);
        for j in 0..4 {
            w.set(j, j, 1.0);
        }
        let expected = [
            (1.0, 0.5246331135813283),
            (5.0, 0.019813337346509065),
            (10.0, 0.00013618124143106674),
        ];
        let mut last = f64::INFINITY;
        for (t, want) in expected {
            let x = [t, 0.0, 0.0, 0.0];
            let d = grad_decompose_baseline(&x, 0, &w).unwrap();
            assert!((d.tau0 - want).abs() < 1e-12, "t={t}: {} vs {want}", d.tau0);
            assert!(d.tau0 < last);
            last = d.tau0;
        }
    }

    #[test]
    fn decompose_memvir_uniform_and_degenerate() {
        // N=1, C=2, all four logits equal.
        let mut w = Matrix::zeros(2, 4);
        for j in 0..4 {
            w.set(0, j, 1.0);
        }
        let d = grad_decompose_memvir(&[0.0, 1.0], 0, &w, 1, 2).unwrap();
        assert!((d.tau0 - 0.75).abs() < 1e-15);
        assert_eq!(d.tau_virtual.len(), 1);
        assert!((d.tau_virtual[0] + 0.25).abs() < 1e-15);

        // N=0 must match the baseline op exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let wc = Matrix::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = grad_decompose_baseline(&x, 3, &wc).unwrap();
        let b = grad_decompose_memvir(&x, 3, &wc, 0, 5).unwrap();
        assert_eq!(a.tau0.to_bits(), b.tau0.to_bits());
        assert!(b.tau_virtual.is_empty());
    }

    #[test]
    fn decompose_memvir_probability_mass_bookkeeping() {
        // (1 - tau0) + sum(-tau_n) + sum of softmax over non-target columns
        // must equal 1: the coefficients are signed softmax masses.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..50 {
            let n = rng.gen_range(1..4usize);
            let c = rng.gen_range(2..5usize);
            let d = rng.gen_range(2..6usize);
            let w = Matrix::from_vec(
                d,
                (n + 1) * c,
                (0..d * (n + 1) * c).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let y = rng.gen_range(0..c);
            let dec = grad_decompose_memvir(&x, y, &w, n, c).unwrap();
            let logits: Vec<f64> = (0..w.cols()).map(|j| dot(&w.column(j), &x)).collect();
            let p = stable_softmax(&logits);
            let targets: Vec<usize> = (0..=n).map(|k| y + k * c).collect();
            let rest: f64 = (0..w.cols())
                .filter(|j| !targets.contains(j))
                .map(|j| p[j])
                .sum();
            let mass = (1.0 - dec.tau0) + dec.tau_virtual.iter().map(|t| -t).sum::<f64>() + rest;
            assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
            assert!(dec.tau0 > 0.0 && dec.tau0 < 1.0);
            for t in &dec.tau_virtual {
                assert!(*t < 0.0);
            }
        }
    }

    #[test]
    fn decompose_memvir_shape_mismatch() {
        let w = Matrix::zeros(2, 5);
        assert!(matches!(
            grad_decompose_memvir(&[1.0, 0.0], 0, &w, 1, 2),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
