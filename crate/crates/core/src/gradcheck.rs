//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates loss values at perturbed inputs, so
//! it stays independent of the analytic gradient code it is checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::losses::{loss_forward, LossConfig, LossVariant};
use crate::memvir::{assemble_extended_batch, select_virtual, MemVirConfig, MemVirMode, MemVirState};
use crate::model::{encoder_backward, encoder_forward, ModelParams};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;
/// Max relative error allowed between analytic and numeric gradients.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Relative error with an absolute floor: entries below 1e-3 in both
/// gradients are compared at a fixed denominator so finite-difference
/// round-off (~1e-9 here) cannot drown tiny components in false alarms.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows(), b.rows());
    assert_eq!(a.cols(), b.cols());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| rel_error(*x, *y))
        .fold(0.0, f64::max)
}

/// Central-difference gradients of the loss value over every entry of X and W.
pub fn fd_loss_gradients(
    cfg: &LossConfig,
    x: &Matrix,
    y: &[usize],
    w: &Matrix,
    h: f64,
) -> Result<(Matrix, Matrix)> {
    let value_at = |x: &Matrix, w: &Matrix| -> Result<f64> {
        Ok(loss_forward(cfg, x, y, w)?.value)
    };
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    let mut xp = x.clone();
    for idx in 0..x.data().len() {
        let orig = xp.data()[idx];
        xp.data_mut()[idx] = orig + h;
        let up = value_at(&xp, w)?;
        xp.data_mut()[idx] = orig - h;
        let down = value_at(&xp, w)?;
        xp.data_mut()[idx] = orig;
        d_x.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    let mut d_w = Matrix::zeros(w.rows(), w.cols());
    let mut wp = w.clone();
    for idx in 0..w.data().len() {
        let orig = wp.data()[idx];
        wp.data_mut()[idx] = orig + h;
        let up = value_at(x, &wp)?;
        wp.data_mut()[idx] = orig - h;
        let down = value_at(x, &wp)?;
        wp.data_mut()[idx] = orig;
        d_w.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    Ok((d_x, d_w))
}

/// Outcome of one variant's finite-difference sweep.
#[derive(Debug, Clone)]
pub struct VariantCheck {
    pub variant: LossVariant,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl VariantCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

fn random_instance(rng: &mut ChaCha8Rng, b: usize, d: usize, c: usize) -> (Matrix, Vec<usize>, Matrix) {
    let x = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Matrix::from_vec(d, c, (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..b).map(|_| rng.gen_range(0..c)).collect();
    (x, y, w)
}

/// Sweeps one variant over random instances (B=6, D=8, C=5 by default in
/// the CLI). `perturbation` is a test hook: a nonzero value is added to the
/// analytic gradient before comparison and must make the check fail.
pub fn check_loss_variant(
    cfg_template: &LossConfig,
    instances: usize,
    b: usize,
    d: usize,
    c: usize,
    seed: u64,
    perturbation: f64,
) -> Result<VariantCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (x, y, w) = random_instance(&mut rng, b, d, c);
        let mut out = loss_forward(cfg_template, &x, &y, &w)?;
        if perturbation != 0.0 {
            out.d_embeddings.data_mut()[0] += perturbation;
        }
        let (fd_x, fd_w) = fd_loss_gradients(cfg_template, &x, &y, &w, FD_STEP)?;
        worst = worst
            .max(max_rel_error(&out.d_embeddings, &fd_x))
            .max(max_rel_error(&out.d_weights, &fd_w));
    }
    Ok(VariantCheck {
        variant: cfg_template.variant,
        instances,
        max_rel_err: worst,
    })
}

/// Per-variant configs used when no run config overrides them.
pub fn default_variant_configs() -> Vec<LossConfig> {
    LossVariant::ALL
        .iter()
        .map(|v| {
            let mut cfg = LossConfig::new(*v).with_gamma(8.0);
            cfg.curricular_t = 0.3;
            cfg
        })
        .collect()
}

/// Finite differences through the whole encoder + loss pipeline, over every
/// encoder parameter and the class weights. Returns the max relative error.
pub fn check_encoder_pipeline(loss_cfg: &LossConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, hidden, d, c, b) = (5, vec![7], 8, 4, 6);
    let mut params = ModelParams::init(d_in, &hidden, d, c, 0.01, &mut rng);
    let inputs = Matrix::from_vec(
        b,
        d_in,
        (0..b * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();

    let loss_of = |p: &ModelParams| -> Result<f64> {
        let (emb, _) = encoder_forward(p, &inputs)?;
        Ok(loss_forward(loss_cfg, &emb, &labels, &p.class_weights)?.value)
    };

    let (emb, cache) = encoder_forward(&params, &inputs)?;
    let out = loss_forward(loss_cfg, &emb, &labels, &params.class_weights)?;
    let mut grads = encoder_backward(&params, &cache, &out.d_embeddings)?;
    grads.d_class_weights = out.d_weights.clone();

    let analytic = grads.flatten();
    let mut worst = 0.0f64;
    let n = params.param_count();
    for idx in 0..n {
        let orig = params.param(idx);
        params.set_param(idx, orig + FD_STEP);
        let up = loss_of(&params)?;
        params.set_param(idx, orig - FD_STEP);
        let down = loss_of(&params)?;
        params.set_param(idx, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic[idx], numeric));
    }
    Ok(worst)
}

/// Finite differences on a MemVir-extended batch: queued snapshots are
/// constants, so only the current embeddings and live weight columns are
/// perturbed, and the gradient slices for them must match.
pub fn check_memvir_extended(loss_cfg: &LossConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, c) = (4, 6, 3);
    let mv = MemVirConfig {
        mode: MemVirMode::Full,
        n_steps: 2,
        margin: 0,
        warmup_steps: 0,
    };
    let mut state = MemVirState::new();
    for _ in 0..2 {
        let (snap_x, snap_y, snap_w) = random_instance(&mut rng, b, d, c);
        state.enqueue_step(mv.capacity(), &snap_w, &snap_x, &snap_y);
    }
    let (x, y, w) = random_instance(&mut rng, b, d, c);
    let virt = select_virtual(&state, &mv, c)?;
    assert_eq!(virt.k, 2);

    let assemble = |x: &Matrix, w: &Matrix| -> Result<(Matrix, Matrix, Vec<usize>)> {
        assemble_extended_batch(x, &y, w, &virt)
    };

    let (xe, we, ye) = assemble(&x, &w)?;
    let out = loss_forward(loss_cfg, &xe, &ye, &we)?;
    let analytic_x = out.d_embeddings.slice_rows(0, b);
    let analytic_w = out.d_weights.slice_cols(0, c);

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for idx in 0..x.data().len() {
        let orig = xp.data()[idx];
        xp.data_mut()[idx] = orig + FD_STEP;
        let (xe, we, ye) = assemble(&xp, &w)?;
        let up = loss_forward(loss_cfg, &xe, &ye, &we)?.value;
        xp.data_mut()[idx] = orig - FD_STEP;
        let (xe, we, ye) = assemble(&xp, &w)?;
        let down = loss_forward(loss_cfg, &xe, &ye, &we)?.value;
        xp.data_mut()[idx] = orig;
        worst = worst.max(rel_error(
            analytic_x.data()[idx],
            (up - down) / (2.0 * FD_STEP),
        ));
    }
    let mut wp = w.clone();
    for r in 0..d {
        for j in 0..c {
            let orig = wp.get(r, j);
            wp.set(r, j, orig + FD_STEP);
            let (xe, we, ye) = assemble(&x, &wp)?;
            let up = loss_forward(loss_cfg, &xe, &ye, &we)?.value;
            wp.set(r, j, orig - FD_STEP);
            let (xe, we, ye) = assemble(&x, &wp)?;
            let down = loss_forward(loss_cfg, &xe, &ye, &we)?.value;
            wp.set(r, j, orig);
            worst = worst.max(rel_error(
                analytic_w.get(r, j),
                (up - down) / (2.0 * FD_STEP),
            ));
        }
    }
    Ok(worst)
}
