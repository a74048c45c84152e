//! The per-step orchestration (forward, virtual-class assembly, loss,
//! update) and the full config-driven training loop with its artifacts:
//! per-eval metric records, the per-step loss log, and exact-round-trip
//! checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{gen_synthetic, load_dataset, sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, mean_cos_to_weight, retrieve, StepRecord, TrainingLog,
};
use crate::linalg::Matrix;
use crate::losses::{loss_forward, LossConfig, LossOutput};
use crate::memvir::{assemble_extended_batch, select_virtual, MemVirConfig, MemVirState};
use crate::model::{
    encoder_backward, encoder_forward, optimizer_step, ForwardCache, ModelParams, OptimizerState,
};
use crate::rng::{seeded_stream, STREAM_INIT, STREAM_SAMPLER};

/// Everything one training step produces before the parameter update.
#[derive(Debug)]
pub struct StepOutput {
    /// Loss over the extended batch; gradients cover the extended arrays.
    pub loss: LossOutput,
    pub cache: ForwardCache,
    /// Rows in the extended batch, (k+1)B at saturation.
    pub extended_rows: usize,
    /// Class ids visible to the loss, (k+1)C at saturation.
    pub extended_classes: usize,
    /// Number of past steps selected this step.
    pub k: usize,
}

/// One training iteration in the required order: forward, snapshot copies,
/// virtual selection, assembly, enqueue, then loss. Queued snapshots are
/// constants; only the leading B rows / C columns of the gradients belong
/// to live parameters.
pub fn memvir_training_step(
    state: &mut MemVirState,
    cfg: &MemVirConfig,
    params: &ModelParams,
    inputs: &Matrix,
    labels: &[usize],
    loss_cfg: &LossConfig,
) -> Result<StepOutput> {
    let (embeddings, cache) = encoder_forward(params, inputs)?;
    let weights = &params.class_weights;
    let num_classes = weights.cols();
    let step = state.step();
    let (x_ext, w_ext, y_ext, k) = if cfg.active_at(step) {
        let virt = select_virtual(state, cfg, num_classes)?;
        let (xe, we, ye) = assemble_extended_batch(&embeddings, labels, weights, &virt)?;
        // Enqueue the pre-assembly copies after selection, so the current
        // step never selects itself.
        state.enqueue_step(cfg.capacity(), weights, &embeddings, labels);
        (xe, we, ye, virt.k)
    } else {
        state.advance();
        (embeddings, weights.clone(), labels.to_vec(), 0)
    };
    let loss = loss_forward(loss_cfg, &x_ext, &y_ext, &w_ext)?;
    Ok(StepOutput {
        loss,
        cache,
        extended_rows: x_ext.rows(),
        extended_classes: w_ext.cols(),
        k,
    })
}

/// One line of metrics.jsonl. Field set is fixed; see the README schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub active_classes: usize,
    pub recall_at: BTreeMap<u32, f64>,
    pub p_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    pub mean_cos_to_weight: f64,
}

/// Derived step quantities logged in the run header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedSchedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

/// In-memory result of a full training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub memvir_state: MemVirState,
    pub curricular_t: f64,
    pub log: TrainingLog,
    pub metrics: Vec<MetricsRecord>,
    pub schedule: ResolvedSchedule,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset {
        crate::config::DatasetConfig::Synthetic(spec) => gen_synthetic(spec)?,
        crate::config::DatasetConfig::Files { train, test } => {
            (load_dataset(Path::new(train))?, load_dataset(Path::new(test))?)
        }
    };
    let train = train.subset_classes(cfg.class_ratio, cfg.seed)?;
    Ok((train, test))
}

/// Runs the configured training end to end, deterministically in the seed.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    if train.is_empty() {
        return Err(Error::InvalidSpec("training split is empty".into()));
    }

    let steps_per_epoch = (train.len() / cfg.batch_size).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.memvir.warmup_in_steps(steps_per_epoch);
    let schedule = ResolvedSchedule {
        steps_per_epoch,
        total_steps,
        warmup_steps,
    };
    let mv_cfg = cfg.memvir.to_memvir_config(warmup_steps);
    let mut loss_cfg = cfg.loss.to_loss_config();

    let mut init_rng = seeded_stream(cfg.seed, STREAM_INIT);
    let mut params = ModelParams::init(
        train.input_dim(),
        &cfg.model.hidden_widths,
        cfg.model.embed_dim,
        train.num_classes(),
        cfg.model.leaky_slope,
        &mut init_rng,
    );
    let mut optimizer = cfg.optimizer.to_optimizer_state(params.param_count());
    let mut state = MemVirState::new();
    let mut log = TrainingLog::default();
    let mut metrics = Vec::new();

    let label_lookup: HashMap<usize, usize> = train
        .class_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let train_label_indices: Vec<usize> = train.labels.iter().map(|l| label_lookup[l]).collect();

    let mut sampler_rng = seeded_stream(cfg.seed, STREAM_SAMPLER);
    for step in 0..total_steps {
        let (inputs, raw_labels) =
            sample_batch(&train, cfg.batch_size, cfg.classes_per_batch, &mut sampler_rng)?;
        let labels: Vec<usize> = raw_labels.iter().map(|l| label_lookup[l]).collect();
        let out = memvir_training_step(&mut state, &mv_cfg, &params, &inputs, &labels, &loss_cfg)?;
        loss_cfg.curricular_t = out.loss.curricular_t;

        let d_embeddings = out.loss.d_embeddings.slice_rows(0, inputs.rows());
        let mut grads = encoder_backward(&params, &out.cache, &d_embeddings)?;
        grads.d_class_weights = out.loss.d_weights.slice_cols(0, train.num_classes());
        optimizer_step(&mut optimizer, &mut params, &grads)?;

        log.steps.push(StepRecord {
            step,
            loss: out.loss.value,
            active_classes: out.extended_classes,
            extended_rows: out.extended_rows,
        });

        if (step + 1) % cfg.eval_every == 0 || step + 1 == total_steps {
            metrics.push(evaluate_step(
                cfg,
                step,
                out.loss.value,
                out.extended_classes,
                &params,
                &train,
                &train_label_indices,
                &test,
            )?);
        }
    }

    Ok(TrainOutcome {
        params,
        optimizer,
        memvir_state: state,
        curricular_t: loss_cfg.curricular_t,
        log,
        metrics,
        schedule,
        train,
        test,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_step(
    cfg: &RunConfig,
    step: usize,
    loss: f64,
    active_classes: usize,
    params: &ModelParams,
    train: &Dataset,
    train_label_indices: &[usize],
    test: &Dataset,
) -> Result<MetricsRecord> {
    let (test_emb, _) = encoder_forward(params, &test.inputs)?;
    let ranking = retrieve(&test_emb, &test_emb, true)?;
    let m = compute_metrics(&ranking, &test.labels, &test.labels, &cfg.recall_ks)?;
    let (train_emb, _) = encoder_forward(params, &train.inputs)?;
    let cos = mean_cos_to_weight(&train_emb, train_label_indices, &params.class_weights)?;
    Ok(MetricsRecord {
        step,
        loss,
        active_classes,
        recall_at: m.recall_at,
        p_at_1: m.p_at_1,
        r_precision: m.r_precision,
        map_at_r: m.map_at_r,
        mean_cos_to_weight: cos,
    })
}

/// Versioned whole-state checkpoint; JSON round-trips f64 exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub memvir: MemVirState,
    pub curricular_t: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if !ckpt.params.class_weights.is_finite() {
        return Err(Error::Config("checkpoint holds non-finite weights".into()));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::test_support::tiny_run_config;
    use crate::losses::{LossConfig, LossVariant};
    use crate::memvir::MemVirMode;
    use rand::Rng;

    fn tiny_setup(
        seed: u64,
    ) -> (ModelParams, Matrix, Vec<usize>, LossConfig) {
        let mut rng = seeded_stream(seed, STREAM_INIT);
        let params = ModelParams::init(4, &[6], 3, 4, 0.01, &mut rng);
        let inputs =
            Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let loss_cfg = LossConfig::new(LossVariant::NormSoftmax);
        (params, inputs, labels, loss_cfg)
    }

    #[test]
    fn baseline_mode_is_bitwise_identical_to_plain_loss() {
        let (params, inputs, labels, loss_cfg) = tiny_setup(80);
        let cfg = MemVirConfig::baseline();
        let mut state = MemVirState::new();
        for _ in 0..3 {
            let out =
                memvir_training_step(&mut state, &cfg, &params, &inputs, &labels, &loss_cfg)
                    .unwrap();
            let (emb, _) = encoder_forward(&params, &inputs).unwrap();
            let direct = loss_forward(&loss_cfg, &emb, &labels, &params.class_weights).unwrap();
            assert_eq!(out.loss.value.to_bits(), direct.value.to_bits());
            for (a, b) in out
                .loss
                .d_embeddings
                .data()
                .iter()
                .zip(direct.d_embeddings.data())
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in out.loss.d_weights.data().iter().zip(direct.d_weights.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(state.queue_len(), 0);
        }
    }

    #[test]
    fn full_mode_before_warmup_matches_baseline_and_keeps_queues_empty() {
        let (params, inputs, labels, loss_cfg) = tiny_setup(81);
        let cfg = MemVirConfig {
            mode: MemVirMode::Full,
            n_steps: 2,
            margin: 1,
            warmup_steps: 10,
        };
        let mut state = MemVirState::new();
        for _ in 0..5 {
            let out =
                memvir_training_step(&mut state, &cfg, &params, &inputs, &labels, &loss_cfg)
                    .unwrap();
            let (emb, _) = encoder_forward(&params, &inputs).unwrap();
            let direct = loss_forward(&loss_cfg, &emb, &labels, &params.class_weights).unwrap();
            assert_eq!(out.loss.value.to_bits(), direct.value.to_bits());
            assert_eq!(out.k, 0);
            assert_eq!(state.queue_len(), 0);
        }
    }

    #[test]
    fn duplicate_snapshot_splits_target_mass_between_tau0_and_tau1() {
        // Frozen model, identical consecutive batches, N=1 M=0: step two's
        // extended batch duplicates every class exactly. The target's
        // softmax mass halves, so tau0 = 1 - p/2 rises above the baseline
        // tau = 1 - p, the virtual coefficient turns negative, and because
        // the virtual weight IS the target weight the effective pull
        // tau0 + tau1 collapses back to the baseline tau exactly.
        let (params, inputs, labels, loss_cfg) = tiny_setup(82);
        let cfg = MemVirConfig {
            mode: MemVirMode::Full,
            n_steps: 1,
            margin: 0,
            warmup_steps: 0,
        };
        let mut state = MemVirState::new();
        memvir_training_step(&mut state, &cfg, &params, &inputs, &labels, &loss_cfg).unwrap();
        let out2 =
            memvir_training_step(&mut state, &cfg, &params, &inputs, &labels, &loss_cfg).unwrap();
        assert_eq!(out2.k, 1);
        assert_eq!(out2.extended_rows, 2 * inputs.rows());
        assert!(out2.loss.value > 0.0);

        let (emb, _) = encoder_forward(&params, &inputs).unwrap();
        let c = params.class_weights.cols();
        let w_ext = params
            .class_weights
            .concat_cols(&params.class_weights)
            .unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let base =
                crate::losses::grad_decompose_baseline(emb.row(i), y, &params.class_weights)
                    .unwrap();
            let ext =
                crate::losses::grad_decompose_memvir(emb.row(i), y, &w_ext, 1, c).unwrap();
            assert!(ext.tau0 > base.tau0, "sample {i}: residual pull must stay high");
            assert!(ext.tau_virtual[0] < 0.0);
            let effective = ext.tau0 + ext.tau_virtual[0];
            assert!(
                (effective - base.tau0).abs() < 1e-12,
                "sample {i}: {effective} vs {}",
                base.tau0
            );
        }
    }

    #[test]
    fn run_training_is_deterministic_and_logs_every_step() {
        let cfg = tiny_run_config(1);
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.log.steps.len(), a.schedule.total_steps);
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
        for (x, y) in a.log.steps.iter().zip(&b.log.steps) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        // Full parameter trajectory, not just the losses.
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn logged_class_counts_match_the_staircase() {
        let mut cfg = tiny_run_config(2);
        cfg.memvir.mode = MemVirMode::Full;
        cfg.memvir.n_steps = 2;
        cfg.memvir.margin = 1;
        cfg.memvir.warmup = crate::config::WarmupSpec::Steps(4);
        cfg.epochs = 6;
        let out = run_training(&cfg).unwrap();
        let c = out.train.num_classes();
        for rec in &out.log.steps {
            let expected = crate::memvir::schedule_class_count(rec.step, c, 4, 2, 1);
            assert_eq!(rec.active_classes, expected, "step {}", rec.step);
        }
    }

    #[test]
    fn no_warmup_equals_full_with_zero_warmup() {
        let mut a = tiny_run_config(4);
        a.memvir.mode = MemVirMode::NoWarmup;
        a.memvir.n_steps = 2;
        a.memvir.margin = 1;
        a.memvir.warmup = crate::config::WarmupSpec::Steps(999); // ignored
        let mut b = a.clone();
        b.memvir.mode = MemVirMode::Full;
        b.memvir.warmup = crate::config::WarmupSpec::Steps(0);
        let ra = run_training(&a).unwrap();
        let rb = run_training(&b).unwrap();
        for (x, y) in ra.log.steps.iter().zip(&rb.log.steps) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.active_classes, y.active_classes);
        }
    }

    #[test]
    fn no_step_pacing_jumps_once_when_queue_fills() {
        let mut cfg = tiny_run_config(5);
        cfg.memvir.mode = MemVirMode::NoStepPacing;
        cfg.memvir.n_steps = 2;
        cfg.memvir.margin = 1;
        cfg.memvir.warmup = crate::config::WarmupSpec::Steps(3);
        cfg.epochs = 6;
        let out = run_training(&cfg).unwrap();
        let c = out.train.num_classes();
        let full_at = 3 + 2 * 2; // U + N(M+1)
        for rec in &out.log.steps {
            let expected = if rec.step < full_at { c } else { 3 * c };
            assert_eq!(rec.active_classes, expected, "step {}", rec.step);
        }
    }

    #[test]
    fn warmup_prefix_matches_baseline_series() {
        let mut full = tiny_run_config(6);
        full.memvir.mode = MemVirMode::Full;
        full.memvir.n_steps = 1;
        full.memvir.margin = 0;
        full.memvir.warmup = crate::config::WarmupSpec::Steps(6);
        let mut base = full.clone();
        base.memvir.mode = MemVirMode::Baseline;
        let rf = run_training(&full).unwrap();
        let rb = run_training(&base).unwrap();
        for step in 0..6 {
            assert_eq!(
                rf.log.steps[step].loss.to_bits(),
                rb.log.steps[step].loss.to_bits(),
                "step {step} before warm-up must match baseline"
            );
        }
        assert!(rf.log.steps[8].active_classes > rb.log.steps[8].active_classes);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_run_config(3);
        let out = run_training(&cfg).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg,
            params: out.params.clone(),
            optimizer: out.optimizer.clone(),
            memvir: out.memvir_state.clone(),
            curricular_t: out.curricular_t,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, out.params);
        assert_eq!(
            serde_json::to_string(&back.optimizer).unwrap(),
            serde_json::to_string(&out.optimizer).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&back.memvir).unwrap(),
            serde_json::to_string(&out.memvir_state).unwrap()
        );
    }
}
