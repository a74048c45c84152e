//! The four CLI operations as library functions, so tests can drive them
//! directly. Every artifact is reproducible byte-for-byte from
//! (config, seed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{load_config, RunConfig};
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, difficulty_series, mean_cos_to_nearest_weight, mean_cos_to_weight, retrieve,
    EvalReport,
};
use crate::gradcheck::{
    check_encoder_pipeline, check_loss_variant, check_memvir_extended, default_variant_configs,
    VariantCheck, GRADCHECK_TOL,
};
use crate::memvir::MemVirMode;
use crate::model::encoder_forward;
use crate::train::{
    load_checkpoint, run_training, save_checkpoint, Checkpoint, MetricsRecord, TrainOutcome,
    CHECKPOINT_VERSION,
};

/// Environment variable naming the root under which `output_dir` resolves.
pub const OUTPUT_ROOT_ENV: &str = "MEMVIR_OUTPUT_ROOT";

/// `output_dir` is taken relative to the env root when one is set.
pub fn resolve_output_dir(output_dir: &str) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(output_dir),
        None => PathBuf::from(output_dir),
    }
}

/// Run header written next to the metrics: the resolved schedule and the
/// RNG stream assignment, plus the config echo.
#[derive(Debug, Serialize, Deserialize)]
struct RunHeader {
    schedule: crate::train::ResolvedSchedule,
    rng_streams: BTreeMap<String, u64>,
    config: RunConfig,
}

fn rng_stream_doc() -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".into(), crate::rng::STREAM_DATA),
        ("init".into(), crate::rng::STREAM_INIT),
        ("sampler".into(), crate::rng::STREAM_SAMPLER),
        ("subset".into(), crate::rng::STREAM_SUBSET),
    ])
}

/// Trains per config and writes metrics.jsonl, difficulty.csv,
/// checkpoint.json, embeddings.csv and run.json into the output directory.
pub fn train_and_write(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let outcome = run_training(cfg)?;
    fs::create_dir_all(out_dir)?;

    let mut jsonl = String::new();
    for rec in &outcome.metrics {
        jsonl.push_str(&serde_json::to_string(rec)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join("metrics.jsonl"), jsonl)?;

    let mut csv = String::from("step,loss\n");
    for (step, loss) in difficulty_series(&outcome.log)? {
        writeln!(csv, "{step},{loss}").expect("writing to a String");
    }
    fs::write(out_dir.join("difficulty.csv"), csv)?;

    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: outcome.params.clone(),
        optimizer: outcome.optimizer.clone(),
        memvir: outcome.memvir_state.clone(),
        curricular_t: outcome.curricular_t,
    };
    save_checkpoint(&ckpt, &out_dir.join("checkpoint.json"))?;

    // Final train-split embeddings for external projection tools.
    let (emb, _) = encoder_forward(&outcome.params, &outcome.train.inputs)?;
    let mut dump = String::from("label,");
    dump.push_str(
        &(0..emb.cols())
            .map(|i| format!("e{i}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    dump.push('\n');
    for i in 0..emb.rows() {
        let mut fields = vec![outcome.train.labels[i].to_string()];
        fields.extend(emb.row(i).iter().map(|v| v.to_string()));
        dump.push_str(&fields.join(","));
        dump.push('\n');
    }
    fs::write(out_dir.join("embeddings.csv"), dump)?;

    let header = RunHeader {
        schedule: outcome.schedule.clone(),
        rng_streams: rng_stream_doc(),
        config: cfg.clone(),
    };
    fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(outcome)
}

pub fn cmd_train(config_path: &Path) -> Result<PathBuf> {
    let cfg = load_config(config_path)?;
    let out_dir = resolve_output_dir(&cfg.output_dir);
    train_and_write(&cfg, &out_dir)?;
    Ok(out_dir)
}

/// Deterministic evaluation of a checkpoint on a feature file. The
/// similarity diagnostic uses each sample's own weight column when the
/// labels index the checkpoint's classes, and the nearest column otherwise
/// (unseen-class splits).
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    if ds.is_empty() {
        return Err(Error::InvalidSpec("evaluation dataset is empty".into()));
    }
    if ds.input_dim() != ckpt.params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset is {}-dim, checkpoint expects {}",
            ds.input_dim(),
            ckpt.params.input_dim()
        )));
    }
    let (emb, _) = encoder_forward(&ckpt.params, &ds.inputs)?;
    let ranking = retrieve(&emb, &emb, true)?;
    let metrics = compute_metrics(&ranking, &ds.labels, &ds.labels, &ckpt.config.recall_ks)?;
    let num_classes = ckpt.params.num_classes();
    let cos = if ds.class_ids.iter().all(|&c| c < num_classes) {
        mean_cos_to_weight(&emb, &ds.labels, &ckpt.params.class_weights)?
    } else {
        mean_cos_to_nearest_weight(&emb, &ckpt.params.class_weights)?
    };
    Ok(EvalReport::from_metrics(metrics, cos))
}

/// Per-variant finite-difference results plus the two pipeline checks.
#[derive(Debug)]
pub struct GradcheckReport {
    pub variants: Vec<VariantCheck>,
    pub encoder_max_rel_err: f64,
    pub memvir_extended_max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.variants.iter().all(|v| v.passed())
            && self.encoder_max_rel_err < GRADCHECK_TOL
            && self.memvir_extended_max_rel_err < GRADCHECK_TOL
    }

    pub fn failing(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .variants
            .iter()
            .filter(|v| !v.passed())
            .map(|v| v.variant.name().to_string())
            .collect();
        if self.encoder_max_rel_err >= GRADCHECK_TOL {
            out.push("encoder_pipeline".into());
        }
        if self.memvir_extended_max_rel_err >= GRADCHECK_TOL {
            out.push("memvir_extended".into());
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>9} {:>14}  status", "variant", "instances", "max_rel_err");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<18} {:>9} {:>14.3e}  {}",
                v.variant.name(),
                v.instances,
                v.max_rel_err,
                if v.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>14.3e}  {}",
            "encoder_pipeline",
            1,
            self.encoder_max_rel_err,
            if self.encoder_max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" }
        );
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>14.3e}  {}",
            "memvir_extended",
            1,
            self.memvir_extended_max_rel_err,
            if self.memvir_extended_max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" }
        );
        s
    }
}

/// Checks every variant at B=6, D=8, C=5. A config path swaps in that
/// run's loss hyper-parameters for its variant and reuses its seed.
pub fn cmd_gradcheck(config: Option<&Path>, instances: usize) -> Result<GradcheckReport> {
    let mut configs = default_variant_configs();
    let mut seed = 20_240_001u64;
    if let Some(path) = config {
        let run_cfg = load_config(path)?;
        seed = run_cfg.seed;
        let override_cfg = run_cfg.loss.to_loss_config();
        for c in configs.iter_mut() {
            if c.variant == override_cfg.variant {
                *c = override_cfg.clone();
            }
        }
    }
    let mut variants = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        variants.push(check_loss_variant(cfg, instances, 6, 8, 5, seed + i as u64, 0.0)?);
    }
    let pipeline_cfg = crate::losses::LossConfig::new(crate::losses::LossVariant::NormSoftmax)
        .with_gamma(8.0);
    Ok(GradcheckReport {
        variants,
        encoder_max_rel_err: check_encoder_pipeline(&pipeline_cfg, seed + 100)?,
        memvir_extended_max_rel_err: check_memvir_extended(&pipeline_cfg, seed + 101)?,
    })
}

/// One parsed `--axis NAME=V1,V2` argument.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<String>,
}

/// Axis names accepted by `sweep`.
pub const SWEEP_AXES: [&str; 5] = ["batch_size", "class_ratio", "N", "M", "mode"];

/// Parses `NAME=V1,V2,...`, deduplicating values (with a warning on
/// stderr) and rejecting unknown axis names.
pub fn parse_axis(arg: &str) -> Result<SweepAxis> {
    let (name, rest) = arg.split_once('=').ok_or_else(|| {
        Error::Config(format!("axis '{arg}' must look like NAME=V1,V2,..."))
    })?;
    if !SWEEP_AXES.contains(&name) {
        return Err(Error::Config(format!(
            "unknown axis '{name}'; valid axes: {}",
            SWEEP_AXES.join(", ")
        )));
    }
    let mut values = Vec::new();
    for v in rest.split(',') {
        let v = v.trim();
        if v.is_empty() {
            continue;
        }
        if values.iter().any(|seen| seen == v) {
            eprintln!("warning: duplicate value '{v}' for axis '{name}' ignored");
            continue;
        }
        values.push(v.to_string());
    }
    if values.is_empty() {
        return Err(Error::Config(format!("axis '{name}' has no values")));
    }
    Ok(SweepAxis {
        name: name.to_string(),
        values,
    })
}

fn apply_axis(cfg: &mut RunConfig, name: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("axis {name}: bad {what} '{value}'"));
    match name {
        "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("count"))?,
        "class_ratio" => cfg.class_ratio = value.parse().map_err(|_| bad("ratio"))?,
        "N" => cfg.memvir.n_steps = value.parse().map_err(|_| bad("count"))?,
        "M" => cfg.memvir.margin = value.parse().map_err(|_| bad("count"))?,
        "mode" => {
            cfg.memvir.mode = match value {
                "full" => MemVirMode::Full,
                "no_warmup" => MemVirMode::NoWarmup,
                "no_step_pacing" => MemVirMode::NoStepPacing,
                "baseline" => MemVirMode::Baseline,
                _ => return Err(bad("mode")),
            }
        }
        _ => return Err(Error::Config(format!("unknown axis '{name}'"))),
    }
    Ok(())
}

/// Result of one sweep cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub seed: u64,
    pub status: &'static str,
    pub last: Option<MetricsRecord>,
}

/// Cartesian sweep over the axes (times the seed list), one run directory
/// per cell plus a summary.csv. Failed cells are recorded and skipped, not
/// fatal.
pub fn cmd_sweep(
    config_path: &Path,
    axes: &[SweepAxis],
    seeds: &[u64],
) -> Result<PathBuf> {
    let base = load_config(config_path)?;
    let out_root = resolve_output_dir(&base.output_dir);
    fs::create_dir_all(&out_root)?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };

    // All axis-value combinations, outermost axis varying slowest.
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::new();
        for combo in &combos {
            for v in &axis.values {
                let mut c = combo.clone();
                c.push((axis.name.clone(), v.clone()));
                next.push(c);
            }
        }
        combos = next;
    }

    let mut cells = Vec::new();
    for combo in &combos {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let mut label_parts: Vec<String> = Vec::new();
            let mut ok = Ok(());
            for (name, value) in combo {
                label_parts.push(format!("{name}={value}"));
                if ok.is_ok() {
                    ok = apply_axis(&mut cfg, name, value);
                }
            }
            label_parts.push(format!("seed={seed}"));
            let label = label_parts.join("__");
            let cell_dir = out_root.join(&label);
            let run = ok.and_then(|_| train_and_write(&cfg, &cell_dir));
            match run {
                Ok(outcome) => cells.push(SweepCell {
                    label,
                    seed,
                    status: "ok",
                    last: outcome.metrics.last().cloned(),
                }),
                Err(err) => {
                    eprintln!("cell {label} failed: {err}");
                    cells.push(SweepCell {
                        label,
                        seed,
                        status: "failed",
                        last: None,
                    });
                }
            }
        }
    }

    let first_k = base.recall_ks.first().copied().unwrap_or(1);
    let mut csv = format!(
        "cell,seed,status,step,loss,recall_at_{first_k},p_at_1,r_precision,map_at_r,mean_cos_to_weight\n"
    );
    for cell in &cells {
        match &cell.last {
            Some(m) => {
                let recall = m.recall_at.get(&first_k).copied().unwrap_or(f64::NAN);
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    cell.label,
                    cell.seed,
                    cell.status,
                    m.step,
                    m.loss,
                    recall,
                    m.p_at_1,
                    m.r_precision,
                    m.map_at_r,
                    m.mean_cos_to_weight
                )
                .expect("writing to a String");
            }
            None => {
                writeln!(csv, "{},{},{},,,,,,,", cell.label, cell.seed, cell.status)
                    .expect("writing to a String");
            }
        }
    }
    let summary = out_root.join("summary.csv");
    fs::write(&summary, csv)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::test_support::tiny_run_config;

    #[test]
    fn output_root_env_var_is_honored() {
        std::env::set_var(OUTPUT_ROOT_ENV, "/some/root");
        let resolved = resolve_output_dir("runs/x");
        std::env::remove_var(OUTPUT_ROOT_ENV);
        assert_eq!(resolved, PathBuf::from("/some/root/runs/x"));
        assert_eq!(resolve_output_dir("runs/x"), PathBuf::from("runs/x"));
    }

    #[test]
    fn axis_parsing_dedups_and_validates() {
        let axis = parse_axis("batch_size=8,16,8").unwrap();
        assert_eq!(axis.values, vec!["8", "16"]);
        assert!(parse_axis("nope=1").is_err());
        assert!(parse_axis("mode").is_err());
        assert!(parse_axis("N=").is_err());
    }

    #[test]
    fn train_artifacts_are_reproducible_bytes() {
        let cfg = tiny_run_config(21);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        train_and_write(&cfg, dir_a.path()).unwrap();
        train_and_write(&cfg, dir_b.path()).unwrap();
        for name in ["metrics.jsonl", "difficulty.csv", "embeddings.csv", "checkpoint.json"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn metrics_jsonl_lines_have_the_fixed_key_set() {
        let cfg = tiny_run_config(22);
        let dir = tempfile::tempdir().unwrap();
        train_and_write(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(!text.is_empty());
        for line in text.lines() {
            // Strict record type rejects unknown keys and requires all.
            let rec: MetricsRecord = serde_json::from_str(line).unwrap();
            assert!(rec.loss.is_finite());
        }
    }

    #[test]
    fn eval_is_deterministic_and_checks_shapes() {
        let cfg = tiny_run_config(23);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train_and_write(&cfg, dir.path()).unwrap();
        let ckpt_path = dir.path().join("checkpoint.json");
        let test_path = dir.path().join("test.csv");
        crate::data::save_dataset(&outcome.test, &test_path).unwrap();

        let a = cmd_eval(&ckpt_path, &test_path).unwrap();
        let b = cmd_eval(&ckpt_path, &test_path).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );

        // Narrower data must be rejected.
        let mut skinny = outcome.test.clone();
        skinny.inputs = skinny.inputs.slice_cols(0, 3);
        let skinny_path = dir.path().join("skinny.csv");
        crate::data::save_dataset(&skinny, &skinny_path).unwrap();
        assert!(matches!(
            cmd_eval(&ckpt_path, &skinny_path),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn train_split_similarity_exceeds_test_split_on_a_trained_model() {
        let mut cfg = tiny_run_config(24);
        cfg.epochs = 80;
        cfg.optimizer.learning_rate = 5e-3;
        let dir = tempfile::tempdir().unwrap();
        let outcome = train_and_write(&cfg, dir.path()).unwrap();
        let ckpt_path = dir.path().join("checkpoint.json");
        let train_path = dir.path().join("train.csv");
        let test_path = dir.path().join("test.csv");
        crate::data::save_dataset(&outcome.train, &train_path).unwrap();
        crate::data::save_dataset(&outcome.test, &test_path).unwrap();
        let on_train = cmd_eval(&ckpt_path, &train_path).unwrap();
        let on_test = cmd_eval(&ckpt_path, &test_path).unwrap();
        assert!(
            on_train.mean_cos_to_weight > on_test.mean_cos_to_weight,
            "{} !> {}",
            on_train.mean_cos_to_weight,
            on_test.mean_cos_to_weight
        );
    }

    #[test]
    fn baseline_and_never_activating_full_write_identical_metrics() {
        let mut base = tiny_run_config(26);
        base.memvir.mode = crate::memvir::MemVirMode::Baseline;
        let mut dormant = base.clone();
        dormant.memvir.mode = crate::memvir::MemVirMode::Full;
        dormant.memvir.warmup = crate::config::WarmupSpec::Steps(1_000_000);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        train_and_write(&base, dir_a.path()).unwrap();
        train_and_write(&dormant, dir_b.path()).unwrap();
        let a = fs::read(dir_a.path().join("metrics.jsonl")).unwrap();
        let b = fs::read(dir_b.path().join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_model_retrieves_at_chance_level() {
        // Spread far wider than the center scale: labels carry no usable
        // geometry, so nearest-neighbor hit rate is the base rate of
        // same-class items among the other n-1 samples.
        let spec = crate::data::SyntheticSpec {
            num_train_classes: 20,
            num_test_classes: 20,
            samples_per_class: 10,
            input_dim: 16,
            cluster_spread: 50.0,
            center_scale: 1.0,
            seed: 27,
        };
        let (train, test) = crate::data::gen_synthetic(&spec).unwrap();
        let mut rng = crate::rng::seeded_stream(27, crate::rng::STREAM_INIT);
        let params =
            crate::model::ModelParams::init(16, &[16], 8, train.num_classes(), 0.01, &mut rng);
        let (emb, _) = encoder_forward(&params, &test.inputs).unwrap();
        let ranking = retrieve(&emb, &emb, true).unwrap();
        let m = compute_metrics(&ranking, &test.labels, &test.labels, &[1]).unwrap();
        let n = test.len() as f64;
        let chance = (10.0 - 1.0) / (n - 1.0);
        let sigma = (chance * (1.0 - chance) / n).sqrt();
        assert!(
            (m.recall_at[&1] - chance).abs() < 4.0 * sigma + 0.02,
            "recall {} vs chance {chance}",
            m.recall_at[&1]
        );
    }

    #[test]
    fn gradcheck_negative_control_detects_perturbation() {
        let cfg = crate::losses::LossConfig::new(crate::losses::LossVariant::NormSoftmax)
            .with_gamma(8.0);
        let clean = check_loss_variant(&cfg, 2, 6, 8, 5, 1234, 0.0).unwrap();
        assert!(clean.passed());
        let broken = check_loss_variant(&cfg, 2, 6, 8, 5, 1234, 1e-3).unwrap();
        assert!(!broken.passed(), "perturbed gradient must fail the check");
    }

    #[test]
    fn sweep_runs_cells_and_marks_failures() {
        let mut cfg = tiny_run_config(25);
        cfg.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        cfg.output_dir = dir.path().join("sweep").to_string_lossy().into_owned();
        fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

        // 9 is not divisible by classes_per_batch=4, so that cell fails.
        let axes = vec![parse_axis("batch_size=8,9").unwrap()];
        let summary = cmd_sweep(&cfg_path, &axes, &[1, 2]).unwrap();
        let text = fs::read_to_string(summary).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4, "header plus 2 values x 2 seeds");
        assert_eq!(text.matches(",ok,").count(), 2);
        assert_eq!(text.matches(",failed,").count(), 2);
    }
}
