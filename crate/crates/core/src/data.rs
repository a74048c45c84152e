//! Synthetic Gaussian-cluster datasets with class-disjoint train/test
//! splits, a balanced batch sampler, and flat CSV feature files
//! (`label,f0,f1,...`, gzip accepted by extension).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{seeded_stream, standard_normal, STREAM_DATA, STREAM_SUBSET};

/// Immutable labeled feature set. Every class must have at least two
/// samples so retrieval always has a non-query relevant item.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Sorted distinct labels.
    pub class_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        for (&class, &n) in &counts {
            if n < 2 {
                return Err(Error::InvalidSpec(format!(
                    "class {class} has only {n} sample(s); retrieval needs at least 2"
                )));
            }
        }
        let mut class_ids: Vec<usize> = counts.into_keys().collect();
        class_ids.sort_unstable();
        Ok(Dataset {
            inputs,
            labels,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Labels remapped to their position in `class_ids`, i.e. a contiguous
    /// [0, C) space for the loss.
    pub fn label_indices(&self) -> Vec<usize> {
        let lookup: HashMap<usize, usize> = self
            .class_ids
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        self.labels.iter().map(|l| lookup[l]).collect()
    }

    /// Deterministic class-ratio subsetting: keeps a seeded random subset of
    /// ceil(ratio * C) classes with all their samples.
    pub fn subset_classes(&self, ratio: f64, seed: u64) -> Result<Dataset> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "class ratio must lie in (0, 1], got {ratio}"
            )));
        }
        if (ratio - 1.0).abs() < f64::EPSILON {
            return Ok(self.clone());
        }
        let keep = ((self.num_classes() as f64 * ratio).ceil() as usize).max(1);
        let mut rng = seeded_stream(seed, STREAM_SUBSET);
        let mut ids = self.class_ids.clone();
        ids.shuffle(&mut rng);
        ids.truncate(keep);
        ids.sort_unstable();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if ids.binary_search(&l).is_ok() {
                rows.push(self.inputs.row(i).to_vec());
                labels.push(l);
            }
        }
        Dataset::new(Matrix::from_rows(&rows)?, labels)
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_train_classes: usize,
    pub num_test_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub center_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_classes == 0 || self.num_test_classes == 0 {
            return Err(Error::InvalidSpec("need at least one class per split".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidSpec(
                "samples_per_class must be >= 2 for retrieval".into(),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if !(self.cluster_spread > 0.0) || !(self.center_scale > 0.0) {
            return Err(Error::InvalidSpec(
                "cluster_spread and center_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian clusters around Gaussian centers; train classes take ids
/// [0, T), test classes [T, T+E) so the splits never share a class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = seeded_stream(spec.seed, STREAM_DATA);
    let total = spec.num_train_classes + spec.num_test_classes;
    let centers: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| spec.center_scale * standard_normal(&mut rng))
                .collect()
        })
        .collect();
    let mut make_split = |class_range: std::ops::Range<usize>| -> Result<Dataset> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in class_range {
            for _ in 0..spec.samples_per_class {
                let row: Vec<f64> = centers[class]
                    .iter()
                    .map(|c| c + spec.cluster_spread * standard_normal(&mut rng))
                    .collect();
                rows.push(row);
                labels.push(class);
            }
        }
        Dataset::new(Matrix::from_rows(&rows)?, labels)
    };
    let train = make_split(0..spec.num_train_classes)?;
    let test = make_split(spec.num_train_classes..total)?;
    Ok((train, test))
}

/// Balanced batch: `classes_per_batch` distinct classes drawn without
/// replacement, an equal number of samples from each (also without
/// replacement within the class).
pub fn sample_batch<R: Rng>(
    ds: &Dataset,
    batch_size: usize,
    classes_per_batch: usize,
    rng: &mut R,
) -> Result<(Matrix, Vec<usize>)> {
    if classes_per_batch == 0 || batch_size == 0 {
        return Err(Error::InvalidSpec("batch and class counts must be >= 1".into()));
    }
    if batch_size % classes_per_batch != 0 {
        return Err(Error::InvalidSpec(format!(
            "batch size {batch_size} not divisible by classes_per_batch {classes_per_batch}"
        )));
    }
    if classes_per_batch > ds.num_classes() {
        return Err(Error::InsufficientClasses {
            requested: classes_per_batch,
            available: ds.num_classes(),
        });
    }
    let per_class = batch_size / classes_per_batch;
    let mut chosen = ds.class_ids.clone();
    chosen.shuffle(rng);
    chosen.truncate(classes_per_batch);

    let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for class in chosen {
        let members = &by_class[&class];
        if members.len() < per_class {
            return Err(Error::InsufficientSamples {
                class,
                requested: per_class,
                available: members.len(),
            });
        }
        let mut picks = members.clone();
        picks.shuffle(rng);
        picks.truncate(per_class);
        for idx in picks {
            rows.push(ds.inputs.row(idx).to_vec());
            labels.push(class);
        }
    }
    Ok((Matrix::from_rows(&rows)?, labels))
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("gz") {
        Ok(Box::new(BufWriter::new(GzEncoder::new(
            file,
            Compression::default(),
        ))))
    } else {
        Ok(Box::new(BufWriter::new(file)))
    }
}

/// Writes `label,f0,f1,...` rows. Floats use the shortest representation
/// that round-trips, so save -> load is value-exact.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let dim = ds.input_dim();
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields = vec![ds.labels[i].to_string()];
        fields.extend(ds.inputs.row(i).iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature CSV written by [`save_dataset`] (or by hand). A
/// header-only file is an empty dataset, not an error.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Schema {
                line: 1,
                message: "file is empty, expected a header".into(),
            })
        }
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Schema {
            line: 1,
            message: format!("first column must be 'label', got '{}'", cols.first().unwrap_or(&"")),
        });
    }
    let dim = cols.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Schema {
                line: line_no,
                message: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad label '{}'", fields[0]),
        })?;
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad float '{f}'"),
            })?;
            row.push(v);
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Ok(Dataset {
            inputs: Matrix::zeros(0, dim),
            labels: Vec::new(),
            class_ids: Vec::new(),
        });
    }
    Dataset::new(Matrix::from_rows(&rows)?, labels)
}
