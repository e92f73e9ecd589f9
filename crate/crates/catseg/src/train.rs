//! Training loop, evaluation runs, and run comparison.
//!
//! Everything here is deterministic given `(seed, config, dataset)`: weight
//! init consumes one seeded stream, and each epoch's data order is derived
//! from `(seed, epoch)` so resuming from a checkpoint replays identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, LoadedCheckpoint};
use crate::config::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::metrics::{self, MetricsReport};
use crate::net::{catnet_forward, collect_vars, NetworkConfig, SegNet};
use crate::ops::predict_mask;
use crate::optim::{adam_update_param, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::stats::{mann_whitney_u, UTestResult};
use crate::tape::Tape;
use crate::tensor::{LabelVolume, Tensor, CLASS_PZ, CLASS_TZ};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice_tz: f64,
    pub val_dice_pz: f64,
    pub val_dice_mean: f64,
}

pub struct TrainOutcome {
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub log: Vec<EpochLog>,
    pub best_val_dice: f64,
    pub param_count: usize,
}

struct PatientData<T: Scalar> {
    id: usize,
    input: Tensor<T>,
    labels: Arc<LabelVolume>,
}

fn load_split_data<T: Scalar>(
    manifest: &Manifest,
    base: &Path,
    split: Split,
) -> Result<Vec<PatientData<T>>> {
    let mut out = Vec::new();
    for patient in manifest.patients_in(split) {
        let (volume, labels) = manifest.load_patient(base, patient)?;
        out.push(PatientData {
            id: patient.id,
            input: volume.intensities.cast::<T>(),
            labels: Arc::new(labels),
        });
    }
    Ok(out)
}

fn with_patient<T>(id: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::data(format!("patient {id}: {e}")))
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

fn forward_patient<T: Scalar>(
    net: &SegNet<T>,
    cfg: &NetworkConfig,
    patient: &PatientData<T>,
) -> Result<LabelVolume> {
    let mut tape = Tape::new();
    let xv = tape.leaf(patient.input.clone());
    let vars = net.bind(&mut tape);
    let (logits, _) =
        with_patient(patient.id, catnet_forward(&mut tape, xv, &vars, cfg, false))?;
    with_patient(patient.id, predict_mask(tape.value(logits)))
}

fn validation_dice<T: Scalar>(
    net: &SegNet<T>,
    cfg: &NetworkConfig,
    patients: &[PatientData<T>],
) -> Result<(f64, f64)> {
    if patients.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut tz = 0.0;
    let mut pz = 0.0;
    for p in patients {
        let pred = forward_patient(net, cfg, p)?;
        tz += metrics::dice(&pred, &p.labels, CLASS_TZ)?;
        pz += metrics::dice(&pred, &p.labels, CLASS_PZ)?;
    }
    let n = patients.len() as f64;
    Ok((tz / n, pz / n))
}

/// Trains from scratch according to `config`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_impl::<f32>(config.clone(), None),
        Precision::F64 => train_impl::<f64>(config.clone(), None),
    }
}

/// Continues a checkpointed run until `epochs` total epochs, using the
/// configuration stored in the checkpoint.
pub fn resume(loaded: LoadedCheckpoint, epochs: usize) -> Result<TrainOutcome> {
    match loaded {
        LoadedCheckpoint::F32(c) => {
            let mut config = c.config.clone();
            config.epochs = epochs;
            train_impl::<f32>(config, Some(c))
        }
        LoadedCheckpoint::F64(c) => {
            let mut config = c.config.clone();
            config.epochs = epochs;
            train_impl::<f64>(config, Some(c))
        }
    }
}

fn train_impl<T: Scalar>(
    config: TrainConfig,
    resume_from: Option<Checkpoint<T>>,
) -> Result<TrainOutcome> {
    let (manifest, base) = Manifest::load(&config.manifest)?;
    let train_set = load_split_data::<T>(&manifest, &base, Split::Train)?;
    let val_set = load_split_data::<T>(&manifest, &base, Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::data("manifest has no training patients"));
    }
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;

    let (mut net, mut adam, start_epoch, mut best_val) = match resume_from {
        Some(ckpt) => {
            if ckpt.config.network != config.network {
                return Err(Error::config(
                    "resume: checkpoint network does not match configuration",
                ));
            }
            (ckpt.net, ckpt.adam, ckpt.epoch, ckpt.best_val_dice)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let net = SegNet::<T>::init(config.network.clone(), &mut rng)?;
            let mut sizes = Vec::new();
            net.for_each_param(&mut |_, t| sizes.push(t.numel()));
            (net, AdamState::new(&sizes), 0, f64::NEG_INFINITY)
        }
    };
    let param_count = net.param_count();

    let adam_cfg = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };

    let log_path = config.out_dir.join("train_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let final_path = config.out_dir.join("checkpoint.catc");
    let best_path = config.out_dir.join("best.catc");
    let mut log = Vec::new();

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64)));

        let mut epoch_loss = 0.0;
        let mut accum: Option<Vec<Vec<T>>> = None;
        let mut accum_count = 0usize;

        for (pos, &pi) in order.iter().enumerate() {
            let patient = &train_set[pi];
            let mut tape = Tape::new();
            let xv = tape.leaf(patient.input.clone());
            let vars = net.bind(&mut tape);
            let (logits, _) = with_patient(
                patient.id,
                catnet_forward(&mut tape, xv, &vars, &config.network, config.capture_attention),
            )?;
            let loss = with_patient(patient.id, tape.cross_entropy(logits, patient.labels.clone()))?;
            epoch_loss += tape.value(loss).data()[0].to_f64();
            let mut grads = with_patient(patient.id, tape.backward(loss))?;

            let flat = collect_vars(&vars);
            let batch = accum.get_or_insert_with(|| {
                flat.iter()
                    .map(|v| vec![T::ZERO; tape.value(*v).numel()])
                    .collect()
            });
            for (slot, var) in batch.iter_mut().zip(&flat) {
                if let Some(g) = grads.take(*var) {
                    for (a, b) in slot.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            accum_count += 1;

            if accum_count == config.batch || pos + 1 == order.len() {
                let scale = T::ONE / T::from_usize(accum_count);
                let batch = accum.take().unwrap();
                adam.step += 1;
                let mut idx = 0;
                net.for_each_param_mut(&mut |_, t| {
                    let mut data = t.data().to_vec();
                    let grad: Vec<T> = batch[idx].iter().map(|&g| g * scale).collect();
                    adam_update_param(
                        &mut data,
                        &grad,
                        &mut adam.m[idx],
                        &mut adam.v[idx],
                        adam.step,
                        &adam_cfg,
                    );
                    t.set_data(data);
                    idx += 1;
                });
                accum_count = 0;
            }
        }

        let (val_tz, val_pz) = validation_dice(&net, &config.network, &val_set)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / order.len() as f64,
            val_dice_tz: val_tz,
            val_dice_pz: val_pz,
            val_dice_mean: (val_tz + val_pz) / 2.0,
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::json("epoch log", e))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        eprintln!(
            "epoch {:3}  loss {:.5}  val dice tz {:.4} pz {:.4}",
            entry.epoch, entry.train_loss, entry.val_dice_tz, entry.val_dice_pz
        );

        if !val_set.is_empty() && entry.val_dice_mean > best_val {
            best_val = entry.val_dice_mean;
            save_checkpoint(
                &best_path,
                &Checkpoint {
                    config: config.clone(),
                    epoch: epoch + 1,
                    best_val_dice: best_val,
                    net: net.clone(),
                    adam: AdamState {
                        m: adam.m.clone(),
                        v: adam.v.clone(),
                        step: adam.step,
                    },
                },
            )?;
        }
        log.push(entry);
    }

    save_checkpoint(
        &final_path,
        &Checkpoint {
            config: config.clone(),
            epoch: config.epochs,
            best_val_dice: best_val,
            net,
            adam,
        },
    )?;
    if !best_path.exists() {
        fs::copy(&final_path, &best_path)
            .map_err(|e| Error::io(best_path.display().to_string(), e))?;
    }

    Ok(TrainOutcome {
        final_path,
        best_path,
        log,
        best_val_dice: best_val,
        param_count,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Runs a checkpointed network over one split and produces the full report.
pub fn evaluate(
    loaded: &LoadedCheckpoint,
    split: Split,
    manifest_override: Option<&Path>,
    label: Option<String>,
) -> Result<MetricsReport> {
    match loaded {
        LoadedCheckpoint::F32(c) => evaluate_impl::<f32>(c, split, manifest_override, label),
        LoadedCheckpoint::F64(c) => evaluate_impl::<f64>(c, split, manifest_override, label),
    }
}

fn evaluate_impl<T: Scalar>(
    ckpt: &Checkpoint<T>,
    split: Split,
    manifest_override: Option<&Path>,
    label: Option<String>,
) -> Result<MetricsReport> {
    let manifest_path = manifest_override.unwrap_or(&ckpt.config.manifest);
    let (manifest, base) = Manifest::load(manifest_path)?;
    let patients = load_split_data::<T>(&manifest, &base, split)?;
    if patients.is_empty() {
        return Err(Error::data(format!("split '{split}' has no patients")));
    }
    let mut results = Vec::new();
    for p in &patients {
        let pred = forward_patient(&ckpt.net, &ckpt.config.network, p)?;
        results.push(with_patient(
            p.id,
            metrics::evaluate_patient(p.id, &pred, &p.labels, manifest.spacing),
        )?);
    }
    Ok(metrics::build_report(&split.to_string(), label, results))
}

/// Forward pass over a single stored volume with attention capture.
pub fn forward_volume_with_attention(
    loaded: &LoadedCheckpoint,
    intensities: &Tensor<f32>,
) -> Result<Vec<crate::attention::AttentionRecord<f64>>> {
    fn run<T: Scalar>(
        ckpt: &Checkpoint<T>,
        intensities: &Tensor<f32>,
    ) -> Result<Vec<crate::attention::AttentionRecord<f64>>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(intensities.cast::<T>());
        let vars = ckpt.net.bind(&mut tape);
        let (_, records) = catnet_forward(&mut tape, xv, &vars, &ckpt.config.network, true)?;
        Ok(records
            .into_iter()
            .map(|r| crate::attention::AttentionRecord {
                scale: r.scale,
                block: r.block,
                head: r.head,
                matrix: r.matrix.cast::<f64>(),
            })
            .collect())
    }
    match loaded {
        LoadedCheckpoint::F32(c) => run::<f32>(c, intensities),
        LoadedCheckpoint::F64(c) => run::<f64>(c, intensities),
    }
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub zone: String,
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: Option<UTestResult>,
    pub stars: &'static str,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p <= 0.01 {
        "***"
    } else if p <= 0.05 {
        "**"
    } else if p <= 0.1 {
        "*"
    } else {
        ""
    }
}

/// Per-zone rank tests between two evaluation reports over the same patients.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<CompareRow>> {
    let mut ids_a = a.patient_ids();
    let mut ids_b = b.patient_ids();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    if ids_a != ids_b {
        return Err(Error::usage(
            "compare: reports cover different patient sets",
        ));
    }
    let mut rows = Vec::new();
    for (zone, _) in metrics::ZONES {
        for metric in metrics::METRICS {
            let va = a.patient_values(zone, "whole", metric);
            let vb = b.patient_values(zone, "whole", metric);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let test = if va.is_empty() || vb.is_empty() {
                None
            } else {
                Some(mann_whitney_u(&va, &vb)?)
            };
            rows.push(CompareRow {
                zone: zone.to_string(),
                metric: metric.to_string(),
                mean_a: mean(&va),
                mean_b: mean(&vb),
                stars: test.map(|t| significance_stars(t.p)).unwrap_or(""),
                test,
            });
        }
    }
    Ok(rows)
}

pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str("zone metric   mean A     mean B     U        p        sig\n");
    for r in rows {
        let (u, p) = r
            .test
            .map(|t| (format!("{:8.1}", t.u), format!("{:.6}", t.p)))
            .unwrap_or_else(|| ("   --".into(), "--".into()));
        out.push_str(&format!(
            "{:4} {:6} {:10.4} {:10.4} {} {:8} {}\n",
            r.zone, r.metric, r.mean_a, r.mean_b, u, p, r.stars
        ));
    }
    out
}
