//! Training, evaluation and artifact persistence for one configured run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rls_core::attack::{run_attack, EotGrad, FixedMaskGrad, GradFn};
use rls_core::checkpoint::{self, Checkpoint};
use rls_core::diversity::{diversity_terms, mean_pairwise_cosine};
use rls_core::train::{train, EpochMetrics};
use rls_core::{AttackConfig, Dataset, SamplingMask, SubModelBank, Tape, Tensor, ThreatModel, TrainRngs};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{csv_err, io_err, json_err, AtStage, HarnessError, Result, Stage};
use crate::seeds::{self, SeedStreams};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ATTACKS_FILE: &str = "attacks.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATUS_FILE: &str = "status.json";
pub const SWEEP_FILE: &str = "sweep_k.csv";

/// Rows per forward or attack batch during evaluation.
pub const EVAL_BATCH: usize = 256;

/// One accuracy measurement, clean or under attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// `clean`, `fgsm` or `pgd`.
    pub attack: String,
    pub epsilon: f64,
    pub step_size: f64,
    pub n_steps: usize,
    /// `none`, `transfer` or `adaptive`.
    pub mode: String,
    pub n_mask_samples: usize,
    pub n_votes: usize,
    pub accuracy: f64,
    pub n_examples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    /// Sampled models compared per example.
    pub k: usize,
    pub n_examples: usize,
    /// Mean pairwise cosine similarity of non-maximal predictions.
    pub mean_cosine: f64,
    /// Mean log-determinant statistic; NaN when `k + 1` exceeds the class count.
    pub mean_logdet: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub m: usize,
    pub samplable_positions: usize,
    /// Scalars in one plain network of the same architecture.
    pub single_model: usize,
    pub shared: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Clean accuracy at the first configured vote count.
    pub clean_accuracy: f64,
    /// Clean rows for every vote count followed by attack rows.
    pub accuracies: Vec<AccuracyRow>,
    pub diversity: DiversityMetrics,
    pub params: ParamCounts,
    pub final_epoch: Option<EpochMetrics>,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl RunMetrics {
    /// Accuracy of the first row matching attack kind, ε, mode and votes.
    pub fn accuracy(&self, attack: &str, epsilon: f64, mode: &str, n_votes: usize) -> Option<f64> {
        self.accuracies
            .iter()
            .find(|r| r.attack == attack && r.epsilon == epsilon && r.mode == mode && r.n_votes == n_votes)
            .map(|r| r.accuracy)
    }
}

#[derive(Debug, Serialize)]
struct Status<'a> {
    complete: bool,
    failed_stage: Option<&'a str>,
    error: Option<String>,
    artifacts: &'a [&'a str],
}

fn write_status(dir: &Path, status: &Status<'_>) -> Result<()> {
    let path = dir.join(STATUS_FILE);
    let text = serde_json::to_string_pretty(status).map_err(json_err(Stage::Persist, &path))?;
    fs::write(&path, text).map_err(io_err(Stage::Persist, path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(Stage::Persist, path))?;
    fs::write(path, text).map_err(io_err(Stage::Persist, path))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(Stage::Persist, path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(Stage::Persist, path))?;
    }
    w.flush().map_err(io_err(Stage::Persist, path))
}

pub fn param_counts(bank: &SubModelBank) -> ParamCounts {
    ParamCounts {
        m: bank.m(),
        samplable_positions: bank.samplable_count(),
        single_model: bank.architecture().param_count(),
        shared: bank.shared_param_count(),
        total: bank.total_param_count(),
    }
}

/// A freshly initialized bank for the configured architecture.
pub fn build_bank(cfg: &ExperimentConfig, data: &Dataset, streams: &SeedStreams) -> Result<SubModelBank> {
    let arch = cfg
        .architecture
        .resolve(data.sample_shape(), data.class_count())
        .at(Stage::Build)?;
    SubModelBank::build(arch, cfg.m, &mut streams.stream(seeds::INIT)).at(Stage::Build)
}

pub struct TrainOutcome {
    pub bank: SubModelBank,
    pub history: Vec<EpochMetrics>,
}

/// Builds and trains a bank; validation accuracy uses the test split.
pub fn train_bank(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    streams: &SeedStreams,
) -> Result<TrainOutcome> {
    let mut bank = build_bank(cfg, train_set, streams)?;
    let mut rngs = TrainRngs {
        shuffle: streams.stream(seeds::SHUFFLE),
        mask: streams.stream(seeds::MASK),
        eval: streams.stream(seeds::EVAL),
    };
    let history = train(&mut bank, train_set, test_set, &cfg.train, &mut rngs).at(Stage::Train)?;
    Ok(TrainOutcome { bank, history })
}

fn defended_accuracy<R: Rng + ?Sized>(
    bank: &SubModelBank,
    batches: &[(Tensor, Vec<usize>)],
    n_votes: usize,
    rng: &mut R,
) -> rls_core::Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for (x, y) in batches {
        let pred = bank.predict_defended(x, rng, n_votes)?;
        correct += pred.classes.iter().zip(y).filter(|(p, t)| p == t).count();
        total += y.len();
    }
    Ok(correct as f64 / total as f64)
}

fn batches(data: &Dataset) -> rls_core::Result<Vec<(Tensor, Vec<usize>)>> {
    (0..data.len())
        .step_by(EVAL_BATCH)
        .map(|s| data.range(s, (s + EVAL_BATCH).min(data.len())))
        .collect()
}

fn mode_name(mode: ThreatModel) -> &'static str {
    match mode {
        ThreatModel::Transfer => "transfer",
        ThreatModel::Adaptive => "adaptive",
    }
}

fn kind_name(cfg: &AttackConfig) -> &'static str {
    match cfg.kind {
        rls_core::AttackKind::Fgsm => "fgsm",
        rls_core::AttackKind::Pgd => "pgd",
    }
}

/// Mask draws used by the adaptive attacker. A single-sub-model bank has
/// one sampled model, so one draw already is the exact expectation.
fn adaptive_samples(bank: &SubModelBank, cfg: &AttackConfig) -> usize {
    if bank.num_sampled_models() == Some(1) {
        1
    } else {
        cfg.n_mask_samples
    }
}

/// Clean accuracy under defended inference for every configured vote count.
pub fn clean_rows(
    bank: &SubModelBank,
    test_set: &Dataset,
    cfg: &ExperimentConfig,
    streams: &SeedStreams,
) -> Result<Vec<AccuracyRow>> {
    let data = batches(test_set).at(Stage::Evaluate)?;
    cfg.defense
        .n_votes
        .iter()
        .map(|&v| {
            let mut rng = streams.sub_stream(seeds::DEFENSE, &format!("clean/{v}"));
            Ok(AccuracyRow {
                attack: "clean".into(),
                epsilon: 0.0,
                step_size: 0.0,
                n_steps: 0,
                mode: "none".into(),
                n_mask_samples: 0,
                n_votes: v,
                accuracy: defended_accuracy(bank, &data, v, &mut rng).at(Stage::Evaluate)?,
                n_examples: test_set.len(),
                seed: streams.master(),
            })
        })
        .collect()
}

/// Every configured attack in transfer and adaptive mode, scored under
/// defended inference for every vote count.
pub fn attack_rows(
    bank: &SubModelBank,
    test_set: &Dataset,
    cfg: &ExperimentConfig,
    streams: &SeedStreams,
) -> Result<Vec<AccuracyRow>> {
    let data = batches(test_set).at(Stage::Attack)?;
    let surrogate = bank.constant_mask(0).at(Stage::Attack)?;
    let mut rows = Vec::new();
    for (i, attack) in cfg.attacks.iter().enumerate() {
        for mode in [ThreatModel::Transfer, ThreatModel::Adaptive] {
            let label = format!("{i}/{}", mode_name(mode));
            let mut attack_rng = streams.sub_stream(seeds::ATTACK, &label);
            let n_mask_samples = match mode {
                ThreatModel::Transfer => 0,
                ThreatModel::Adaptive => adaptive_samples(bank, attack),
            };
            let mut grad: Box<dyn GradFn> = match mode {
                ThreatModel::Transfer => Box::new(FixedMaskGrad {
                    bank,
                    mask: surrogate.clone(),
                }),
                ThreatModel::Adaptive => Box::new(EotGrad {
                    bank,
                    n_samples: n_mask_samples,
                    rng: streams.sub_stream(seeds::ATTACK, &format!("{label}/eot")),
                }),
            };
            let adversarial: Vec<(Tensor, Vec<usize>)> = data
                .iter()
                .map(|(x, y)| {
                    Ok((
                        run_attack(grad.as_mut(), x, y, attack, &mut attack_rng)?,
                        y.clone(),
                    ))
                })
                .collect::<rls_core::Result<_>>()
                .at(Stage::Attack)?;
            // FGSM ignores the iterative fields; record what it actually ran.
            let (step_size, n_steps) = match attack.kind {
                rls_core::AttackKind::Fgsm => (attack.epsilon, 1),
                rls_core::AttackKind::Pgd => (attack.step_size, attack.n_steps),
            };
            for &v in &cfg.defense.n_votes {
                let mut rng = streams.sub_stream(seeds::DEFENSE, &format!("{label}/{v}"));
                rows.push(AccuracyRow {
                    attack: kind_name(attack).into(),
                    epsilon: attack.epsilon,
                    step_size,
                    n_steps,
                    mode: mode_name(mode).into(),
                    n_mask_samples,
                    n_votes: v,
                    accuracy: defended_accuracy(bank, &adversarial, v, &mut rng).at(Stage::Attack)?,
                    n_examples: test_set.len(),
                    seed: streams.master(),
                });
            }
        }
    }
    Ok(rows)
}

fn softmax_rows(logits: &Tensor) -> rls_core::Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let p = tape.softmax(v)?;
    let probs = tape.value(p);
    Ok(probs
        .data()
        .chunks(probs.row_len())
        .map(<[f64]>::to_vec)
        .collect())
}

/// Diversity statistics from precomputed predictions: `preds[i]` holds the
/// `K` probability rows of example `i`.
pub fn diversity_from_predictions(
    preds: &[Vec<Vec<f64>>],
    labels: &[usize],
) -> rls_core::Result<DiversityMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(rls_core::Error::Contract(format!(
            "{} prediction sets for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let k = preds[0].len();
    let classes = preds[0].first().map_or(0, Vec::len);
    let with_logdet = k >= 1 && k < classes;
    let (mut cos, mut logdet) = (0.0, 0.0);
    for (rows, &label) in preds.iter().zip(labels) {
        cos += mean_pairwise_cosine(rows, label).unwrap_or(f64::NAN);
        if with_logdet {
            logdet += diversity_terms(rows, label)?.logdet;
        }
    }
    let n = preds.len() as f64;
    Ok(DiversityMetrics {
        k,
        n_examples: preds.len(),
        mean_cosine: cos / n,
        mean_logdet: if with_logdet { logdet / n } else { f64::NAN },
    })
}

/// `k` masks for one example: distinct whenever the bank has at least `k`
/// sampled models, otherwise drawn with replacement.
fn draw_masks<R: Rng + ?Sized>(bank: &SubModelBank, k: usize, rng: &mut R) -> Vec<SamplingMask> {
    let distinct = bank.num_sampled_models().is_none_or(|n| n >= k as u128);
    let mut masks: Vec<SamplingMask> = Vec::with_capacity(k);
    while masks.len() < k {
        let m = bank.sample_mask(rng);
        if !distinct || !masks.contains(&m) {
            masks.push(m);
        }
    }
    masks
}

/// Per-example diversity of `k` freshly sampled models over `dataset`.
pub fn diversity_report<R: Rng + ?Sized>(
    bank: &SubModelBank,
    dataset: &Dataset,
    k: usize,
    rng: &mut R,
) -> rls_core::Result<DiversityMetrics> {
    if dataset.is_empty() {
        return Err(rls_core::Error::Contract(
            "diversity report on an empty dataset".into(),
        ));
    }
    if k == 0 {
        return Err(rls_core::Error::Contract("diversity report needs k ≥ 1".into()));
    }
    let mut preds: Vec<Vec<Vec<f64>>> = Vec::with_capacity(dataset.len());
    for start in (0..dataset.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let (x, _) = dataset.range(start, end)?;
        let masks: Vec<Vec<SamplingMask>> = (start..end).map(|_| draw_masks(bank, k, rng)).collect();
        // Group rows by mask so each distinct sampled model runs once.
        let mut groups: BTreeMap<&[usize], Vec<(usize, usize)>> = BTreeMap::new();
        for (row, set) in masks.iter().enumerate() {
            for (slot, m) in set.iter().enumerate() {
                groups.entry(m.indices()).or_default().push((row, slot));
            }
        }
        let mut chunk = vec![vec![Vec::new(); k]; end - start];
        for (mask, members) in groups {
            let rows: Vec<usize> = members.iter().map(|&(r, _)| r).collect();
            let probs =
                softmax_rows(&bank.forward_sampled(&SamplingMask(mask.to_vec()), &x.select_rows(&rows)?)?)?;
            for ((row, slot), p) in members.into_iter().zip(probs) {
                chunk[row][slot] = p;
            }
        }
        preds.extend(chunk);
    }
    diversity_from_predictions(&preds, dataset.labels())
}

/// Sampled models compared by the diversity report.
pub fn diversity_k(cfg: &ExperimentConfig) -> usize {
    cfg.train.k.max(2)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(Stage::Persist, dir))
}

/// Trains, evaluates clean and attacked accuracy, measures diversity and
/// writes all artifacts to `cfg.output_dir`. On failure `status.json` names
/// the failing stage and lists the artifacts written so far.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir)?;
    let mut written: Vec<&str> = Vec::new();
    let outcome = run_stages(cfg, &dir, &mut written);
    let status = match &outcome {
        Ok(_) => Status {
            complete: true,
            failed_stage: None,
            error: None,
            artifacts: &written,
        },
        Err(e) => Status {
            complete: false,
            failed_stage: Some(e.stage().name()),
            error: Some(e.to_string()),
            artifacts: &written,
        },
    };
    write_status(&dir, &status)?;
    outcome
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path, written: &mut Vec<&str>) -> Result<RunMetrics> {
    let start = Instant::now();
    let _ = fs::remove_file(dir.join(SUMMARY_FILE));
    write_status(
        dir,
        &Status {
            complete: false,
            failed_stage: None,
            error: None,
            artifacts: &[],
        },
    )?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()).map_err(io_err(Stage::Persist, dir.join(CONFIG_FILE)))?;
    written.push(CONFIG_FILE);

    let streams = SeedStreams::new(cfg.seed);
    let (train_set, test_set) = cfg.load_datasets()?;
    let TrainOutcome { bank, history } = train_bank(cfg, &train_set, &test_set, &streams)?;

    checkpoint::save(
        &Checkpoint {
            bank: bank.clone(),
            train: cfg.train.clone(),
        },
        dir.join(CHECKPOINT_FILE),
    )
    .at(Stage::Checkpoint)?;
    written.push(CHECKPOINT_FILE);
    write_csv(&dir.join(METRICS_FILE), &history)?;
    written.push(METRICS_FILE);

    let mut accuracies = clean_rows(&bank, &test_set, cfg, &streams)?;
    accuracies.extend(attack_rows(&bank, &test_set, cfg, &streams)?);
    write_csv(&dir.join(ATTACKS_FILE), &accuracies)?;
    written.push(ATTACKS_FILE);

    let diversity = diversity_report(
        &bank,
        &test_set,
        diversity_k(cfg),
        &mut streams.stream(seeds::DIVERSITY),
    )
    .at(Stage::Diversity)?;

    let metrics = RunMetrics {
        clean_accuracy: accuracies[0].accuracy,
        accuracies,
        diversity,
        params: param_counts(&bank),
        final_epoch: history.last().cloned(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    write_json(&dir.join(SUMMARY_FILE), &metrics)?;
    written.push(SUMMARY_FILE);
    Ok(metrics)
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    k: usize,
    attack: &'a str,
    epsilon: f64,
    n_steps: usize,
    mode: &'a str,
    n_votes: usize,
    accuracy: f64,
    mean_cosine: f64,
    mean_logdet: f64,
    config_hash: &'a str,
}

/// One run per `K` under `output_dir/k<K>`, all sharing the master seed and
/// hence the dataset subset and initialization. Writes `sweep_k.csv`.
pub fn sweep_k(cfg: &ExperimentConfig, k_values: &[usize]) -> Result<Vec<RunMetrics>> {
    if k_values.is_empty() {
        return Err(HarnessError::config("k_values", "must list at least one K"));
    }
    let mut runs = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut sub = cfg.clone();
        sub.train.k = k;
        sub.output_dir = cfg.output_dir.join(format!("k{k}"));
        runs.push(run_experiment(&sub)?);
    }
    let rows: Vec<SweepRow> = k_values
        .iter()
        .zip(&runs)
        .flat_map(|(&k, run)| {
            run.accuracies.iter().map(move |r| SweepRow {
                k,
                attack: &r.attack,
                epsilon: r.epsilon,
                n_steps: r.n_steps,
                mode: &r.mode,
                n_votes: r.n_votes,
                accuracy: r.accuracy,
                mean_cosine: run.diversity.mean_cosine,
                mean_logdet: run.diversity.mean_logdet,
                config_hash: &run.config_hash,
            })
        })
        .collect();
    write_csv(&cfg.output_dir.join(SWEEP_FILE), &rows)?;
    Ok(runs)
}

/// Loads a checkpoint written by a previous run.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).at(Stage::Checkpoint)
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rls_core::Architecture;

    use super::*;

    #[test]
    fn orthogonal_predictions_have_zero_cosine_and_logdet() {
        // Non-maximal parts (label 0 removed) are orthogonal unit vectors.
        let rows = vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let d = diversity_from_predictions(&[rows.clone(), rows], &[0, 0]).unwrap();
        assert_eq!(d.mean_cosine, 0.0);
        assert!(d.mean_logdet.abs() < 1e-12);
    }

    #[test]
    fn single_sub_model_has_unit_cosine() {
        let arch = Architecture::mlp(vec![1, 1, 5], &[7], 4);
        let bank = SubModelBank::build(arch, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = rls_core::data::synthetic_blobs(1, 10, 4, 5, 0.3).unwrap();
        let d = diversity_report(&bank, &data, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d.mean_cosine, 1.0);
        assert_eq!(d.n_examples, 40);
    }

    #[test]
    fn report_masks_are_distinct_when_possible() {
        let arch = Architecture::mlp(vec![1, 1, 5], &[7], 4);
        let bank = SubModelBank::build(arch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let masks = draw_masks(&bank, 4, &mut rng);
            for i in 0..4 {
                assert!(!masks[..i].contains(&masks[i]));
            }
        }
    }

    #[test]
    fn mismatched_prediction_sets_are_rejected() {
        assert!(diversity_from_predictions(&[], &[]).is_err());
        assert!(diversity_from_predictions(&[vec![vec![1.0, 0.0, 0.0]]], &[0, 1]).is_err());
    }
}
