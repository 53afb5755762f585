//! Federated training loop: local updates, one protocol round per global step, metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use brave_core::adversary::{corrupt_labels, Adversary, AttackStrategy};
use brave_core::fl::{self, Dataset, Evaluation, FlError, ModelSpec};
use brave_core::group::{setup_group, GroupError};
use brave_core::protocol::{
    ProtocolError, RoundStatus, RoundTranscript, Simulation, SimulationConfig,
};
use brave_core::transport::Stage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ExperimentConfig, LogisticTask, QuadraticTask, TaskConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("group setup: {0}")]
    Group(#[from] GroupError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("data: {0}")]
    Data(#[from] FlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributorStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// One JSONL line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// SHA-256 over the little-endian bytes of the global model.
    pub checksum: String,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive_accuracy: Option<f64>,
    pub status: RoundStatus,
    pub retried: bool,
    pub contributors: ContributorStats,
    pub accepted_relations: usize,
    pub non_aggregatable: usize,
    /// Largest gap between the decoded aggregate and the real-valued contributor mean.
    pub quantization_error: f64,
    /// Pairwise coordinate differences revealed to the lowest-id benign participant.
    pub revealed_differences: usize,
    pub blamed: Vec<usize>,
    pub suspect_pairs: Vec<(usize, usize)>,
    pub agreement_violations: usize,
    pub messages: BTreeMap<Stage, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlameEvent {
    pub round: u64,
    pub flagged: Vec<usize>,
    pub suspect_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: u64,
    pub n: usize,
    pub f: usize,
    pub attack: AttackStrategy,
    pub adversaries: Vec<usize>,
    pub final_loss_brave: f64,
    pub final_accuracy_brave: f64,
    pub final_loss_naive: Option<f64>,
    pub final_accuracy_naive: Option<f64>,
    pub agreement_violations: usize,
    pub halted_rounds: Vec<u64>,
    pub blames: Vec<BlameEvent>,
    pub final_checksum: String,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn halted(&self) -> bool {
        !self.halted_rounds.is_empty()
    }
}

pub fn model_checksum(w: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in w {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Task {
    spec: ModelSpec,
    train: Vec<Dataset>,
    test: Dataset,
}

fn build_task(cfg: &ExperimentConfig) -> Result<Task, RunError> {
    let n = cfg.n;
    let (spec, mut fed) = match &cfg.task {
        TaskConfig::Logistic(LogisticTask {
            dim,
            per_participant,
            separation,
            test_size,
            csv: None,
        }) => (
            ModelSpec::Logistic {
                dim: *dim,
                classes: 2,
            },
            fl::make_synthetic(cfg.seed, n, *per_participant, *dim, *separation, *test_size)?,
        ),
        TaskConfig::Logistic(LogisticTask { csv: Some(c), .. }) => {
            let all = fl::load_csv(&c.train, 0)?;
            let test = fl::load_csv(&c.test, usize::MAX)?;
            let spec = ModelSpec::Logistic {
                dim: all.dim(),
                classes: c.classes,
            };
            let train = fl::split_iid(&all, n, cfg.seed)?;
            (spec, fl::Federation { train, test })
        }
        TaskConfig::Quadratic(QuadraticTask {
            dim,
            per_participant,
            noise,
        }) => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7461_7267_6574);
            let target: Vec<f64> = (0..*dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fed = fl::make_quadratic(cfg.seed, n, *per_participant, &target, *noise)?;
            (ModelSpec::Quadratic { target }, fed)
        }
    };
    if cfg.attack == AttackStrategy::LabelFlip {
        if let ModelSpec::Logistic { classes, .. } = &spec {
            for i in cfg.adversary_ids() {
                fed.train[i] = corrupt_labels(&fed.train[i], *classes)?;
            }
        }
    }
    Ok(Task {
        spec,
        train: fed.train,
        test: fed.test,
    })
}

fn adversary_seed(seed: u64, id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"brave/naive-adversary");
    h.update(seed.to_le_bytes());
    h.update((id as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn clamp(w: Vec<f64>, bound: f64) -> Vec<f64> {
    w.into_iter()
        .map(|x| if x.is_nan() { 0.0 } else { x.clamp(-bound, bound) })
        .collect()
}

/// Trains every participant from `global`.
fn train_all(task: &Task, global: &[f64], cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>, RunError> {
    task.train
        .iter()
        .map(|d| {
            let w = fl::local_update(global, d, &task.spec, cfg.learning_rate, cfg.batch_size)?;
            Ok(clamp(w, cfg.codec.bound))
        })
        .collect()
}

fn contributor_stats(t: &RoundTranscript) -> ContributorStats {
    let sizes: Vec<usize> = t
        .consensus()
        .map(|v| v.selections.iter().map(|s| s.contributors.len()).collect())
        .unwrap_or_default();
    if sizes.is_empty() {
        return ContributorStats {
            min: 0,
            max: 0,
            mean: 0.0,
        };
    }
    ContributorStats {
        min: *sizes.iter().min().expect("non-empty"),
        max: *sizes.iter().max().expect("non-empty"),
        mean: sizes.iter().sum::<usize>() as f64 / sizes.len() as f64,
    }
}

fn quantization_error(t: &RoundTranscript) -> f64 {
    let Some(view) = t.consensus() else { return 0.0 };
    if view.status == RoundStatus::Halted {
        return 0.0;
    }
    view.selections
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_aggregatable())
        .map(|(k, s)| {
            let mean = s.contributors.iter().map(|&c| t.claimed_models[c][k]).sum::<f64>()
                / s.contributors.len() as f64;
            (view.global_model[k] - mean).abs()
        })
        .fold(0.0, f64::max)
}

/// Options that do not belong in the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Record wall-clock time per round. Off by default so output is reproducible.
    pub wall_time: bool,
    /// Warnings raised during validation, copied into the summary.
    pub warnings: Vec<String>,
}

/// Runs the experiment, writing `cfg.out` (one line per round) and the summary file.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary, RunError> {
    let mut metrics = Vec::new();
    let summary = simulate(cfg, opts, |m| {
        metrics.push(m.clone());
        Ok(())
    })?;
    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(&cfg.out)?);
    for m in &metrics {
        serde_json::to_writer(&mut out, m).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let path: PathBuf = cfg.summary_path();
    fs::write(
        path,
        serde_json::to_string_pretty(&summary).map_err(std::io::Error::from)? + "\n",
    )?;
    Ok(summary)
}

/// Runs the experiment in memory, calling `sink` after every round.
pub fn simulate(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    mut sink: impl FnMut(&RoundMetrics) -> Result<(), RunError>,
) -> Result<Summary, RunError> {
    let task = build_task(cfg)?;
    let m = task.spec.dimension();
    let group = setup_group(cfg.group_bits, &cfg.seed.to_le_bytes())?;
    let sim_cfg = SimulationConfig {
        n: cfg.n,
        f: cfg.f,
        m,
        group,
        codec: cfg.codec,
        policy: cfg.failure_policy,
        seed: cfg.seed,
        trace: false,
    };
    let adversaries: BTreeMap<usize, AttackStrategy> =
        cfg.adversary_ids().map(|i| (i, cfg.attack.clone())).collect();
    let mut sim = Simulation::new(&sim_cfg, adversaries.clone())?;
    let mut naive_adversaries: BTreeMap<usize, Adversary> = adversaries
        .iter()
        .map(|(&i, s)| (i, Adversary::new(s.clone(), adversary_seed(cfg.seed, i))))
        .collect();
    let silent_in_naive: BTreeSet<usize> = adversaries
        .iter()
        .filter(|(_, s)| matches!(s, AttackStrategy::Silent { stages } if stages.contains(&Stage::Commit)))
        .map(|(&i, _)| i)
        .collect();

    let mut global = vec![0.0; m];
    let mut naive = vec![0.0; m];
    let mut summary = Summary {
        rounds: cfg.rounds,
        n: cfg.n,
        f: cfg.f,
        attack: cfg.attack.clone(),
        adversaries: adversaries.keys().copied().collect(),
        final_loss_brave: f64::NAN,
        final_accuracy_brave: 0.0,
        final_loss_naive: None,
        final_accuracy_naive: None,
        agreement_violations: 0,
        halted_rounds: Vec::new(),
        blames: Vec::new(),
        final_checksum: String::new(),
        warnings: opts.warnings.clone(),
    };
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let trained = train_all(&task, &global, cfg)?;
        let t = sim.run_round(round, &trained, &global)?;
        let view = t
            .consensus()
            .ok_or_else(|| ProtocolError::InvalidConfig("no benign participants".into()))?;
        global = view.global_model.clone();
        let wall_ms = opts.wall_time.then(|| start.elapsed().as_secs_f64() * 1e3);
        let Evaluation { loss, accuracy } = fl::evaluate(&global, &task.test, &task.spec)?;

        let naive_eval = if cfg.baseline {
            let trained = train_all(&task, &naive, cfg)?;
            let models: Vec<Vec<f64>> = trained
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !silent_in_naive.contains(i))
                .map(|(i, w)| match naive_adversaries.get_mut(&i) {
                    Some(a) => clamp(a.claimed_model(&w), cfg.codec.bound),
                    None => w,
                })
                .collect();
            naive = fl::naive_average(&models)?;
            Some(fl::evaluate(&naive, &task.test, &task.spec)?)
        } else {
            None
        };

        let violations = t.agreement_violations();
        summary.agreement_violations += violations;
        if view.status == RoundStatus::Halted {
            summary.halted_rounds.push(round);
        }
        let blamed: Vec<usize> = view.blame.flagged.iter().copied().collect();
        let suspect_pairs: Vec<(usize, usize)> = view.blame.suspect_pairs.iter().copied().collect();
        if !blamed.is_empty() || !suspect_pairs.is_empty() {
            summary.blames.push(BlameEvent {
                round,
                flagged: blamed.clone(),
                suspect_pairs: suspect_pairs.clone(),
            });
        }
        let metrics = RoundMetrics {
            round,
            checksum: model_checksum(&global),
            loss,
            accuracy,
            naive_loss: naive_eval.map(|e| e.loss),
            naive_accuracy: naive_eval.map(|e| e.accuracy),
            status: view.status,
            retried: view.retried,
            contributors: contributor_stats(&t),
            accepted_relations: view.accepted.len(),
            non_aggregatable: view.non_aggregatable(),
            quantization_error: quantization_error(&t),
            revealed_differences: view.revealed_differences,
            blamed,
            suspect_pairs,
            agreement_violations: violations,
            messages: t.message_counts.clone(),
            wall_ms,
        };
        sink(&metrics)?;
        summary.final_loss_brave = loss;
        summary.final_accuracy_brave = accuracy;
        summary.final_loss_naive = metrics.naive_loss;
        summary.final_accuracy_naive = metrics.naive_accuracy;
        summary.final_checksum = metrics.checksum;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_config;
    use brave_core::encoding::CodecParams;
    use serde_json::json;

    fn quick(extra: serde_json::Value) -> ExperimentConfig {
        let mut base = json!({
            "n": 5, "f": 1, "rounds": 3, "group_bits": 48,
            "task": {"kind": "quadratic", "dim": 3, "per_participant": 8},
        });
        base.as_object_mut()
            .unwrap()
            .extend(extra.as_object().unwrap().clone());
        validate_config(base).unwrap().0
    }

    #[test]
    fn checksum_is_sha256_of_le_bytes() {
        // sha256 of the empty string
        assert_eq!(
            model_checksum(&[]),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_ne!(model_checksum(&[0.0]), model_checksum(&[-0.0]));
    }

    #[test]
    fn one_metrics_line_per_round() {
        let mut lines = Vec::new();
        let s = simulate(&quick(json!({})), &RunOptions::default(), |m| {
            lines.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(s.agreement_violations, 0);
        assert!(lines.iter().all(|m| m.status == RoundStatus::Completed && m.wall_ms.is_none()));
        assert!(lines.windows(2).all(|w| w[1].loss <= w[0].loss));
        assert_eq!(lines[0].contributors.min, 3);
        let half_step = 0.5 / CodecParams::default().scale as f64;
        assert!(lines.iter().all(|m| m.quantization_error <= half_step + 1e-12));
        assert!(lines.iter().all(|m| m.revealed_differences > 0));
    }

    #[test]
    fn naive_baseline_tracks_honest_mean() {
        let s = simulate(&quick(json!({"baseline": true})), &RunOptions::default(), |_| Ok(())).unwrap();
        let (b, nv) = (s.final_loss_brave, s.final_loss_naive.unwrap());
        assert!((b - nv).abs() < 0.5, "{b} vs {nv}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]

        #[test]
        fn f_zero_matches_naive_average_each_round(seed in 0u64..1_000, logistic in proptest::bool::ANY) {
            let task = if logistic {
                json!({"kind": "logistic", "dim": 2, "per_participant": 10, "test_size": 5})
            } else {
                json!({"kind": "quadratic", "dim": 3, "per_participant": 8})
            };
            let cfg = quick(json!({"f": 0, "seed": seed, "task": task}));
            let task = build_task(&cfg).unwrap();
            let m = task.spec.dimension();
            let group = setup_group(48, b"f-zero").unwrap();
            let sim_cfg = SimulationConfig {
                n: cfg.n,
                f: 0,
                m,
                group,
                codec: cfg.codec,
                policy: cfg.failure_policy,
                seed,
                trace: false,
            };
            let mut sim = Simulation::new(&sim_cfg, BTreeMap::new()).unwrap();
            let half_step = 0.5 / cfg.codec.scale as f64;
            let mut global = vec![0.0; m];
            for round in 0..3 {
                let trained = train_all(&task, &global, &cfg).unwrap();
                let naive = fl::naive_average(&trained).unwrap();
                let t = sim.run_round(round, &trained, &global).unwrap();
                global = t.consensus().unwrap().global_model.clone();
                for (b, a) in global.iter().zip(&naive) {
                    proptest::prop_assert!((b - a).abs() <= half_step + 1e-12, "{b} vs {a}");
                }
            }
        }
    }

    #[test]
    fn label_flip_only_touches_adversaries() {
        let cfg = quick(json!({"attack": "labelflip", "task": {"kind": "logistic", "dim": 2, "per_participant": 6, "test_size": 4}}));
        let task = build_task(&cfg).unwrap();
        let clean = fl::make_synthetic(cfg.seed, 5, 6, 2, 1.5, 4).unwrap();
        for i in 0..5 {
            let flipped = task.train[i].labels() != clean.train[i].labels();
            assert_eq!(flipped, i == 4, "participant {i}");
        }
    }
}
