//! Mini-batch training with early stopping, k-fold ensembles and evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    ensemble_predict_many, metadata_scale, HecGnn, HecGnnConfig, ModelError, PreparedSample,
};
use crate::sample::GraphSample;
use crate::seed::derive_seed;
use crate::tensor::{mape, Adam};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Shuffled index batches for one epoch; the last batch may be partial.
pub fn mini_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Deterministic partition of `0..n` into `folds` near-equal parts.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "folds")));
    let mut out = vec![Vec::new(); folds];
    for (i, v) in idx.into_iter().enumerate() {
        out[i % folds].push(v);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mape: f64,
    pub val_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub fold: Option<usize>,
    pub history: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mape: Option<f64>,
    pub test_mape: Option<f64>,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn final_val_mape(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.val_mape)
    }

    /// Per-epoch CSV. Wall-clock time is left out so that reports of equal
    /// runs are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mape,val_mape\n");
        for e in &self.history {
            let val = e.val_mape.map_or(String::new(), |v| format!("{v:?}"));
            let _ = writeln!(out, "{},{:?},{val}", e.epoch, e.train_mape);
        }
        out
    }
}

/// Names of the samples that reached a gradient or model selection step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleAudit {
    pub gradient: BTreeSet<String>,
    pub selection: BTreeSet<String>,
}

fn prepare_all(model: &HecGnn, samples: &[GraphSample]) -> Result<Vec<PreparedSample>, TrainError> {
    Ok(samples
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<_, _>>()?)
}

fn prepared_mape(model: &HecGnn, samples: &[PreparedSample]) -> Result<f64, TrainError> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let pred = model.predict_prepared(&refs)?;
    let truth: Vec<f64> = samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| ModelError::MissingLabel(s.name.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(mape(&pred, &truth))
}

/// Trains one model. With a nonempty `val` the parameters of the epoch with
/// the lowest validation MAPE are returned and training stops after
/// `config.patience` epochs without improvement.
pub fn train_single(
    train: &[GraphSample],
    val: &[GraphSample],
    config: &HecGnnConfig,
    seed: u64,
) -> Result<(HecGnn, TrainReport, SampleAudit), TrainError> {
    if train.is_empty() {
        return Err(TrainError::TooFewSamples { needed: 1, got: 0 });
    }
    let start = Instant::now();
    let mut model = HecGnn::new(config.clone(), derive_seed(seed, "init"))?;
    model.meta_scale = metadata_scale(train);
    let train_p = prepare_all(&model, train)?;
    let val_p = prepare_all(&model, val)?;
    let mut audit = SampleAudit::default();
    audit.selection.extend(val.iter().map(|s| s.name.clone()));

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout"));
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.params.clone());

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for batch in mini_batches(train_p.len(), config.batch_size, &mut shuffle_rng) {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &train_p[i]).collect();
            if epoch == 1 {
                audit.gradient.extend(refs.iter().map(|p| p.name.clone()));
            }
            let (loss, grads) = model.loss_and_grads(&refs, Some(&mut dropout_rng))?;
            adam.step(model.params.tensors_mut(), &grads)
                .map_err(ModelError::from)?;
            loss_sum += loss * refs.len() as f64;
        }
        let train_mape = loss_sum / train_p.len() as f64;
        let val_mape = if val_p.is_empty() {
            None
        } else {
            Some(prepared_mape(&model, &val_p)?)
        };
        history.push(EpochLog {
            epoch,
            train_mape,
            val_mape,
        });
        if let Some(v) = val_mape {
            if v < best.1 {
                best = (epoch, v, model.params.clone());
            } else if epoch - best.0 >= config.patience {
                log::debug!("seed {seed}: early stop at epoch {epoch}, best {}", best.0);
                break;
            }
        }
        if epoch % 100 == 0 {
            log::debug!("seed {seed} epoch {epoch}: train {train_mape:.4} val {val_mape:?}");
        }
    }

    let (best_epoch, best_val) = if val_p.is_empty() {
        (history.len(), None)
    } else {
        model.params = best.2;
        (best.0, Some(best.1))
    };
    let report = TrainReport {
        seed,
        fold: None,
        history,
        best_epoch,
        best_val_mape: best_val,
        test_mape: None,
        wall_clock: start.elapsed(),
    };
    Ok((model, report, audit))
}

/// Single-model training with a seeded `holdout` fraction of the training
/// samples as validation set.
pub fn train_holdout(
    samples: &[GraphSample],
    holdout: f64,
    config: &HecGnnConfig,
    seed: u64,
) -> Result<(HecGnn, TrainReport, SampleAudit), TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout")));
    let n_val = ((samples.len() as f64 * holdout).round() as usize).clamp(1, samples.len() - 1);
    let val: Vec<GraphSample> = idx[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let train: Vec<GraphSample> = idx[n_val..].iter().map(|&i| samples[i].clone()).collect();
    train_single(&train, &val, config, seed)
}

/// One trained ensemble member and its provenance.
#[derive(Debug, Clone)]
pub struct Member {
    pub seed: u64,
    pub fold: usize,
    pub model: HecGnn,
    pub report: TrainReport,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub audit: SampleAudit,
}

/// Trains `folds` members per seed, each validated on its held-out fold.
/// Members are independent and trained on all available cores.
pub fn train_ensemble(
    train: &[GraphSample],
    config: &HecGnnConfig,
    seeds: &[u64],
    folds: usize,
) -> Result<Vec<Member>, TrainError> {
    if folds < 2 || train.len() < folds {
        return Err(TrainError::TooFewSamples {
            needed: folds.max(2),
            got: train.len(),
        });
    }
    let mut jobs = Vec::new();
    for &seed in seeds {
        let parts = fold_partition(train.len(), folds, seed);
        for (fold, val_idx) in parts.iter().enumerate() {
            let train_idx: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != fold)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            jobs.push((seed, fold, train_idx, val_idx.clone()));
        }
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, usize::from)
        .min(jobs.len())
        .max(1);
    let run = |(seed, fold, train_idx, val_idx): (u64, usize, Vec<usize>, Vec<usize>)| {
        let t: Vec<GraphSample> = train_idx.iter().map(|&i| train[i].clone()).collect();
        let v: Vec<GraphSample> = val_idx.iter().map(|&i| train[i].clone()).collect();
        let member_seed = derive_seed(seed, &format!("fold{fold}"));
        let (model, mut report, audit) = train_single(&t, &v, config, member_seed)?;
        report.seed = seed;
        report.fold = Some(fold);
        log::info!(
            "member seed={seed} fold={fold}: best epoch {} val {:?}",
            report.best_epoch,
            report.best_val_mape
        );
        Ok::<_, TrainError>(Member {
            seed,
            fold,
            model,
            report,
            train_indices: train_idx,
            val_indices: val_idx,
            audit,
        })
    };
    if workers == 1 {
        return jobs.into_iter().map(run).collect();
    }
    let mut slots: Vec<Option<Result<Member, TrainError>>> =
        (0..jobs.len()).map(|_| None).collect();
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate());
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue").next();
                let Some((i, job)) = next else { break };
                let result = run(job);
                done.lock().expect("slots")[i] = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

/// Ensemble MAPE on `test`, as a fraction.
pub fn evaluate(members: &[HecGnn], test: &[GraphSample]) -> Result<f64, TrainError> {
    if test.is_empty() {
        return Err(TrainError::Empty);
    }
    let pred = ensemble_predict_many(test, members)?;
    let truth: Vec<f64> = test
        .iter()
        .map(|s| {
            s.watts()
                .ok_or_else(|| ModelError::MissingLabel(s.name.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(mape(&pred, &truth))
}

/// MAPE of a single model on `test`, as a fraction.
pub fn evaluate_single(model: &HecGnn, test: &[GraphSample]) -> Result<f64, TrainError> {
    evaluate(std::slice::from_ref(model), test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::sample::{PowerKind, PowerLabel};
    use crate::synth::gen_dataset;

    fn tiny_config(dim: usize) -> HecGnnConfig {
        HecGnnConfig {
            input_dim: dim,
            num_layers: 1,
            hidden: 6,
            metadata_dim: 4,
            head_hidden: 4,
            epochs: 15,
            patience: 5,
            batch_size: 8,
            lr: 0.01,
            ..Default::default()
        }
    }

    fn samples(n: usize) -> Vec<GraphSample> {
        let records = gen_dataset(n, 3, PowerKind::Dynamic).unwrap();
        Dataset::from_records(&records, PowerKind::Dynamic)
            .samples()
            .cloned()
            .collect()
    }

    #[test]
    fn batching() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mini_batches(128, 128, &mut rng).len(), 1);
        let b = mini_batches(130, 128, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 2]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    #[test]
    fn folds_partition_indices() {
        let parts = fold_partition(23, 10, 4);
        assert_eq!(parts.len(), 10);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| (2..=3).contains(&p.len())));
        assert_eq!(parts, fold_partition(23, 10, 4));
    }

    #[test]
    fn evaluate_matches_hand_mape() {
        let cfg = tiny_config(1);
        let mut m = HecGnn::from_params(
            HecGnnConfig {
                use_metadata: false,
                ..cfg.clone()
            },
            crate::model::ModelParams::zeros(&HecGnnConfig {
                use_metadata: false,
                ..cfg
            }),
        )
        .unwrap();
        m.params.get_mut("head2_b").unwrap().data_mut()[0] = 1.1;
        let mk = |w: f64| GraphSample {
            name: format!("{w}"),
            node_features: vec![0.0],
            feature_dim: 1,
            edges: vec![],
            metadata: None,
            label: Some(PowerLabel {
                watts: w,
                kind: PowerKind::Dynamic,
            }),
        };
        assert!((evaluate_single(&m, &[mk(1.0)]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(evaluate_single(&m, &[mk(1.1)]).unwrap(), 0.0);
        let three = [mk(1.0), mk(2.0), mk(0.5)];
        let hand = (0.1 / 1.0 + 0.9 / 2.0 + 0.6 / 0.5) / 3.0;
        assert!((evaluate_single(&m, &three).unwrap() - hand).abs() < 1e-12);
        assert!(matches!(evaluate_single(&m, &[]), Err(TrainError::Empty)));
    }

    #[test]
    fn single_training_keeps_best_checkpoint() {
        let s = samples(30);
        let cfg = tiny_config(s[0].feature_dim);
        let (model, report, _) = train_holdout(&s, 0.2, &cfg, 7).unwrap();
        let best = report.best_val_mape.unwrap();
        assert!(best <= report.final_val_mape().unwrap());
        let val_at_best = report.history[report.best_epoch - 1].val_mape.unwrap();
        assert_eq!(best, val_at_best);
        let (again, report2, _) = train_holdout(&s, 0.2, &cfg, 7).unwrap();
        assert_eq!(model.to_checkpoint(), again.to_checkpoint());
        assert_eq!(report.to_csv(), report2.to_csv());
    }

    #[test]
    fn ensemble_members_and_provenance() {
        let s = samples(20);
        let cfg = HecGnnConfig {
            epochs: 2,
            ..tiny_config(s[0].feature_dim)
        };
        let members = train_ensemble(&s, &cfg, &DEFAULT_SEEDS, DEFAULT_FOLDS).unwrap();
        assert_eq!(members.len(), 30);
        for m in &members {
            let t: BTreeSet<_> = m.train_indices.iter().collect();
            assert!(m.val_indices.iter().all(|v| !t.contains(v)));
            assert_eq!(m.train_indices.len() + m.val_indices.len(), s.len());
            assert!(m.audit.gradient.is_disjoint(&m.audit.selection));
        }
        for seed in DEFAULT_SEEDS {
            let mut covered: Vec<usize> = members
                .iter()
                .filter(|m| m.seed == seed)
                .flat_map(|m| m.val_indices.iter().copied())
                .collect();
            covered.sort_unstable();
            assert_eq!(covered, (0..s.len()).collect::<Vec<_>>());
        }
        assert!(matches!(
            train_ensemble(&s[..5], &cfg, &[0], 10),
            Err(TrainError::TooFewSamples { .. })
        ));
    }
}
