//! Offline ranking AUC on logged dialogues and online metrics against the
//! simulator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;

use crate::corpus::{ChoiceSets, Corpus, History, Utterance};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::learner::QPolicy;
use crate::qfunction::{PolicyParams, StateScorer};
use crate::rng::{self, Rng};
use crate::simulator::{Simulator, UserProfile};

/// Distractors ranked against each ground-truth reply.
pub const DISTRACTORS: usize = 10;

/// The trained output of a method: one parameter set for everyone, or one
/// per target user.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySet {
    Single(PolicyParams),
    PerUser(BTreeMap<String, PolicyParams>),
}

impl PolicySet {
    pub fn for_user(&self, user_id: &str) -> Result<&PolicyParams> {
        match self {
            PolicySet::Single(p) => Ok(p),
            PolicySet::PerUser(m) => m
                .get(user_id)
                .ok_or_else(|| Error::Validation(format!("no policy for user `{user_id}`"))),
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            PolicySet::Single(p) => p.checksum(),
            PolicySet::PerUser(m) => m.iter().map(|(u, p)| format!("{u}:{}", p.checksum())).collect::<Vec<_>>().join(","),
        }
    }
}

/// `(#distractors scoring strictly lower + 0.5 · #ties) / #distractors`.
pub fn auc_from_scores(truth: f64, distractors: &[f64]) -> f64 {
    let credit: f64 = distractors
        .iter()
        .map(|&d| {
            if d < truth {
                1.0
            } else if d == truth {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    credit / distractors.len() as f64
}

/// AUC of the ground-truth reply against exactly [`DISTRACTORS`] others.
pub fn auc_turn(
    theta: &PolicyParams,
    user_id: &str,
    history: &History,
    truth: &Utterance,
    distractors: &[Utterance],
    choices: &ChoiceSets,
) -> Result<f64> {
    if distractors.len() != DISTRACTORS {
        return Err(Error::Validation(format!(
            "need {DISTRACTORS} distractors, got {}",
            distractors.len()
        )));
    }
    let scorer = StateScorer::new(history, theta, user_id, choices)?;
    let t = scorer.score(truth)?;
    let d = distractors.iter().map(|a| scorer.score(a)).collect::<Result<Vec<_>>>()?;
    Ok(auc_from_scores(t, &d))
}

/// Draws [`DISTRACTORS`] pool entries without replacement, skipping the
/// ground truth's own slot `exclude`. Surface duplicates stay in.
pub fn sample_distractors<'p>(pool: &'p [Utterance], exclude: usize, rng: &mut Rng) -> Result<Vec<&'p Utterance>> {
    if pool.len() < DISTRACTORS + 1 {
        return Err(Error::Validation(format!(
            "distractor pool has {} other replies, need {DISTRACTORS}",
            pool.len().saturating_sub(1)
        )));
    }
    Ok(index::sample(rng, pool.len() - 1, DISTRACTORS)
        .into_iter()
        .map(|i| &pool[if i >= exclude { i + 1 } else { i }])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedAuc {
    pub seed: u64,
    /// Mean over each user's dialogues.
    pub per_user: BTreeMap<String, f64>,
    /// `(user, mean per-turn AUC)` in corpus order.
    pub per_dialogue: Vec<(String, f64)>,
    /// Mean over users.
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub seeds: Vec<SeedAuc>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-turn AUC over every dialogue of `corpus`, with distractors resampled
/// at every turn from all agent replies in the corpus. Each seed drives the
/// sampling.
pub fn auc_evaluate(policy: &PolicySet, corpus: &Corpus, seeds: &[u64], exec: Execution) -> Result<AucResult> {
    if seeds.is_empty() {
        return Err(Error::Validation("no evaluation seeds".into()));
    }
    let mut pool = Vec::new();
    let mut offsets = Vec::with_capacity(corpus.dialogues.len());
    for d in &corpus.dialogues {
        offsets.push(pool.len());
        pool.extend(d.turns.iter().map(|t| t.agent.clone()));
    }
    let choices = &corpus.domain.choices;
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..corpus.dialogues.len()).map(move |i| (s, i)))
        .collect();
    let scores = exec.map(&jobs, |&(seed, i)| -> Result<f64> {
        let d = &corpus.dialogues[i];
        let theta = policy.for_user(&d.user_id)?;
        let mut rng = rng::stream(seed, &[rng::label("auc"), i as u64]);
        let mut sum = 0.0;
        for (k, turn) in d.turns.iter().enumerate() {
            let h = d.history_at(k);
            let picks: Vec<Utterance> = sample_distractors(&pool, offsets[i] + k, &mut rng)?
                .into_iter()
                .cloned()
                .collect();
            sum += auc_turn(theta, &d.user_id, &h, &turn.agent, &picks, choices)?;
        }
        Ok(sum / d.turns.len() as f64)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;

    let n = corpus.dialogues.len();
    let per_seed: Vec<SeedAuc> = seeds
        .iter()
        .enumerate()
        .map(|(k, &seed)| {
            let per_dialogue: Vec<(String, f64)> = corpus
                .dialogues
                .iter()
                .zip(&scores[k * n..(k + 1) * n])
                .map(|(d, &s)| (d.user_id.clone(), s))
                .collect();
            let mut by_user: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (u, s) in &per_dialogue {
                by_user.entry(u.clone()).or_default().push(*s);
            }
            let per_user: BTreeMap<String, f64> = by_user.into_iter().map(|(u, v)| (u, mean_std(&v).0)).collect();
            let overall = mean_std(&per_user.values().copied().collect::<Vec<_>>()).0;
            SeedAuc {
                seed,
                per_user,
                per_dialogue,
                overall,
            }
        })
        .collect();
    Ok(AucResult::from_seeds(per_seed))
}

impl AucResult {
    /// Mean and standard deviation of the per-seed overall values.
    pub fn from_seeds(seeds: Vec<SeedAuc>) -> Self {
        let (mean, std) = mean_std(&seeds.iter().map(|s| s.overall).collect::<Vec<_>>());
        AucResult { seeds, mean, std }
    }
}

/// Aggregate online metrics for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineMetrics {
    pub reward: f64,
    pub success_rate: f64,
    /// Agent turns.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineResult {
    pub seeds: Vec<(u64, OnlineMetrics)>,
    pub mean: OnlineMetrics,
    pub std: OnlineMetrics,
}

/// Greedy (η = 0) episodes against every profile, `n_per_user` each, for
/// every seed. Episode `(seed, user, k)` has its own rng stream.
pub fn online_evaluate(
    policy: &PolicySet,
    sim: &Simulator,
    profiles: &[UserProfile],
    n_per_user: usize,
    seeds: &[u64],
    exec: Execution,
) -> Result<OnlineResult> {
    if seeds.is_empty() || profiles.is_empty() || n_per_user == 0 {
        return Err(Error::Validation("online evaluation needs seeds, users and episodes".into()));
    }
    let mut sorted: Vec<&UserProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let jobs: Vec<(u64, usize, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..sorted.len()).flat_map(move |u| (0..n_per_user).map(move |k| (s, u, k))))
        .collect();
    let logs = exec.map(&jobs, |&(seed, u, k)| -> Result<(f64, bool, usize)> {
        let profile = sorted[u];
        let theta = policy.for_user(&profile.user_id)?;
        let mut rng = rng::stream(seed, &[rng::label("online"), rng::label(&profile.user_id), k as u64]);
        let mut agent = QPolicy {
            theta,
            choices: sim.choices(),
            eta: 0.0,
        };
        let log = sim.run_episode(&mut agent, profile, &mut rng)?;
        Ok((log.total_reward, log.success, log.length))
    });
    let logs = logs.into_iter().collect::<Result<Vec<_>>>()?;
    let per = sorted.len() * n_per_user;
    let seed_metrics: Vec<(u64, OnlineMetrics)> = seeds
        .iter()
        .enumerate()
        .map(|(k, &seed)| {
            let chunk = &logs[k * per..(k + 1) * per];
            let n = chunk.len() as f64;
            (
                seed,
                OnlineMetrics {
                    reward: chunk.iter().map(|l| l.0).sum::<f64>() / n,
                    success_rate: chunk.iter().filter(|l| l.1).count() as f64 / n,
                    length: chunk.iter().map(|l| l.2 as f64).sum::<f64>() / n,
                },
            )
        })
        .collect();
    Ok(OnlineResult::from_seeds(seed_metrics))
}

impl OnlineResult {
    pub fn from_seeds(seeds: Vec<(u64, OnlineMetrics)>) -> Self {
        let col = |f: fn(&OnlineMetrics) -> f64| mean_std(&seeds.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
        let (r, rs) = col(|m| m.reward);
        let (s, ss) = col(|m| m.success_rate);
        let (l, ls) = col(|m| m.length);
        OnlineResult {
            seeds,
            mean: OnlineMetrics {
                reward: r,
                success_rate: s,
                length: l,
            },
            std: OnlineMetrics {
                reward: rs,
                success_rate: ss,
                length: ls,
            },
        }
    }
}

/// Writes `auc.csv` (baseline, seed, user, mean_auc) and `online.csv`
/// (baseline, seed, metric, value) into `dir`.
pub fn emit_report(auc: &[(String, AucResult)], online: &[(String, OnlineResult)], dir: &Path) -> Result<()> {
    write_auc_report(auc, dir)?;
    write_online_report(online, dir)
}

/// `auc.csv` (one row per seed and user) and `auc_summary.csv` (mean and std
/// over seeds).
pub fn write_auc_report(auc: &[(String, AucResult)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("auc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["baseline", "seed", "user", "mean_auc"])?;
    for (name, res) in auc {
        for s in &res.seeds {
            for (user, v) in &s.per_user {
                w.write_record([name.as_str(), &s.seed.to_string(), user, &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("auc_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["baseline", "mean", "std"])?;
    for (name, res) in auc {
        w.write_record([name.as_str(), &res.mean.to_string(), &res.std.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// `online.csv` (one row per seed and metric) and `online_summary.csv`.
pub fn write_online_report(online: &[(String, OnlineResult)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = |m: &OnlineMetrics| [("reward", m.reward), ("success_rate", m.success_rate), ("length", m.length)];
    let path = dir.join("online.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["baseline", "seed", "metric", "value"])?;
    for (name, res) in online {
        for (seed, m) in &res.seeds {
            for (metric, v) in metrics(m) {
                w.write_record([name.as_str(), &seed.to_string(), metric, &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("online_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["baseline", "metric", "mean", "std"])?;
    for (name, res) in online {
        for ((metric, mean), (_, std)) in metrics(&res.mean).into_iter().zip(metrics(&res.std)) {
            w.write_record([name.as_str(), metric, &mean.to_string(), &std.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
