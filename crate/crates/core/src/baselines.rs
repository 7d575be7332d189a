//! Comparison methods. All of them share the Q-function and learner; they
//! differ in which data they see and where they start.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::{detect_choices, ChoiceSets, Corpus, Dialogue};
use crate::error::{Error, Result};
use crate::evaluation::PolicySet;
use crate::learner::{Anchor, QPolicy, TrainConfig};
use crate::qfunction::{ModelConfig, PolicyParams, PrefScope};
use crate::rng::{self, Rng};
use crate::simulator::{Simulator, UserProfile};
use crate::transfer::{train_phase, train_source_model, transfer_to_target, SourceModel, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaselineKind {
    NoneTl,
    All,
    Sim,
    Bandit,
    PriorSim,
    PriorAll,
    Petal,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::NoneTl,
        BaselineKind::All,
        BaselineKind::Sim,
        BaselineKind::Bandit,
        BaselineKind::PriorSim,
        BaselineKind::PriorAll,
        BaselineKind::Petal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::NoneTl => "none_tl",
            BaselineKind::All => "all",
            BaselineKind::Sim => "sim",
            BaselineKind::Bandit => "bandit",
            BaselineKind::PriorSim => "prior_sim",
            BaselineKind::PriorAll => "prior_all",
            BaselineKind::Petal => "petal",
        }
    }

    /// Whether target users get their own preference vectors.
    pub fn personalized(self) -> bool {
        self == BaselineKind::Petal
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        BaselineKind::ALL
            .into_iter()
            .find(|k| match norm.as_str() {
                "nonetl" => *k == BaselineKind::NoneTl,
                // Unambiguous where `all` means every method.
                "pooled" => *k == BaselineKind::All,
                n => k.name() == n,
            })
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub model: ModelConfig,
    pub source: TrainConfig,
    pub target: TrainConfig,
    /// Strength of the pull toward the prior for the prior baselines.
    pub prior_lambda: f64,
    /// Bandit pulls per target user.
    pub bandit_budget: usize,
    pub seed: u64,
}

/// Source-domain data. Every read is counted, so tests can check which
/// methods never look at it.
pub struct SourceDomain<'a> {
    sim: &'a Simulator,
    profiles: &'a [UserProfile],
    logs: &'a Corpus,
    dialogues: usize,
    reads: Cell<usize>,
}

impl<'a> SourceDomain<'a> {
    /// `dialogues` is the on-policy training budget across all source users;
    /// `logs` are the logged source dialogues used to compare users.
    pub fn new(sim: &'a Simulator, profiles: &'a [UserProfile], logs: &'a Corpus, dialogues: usize) -> Self {
        SourceDomain {
            sim,
            profiles,
            logs,
            dialogues,
            reads: Cell::new(0),
        }
    }

    pub fn profiles(&self) -> &'a [UserProfile] {
        self.reads.set(self.reads.get() + 1);
        self.profiles
    }

    pub fn logs(&self) -> &'a Corpus {
        self.reads.set(self.reads.get() + 1);
        self.logs
    }

    pub fn dialogues(&self) -> usize {
        self.dialogues
    }

    pub fn sim(&self) -> &'a Simulator {
        self.sim
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

pub struct TargetDomain<'a> {
    pub sim: &'a Simulator,
    pub profiles: &'a [UserProfile],
    /// Logged dialogues of the target users. Methods that compare users
    /// always read them; they are also the training data unless `episodes`
    /// is set.
    pub logs: &'a Corpus,
    /// On-policy training dialogues per target user, replacing the logs as
    /// training data.
    pub episodes: Option<usize>,
}

impl TargetDomain<'_> {
    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.profiles.iter().map(|p| p.user_id.clone()).collect();
        u.sort();
        u
    }

    pub fn dialogues(&self) -> Vec<&Dialogue> {
        self.logs.dialogues.iter().collect()
    }

    pub fn dialogues_of(&self, user_id: &str) -> Vec<&Dialogue> {
        self.logs.dialogues.iter().filter(|d| d.user_id == user_id).collect()
    }

    fn profile(&self, user_id: &str) -> Result<&UserProfile> {
        self.profiles
            .iter()
            .find(|p| p.user_id == user_id)
            .ok_or_else(|| Error::Validation(format!("unknown target user `{user_id}`")))
    }
}

/// Concatenated per-set value histograms of the orders agreed in `dialogues`,
/// each set normalized to sum to one (all zeros when nothing was agreed).
pub fn choice_profile<'d, I: IntoIterator<Item = &'d Dialogue>>(dialogues: I, choices: &ChoiceSets) -> Vec<f64> {
    let offsets: Vec<usize> = (0..choices.len())
        .scan(0, |acc, j| {
            let o = *acc;
            *acc += choices.cardinality(j);
            Some(o)
        })
        .collect();
    let total: usize = (0..choices.len()).map(|j| choices.cardinality(j)).sum();
    let mut h = vec![0.0; total];
    for d in dialogues {
        let users: Vec<_> = d.turns.iter().map(|t| t.user.clone()).collect();
        for (j, v) in detect_choices(&users, choices).iter().enumerate() {
            if let Some(v) = v {
                h[offsets[j] + v] += 1.0;
            }
        }
    }
    for j in 0..choices.len() {
        let block = &mut h[offsets[j]..offsets[j] + choices.cardinality(j)];
        let s: f64 = block.iter().sum();
        if s > 0.0 {
            block.iter_mut().for_each(|x| *x /= s);
        }
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The candidate with the highest similarity; ties go to the lowest id.
pub fn most_similar(target: &[f64], candidates: &BTreeMap<String, Vec<f64>>) -> Option<String> {
    let mut best: Option<(&String, f64)> = None;
    for (id, h) in candidates {
        let s = cosine(target, h);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.map(|(id, _)| id.clone())
}

/// UCB1 with exploration constant `c`: every arm once, then the arm
/// maximizing `mean + c·sqrt(ln t / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ucb1 {
    pub c: f64,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl Ucb1 {
    pub fn new(arms: usize, c: f64) -> Self {
        Ucb1 {
            c,
            counts: vec![0; arms],
            sums: vec![0.0; arms],
        }
    }

    pub fn select(&self) -> usize {
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return i;
        }
        let t: u64 = self.counts.iter().sum();
        let ucb = (0..self.counts.len()).map(|i| {
            let n = self.counts[i] as f64;
            self.sums[i] / n + self.c * ((t as f64).ln() / n).sqrt()
        });
        crate::qfunction::argmax_first(ucb).unwrap_or(0)
    }

    pub fn update(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.sums[arm] += reward;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn means(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.sums)
            .map(|(&n, &s)| if n == 0 { f64::NEG_INFINITY } else { s / n as f64 })
            .collect()
    }

    /// Arm with the best empirical mean; ties go to the lowest index.
    pub fn best(&self) -> usize {
        crate::qfunction::argmax_first(self.means()).unwrap_or(0)
    }
}

/// Source-side training shared between methods, computed on first use.
/// Each entry has its own seed stream, so results do not depend on which
/// method asked first.
#[derive(Debug, Default)]
pub struct SourceModels {
    petal: Option<SourceModel>,
    all: Option<SourceModel>,
    per_user: Option<BTreeMap<String, PolicyParams>>,
}

impl SourceModels {
    pub fn with_petal(mut self, m: SourceModel) -> Self {
        self.petal = Some(m);
        self
    }

    pub fn with_all(mut self, m: SourceModel) -> Self {
        self.all = Some(m);
        self
    }

    pub fn with_per_user(mut self, m: BTreeMap<String, PolicyParams>) -> Self {
        self.per_user = Some(m);
        self
    }

    pub fn stored_petal(&self) -> Option<&SourceModel> {
        self.petal.as_ref()
    }

    pub fn stored_all(&self) -> Option<&SourceModel> {
        self.all.as_ref()
    }

    pub fn stored_per_user(&self) -> Option<&BTreeMap<String, PolicyParams>> {
        self.per_user.as_ref()
    }

    /// Per-user preferences over all source users.
    pub fn petal(&mut self, cfg: &BaselineConfig, src: &SourceDomain<'_>) -> Result<&SourceModel> {
        if self.petal.is_none() {
            self.petal = Some(train_pooled(cfg, src, PrefScope::PerUser, "petal-source")?);
        }
        Ok(self.petal.as_ref().expect("just set"))
    }

    /// One shared preference vector over all source users.
    pub fn all(&mut self, cfg: &BaselineConfig, src: &SourceDomain<'_>) -> Result<&SourceModel> {
        if self.all.is_none() {
            self.all = Some(train_pooled(cfg, src, PrefScope::Shared, "all-source")?);
        }
        Ok(self.all.as_ref().expect("just set"))
    }

    /// One policy per source user, each trained on that user's share of the
    /// budget.
    pub fn per_user(&mut self, cfg: &BaselineConfig, src: &SourceDomain<'_>) -> Result<&BTreeMap<String, PolicyParams>> {
        if self.per_user.is_none() {
            let profiles = src.profiles();
            if profiles.is_empty() {
                return Err(Error::Validation("source data is empty".into()));
            }
            let share = per_user_share(src) as usize;
            let mut out = BTreeMap::new();
            for p in profiles {
                let mut r = rng::stream(cfg.seed, &[rng::label("source-user"), rng::label(&p.user_id)]);
                let data = TrainData::Simulated {
                    sim: src.sim(),
                    profiles: std::slice::from_ref(p),
                    dialogues: share,
                };
                let m = train_source_model(data, src.sim().choices(), init(cfg, src.sim(), PrefScope::Shared)?, &cfg.source, &mut r)?;
                out.insert(p.user_id.clone(), m.params);
            }
            self.per_user = Some(out);
        }
        Ok(self.per_user.as_ref().expect("just set"))
    }
}

/// Dialogues each per-user source policy trains on.
fn per_user_share(src: &SourceDomain<'_>) -> u64 {
    (src.dialogues() / src.profiles().len().max(1)).max(1) as u64
}

/// Common initialization; identical across methods up to the preference scope.
pub fn init(cfg: &BaselineConfig, sim: &Simulator, scope: PrefScope) -> Result<PolicyParams> {
    PolicyParams::init(sim.domain.vocab.len(), &cfg.model, scope, &mut rng::stream(cfg.seed, &[rng::label("init")]))
}

fn train_pooled(cfg: &BaselineConfig, src: &SourceDomain<'_>, scope: PrefScope, stream: &str) -> Result<SourceModel> {
    let mut r = rng::stream(cfg.seed, &[rng::label(stream)]);
    let data = TrainData::Simulated {
        sim: src.sim(),
        profiles: src.profiles(),
        dialogues: src.dialogues(),
    };
    train_source_model(data, src.sim().choices(), init(cfg, src.sim(), scope)?, &cfg.source, &mut r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub kind: BaselineKind,
    pub policy: PolicySet,
    /// Which source user each target was matched to, for the methods that
    /// pick one.
    pub selections: BTreeMap<String, String>,
}

fn target_cfg(cfg: &BaselineConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        ..cfg.target
    }
}

/// Fine-tunes `start` on one target user's data, or on every target user's
/// when `user` is `None`. `beta` is how many dialogues `start` has seen.
fn adapt(
    cfg: &BaselineConfig,
    tgt: &TargetDomain<'_>,
    start: &PolicyParams,
    user: Option<&str>,
    prior: bool,
    beta: u64,
) -> Result<PolicyParams> {
    let mut theta = start.clone();
    let anchor = prior.then(|| Anchor {
        params: start.clone(),
        lambda: cfg.prior_lambda,
    });
    let mut beta = beta;
    let mut r = rng::stream(cfg.seed, &[rng::label("adapt"), rng::label(user.unwrap_or("*"))]);
    let logged: Vec<&Dialogue> = match user {
        Some(u) => tgt.dialogues_of(u),
        None => tgt.dialogues(),
    };
    let profiles: Vec<UserProfile> = match user {
        Some(u) => vec![tgt.profile(u)?.clone()],
        None => tgt.profiles.to_vec(),
    };
    let data = match tgt.episodes {
        Some(n) => TrainData::Simulated {
            sim: tgt.sim,
            profiles: &profiles,
            dialogues: n * profiles.len(),
        },
        None => TrainData::Logged(&logged),
    };
    train_phase(data, tgt.sim.choices(), &mut theta, &target_cfg(cfg), anchor.as_ref(), &mut beta, &mut r)?;
    Ok(theta)
}

/// Source user whose logged choices look most like each target user's.
pub fn similar_source_users(src: &SourceDomain<'_>, tgt: &TargetDomain<'_>) -> BTreeMap<String, String> {
    let choices = tgt.sim.choices();
    let logs = src.logs();
    let mut source: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for u in logs.user_ids() {
        source.insert(u.clone(), choice_profile(logs.dialogues_for(&u), choices));
    }
    tgt.users()
        .into_iter()
        .filter_map(|t| {
            let h = choice_profile(tgt.logs.dialogues_for(&t), choices);
            most_similar(&h, &source).map(|s| (t, s))
        })
        .collect()
}

/// UCB1 over the per-source-user policies; each pull is one greedy episode
/// with the target's simulated user. Returns the arm with the best mean.
pub fn bandit_select(
    arms: &BTreeMap<String, PolicyParams>,
    sim: &Simulator,
    profile: &UserProfile,
    budget: usize,
    rng: &mut Rng,
) -> Result<(String, Ucb1)> {
    let names: Vec<&String> = arms.keys().collect();
    if names.is_empty() {
        return Err(Error::Validation("no source policies to choose from".into()));
    }
    let mut ucb = Ucb1::new(names.len(), std::f64::consts::SQRT_2);
    for _ in 0..budget {
        let i = ucb.select();
        let mut agent = QPolicy {
            theta: &arms[names[i]],
            choices: sim.choices(),
            eta: 0.0,
        };
        let log = sim.run_episode(&mut agent, profile, rng)?;
        ucb.update(i, log.total_reward);
    }
    Ok((names[ucb.best()].clone(), ucb))
}

/// Trains one method end to end.
pub fn train_baseline(
    kind: BaselineKind,
    cfg: &BaselineConfig,
    src: &SourceDomain<'_>,
    tgt: &TargetDomain<'_>,
    models: &mut SourceModels,
) -> Result<Trained> {
    let mut selections = BTreeMap::new();
    let policy = match kind {
        BaselineKind::NoneTl => {
            let start = init(cfg, tgt.sim, PrefScope::Shared)?;
            PolicySet::Single(adapt(cfg, tgt, &start, None, false, 0)?)
        }
        BaselineKind::All => PolicySet::Single(models.all(cfg, src)?.params.clone()),
        BaselineKind::PriorAll => {
            let all = models.all(cfg, src)?;
            let (start, beta) = (all.params.clone(), all.beta);
            PolicySet::Single(adapt(cfg, tgt, &start, None, true, beta)?)
        }
        BaselineKind::Sim | BaselineKind::PriorSim => {
            let matches = similar_source_users(src, tgt);
            let share = per_user_share(src);
            let arms = models.per_user(cfg, src)?;
            let mut out = BTreeMap::new();
            for (t, s) in matches {
                let start = arms
                    .get(&s)
                    .ok_or_else(|| Error::Validation(format!("no policy for source user `{s}`")))?;
                let theta = adapt(cfg, tgt, start, Some(&t), kind == BaselineKind::PriorSim, share)?;
                out.insert(t.clone(), theta);
                selections.insert(t, s);
            }
            PolicySet::PerUser(out)
        }
        BaselineKind::Bandit => {
            let share = per_user_share(src);
            let arms = models.per_user(cfg, src)?;
            let mut out = BTreeMap::new();
            for t in tgt.users() {
                let mut r = rng::stream(cfg.seed, &[rng::label("bandit"), rng::label(&t)]);
                let (s, _) = bandit_select(arms, tgt.sim, tgt.profile(&t)?, cfg.bandit_budget, &mut r)?;
                let theta = adapt(cfg, tgt, &arms[&s], Some(&t), false, share)?;
                out.insert(t.clone(), theta);
                selections.insert(t, s);
            }
            PolicySet::PerUser(out)
        }
        BaselineKind::Petal => {
            let source = models.petal(cfg, src)?;
            let mut r = rng::stream(cfg.seed, &[rng::label("petal-target")]);
            let profiles = tgt.profiles.to_vec();
            let logged = tgt.dialogues();
            let data = match tgt.episodes {
                Some(n) => TrainData::Simulated {
                    sim: tgt.sim,
                    profiles: &profiles,
                    dialogues: n * profiles.len(),
                },
                None => TrainData::Logged(&logged),
            };
            let (theta, _) = transfer_to_target(data, source, tgt.sim.choices(), &target_cfg(cfg), &mut r)?;
            PolicySet::Single(theta)
        }
    };
    Ok(Trained {
        kind,
        policy,
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::sgd_calls;
    use crate::simulator::{generate_offline_corpus, BaristaMix, SimConfig};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng as _;

    struct World {
        sim: Simulator,
        src: Vec<UserProfile>,
        tgt: Vec<UserProfile>,
        src_logs: Corpus,
        tgt_logs: Corpus,
    }

    fn world() -> World {
        let base = Simulator::coffee(SimConfig::default()).unwrap();
        let ch = base.choices();
        let src = vec![
            UserProfile::new("s00", Some(vec![0, 0, 0, 0]), 0.8, ch).unwrap(),
            UserProfile::new("s01", Some(vec![3, 1, 2, 3]), 0.8, ch).unwrap(),
            UserProfile::new("s02", None, 0.8, ch).unwrap(),
        ];
        let tgt = vec![
            UserProfile::new("t00", Some(vec![3, 1, 2, 2]), 0.8, ch).unwrap(),
            UserProfile::new("t01", Some(vec![0, 0, 1, 0]), 0.8, ch).unwrap(),
        ];
        let all: Vec<UserProfile> = src.iter().chain(&tgt).cloned().collect();
        let sim = base.with_profiles(&all);
        let src_logs = generate_offline_corpus(&sim, &src, BaristaMix::default(), 30, &mut rng::stream(1, &[])).unwrap();
        let tgt_logs = generate_offline_corpus(&sim, &tgt, BaristaMix::default(), 10, &mut rng::stream(2, &[])).unwrap();
        World {
            sim,
            src,
            tgt,
            src_logs,
            tgt_logs,
        }
    }

    fn cfg() -> BaselineConfig {
        let train = TrainConfig {
            alpha: 1e-3,
            alpha_weight: 1e-3,
            alpha_personal: 0.1,
            epochs: 2,
            ..TrainConfig::default()
        };
        BaselineConfig {
            model: ModelConfig {
                dim: 4,
                ..ModelConfig::default()
            },
            source: train,
            target: train,
            prior_lambda: 0.01,
            bandit_budget: 12,
            seed: 3,
        }
    }

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert_eq!("NoneTL".parse::<BaselineKind>().unwrap(), BaselineKind::NoneTl);
        assert_eq!("prior-all".parse::<BaselineKind>().unwrap(), BaselineKind::PriorAll);
        assert_eq!("pooled".parse::<BaselineKind>().unwrap(), BaselineKind::All);
        assert!("nope".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn similarity_picks_identical_and_breaks_ties_low() {
        let mut c = BTreeMap::new();
        c.insert("b".to_string(), vec![1.0, 0.0]);
        c.insert("a".to_string(), vec![1.0, 0.0]);
        c.insert("c".to_string(), vec![0.0, 1.0]);
        assert_eq!(most_similar(&[1.0, 0.0], &c).unwrap(), "a");
        assert_eq!(most_similar(&[0.0, 2.0], &c).unwrap(), "c");
        assert_eq!(most_similar(&[0.0, 0.0], &c).unwrap(), "a");
        assert!(most_similar(&[1.0], &BTreeMap::new()).is_none());
    }

    #[test]
    fn target_matching_a_source_user_selects_them() {
        let w = world();
        let src = SourceDomain::new(&w.sim, &w.src, &w.src_logs, 30);
        let clone_logs = Corpus::new(
            w.src_logs.domain.clone(),
            w.src_logs
                .dialogues_for("s01")
                .map(|d| Dialogue {
                    user_id: "t00".into(),
                    ..d.clone()
                })
                .collect(),
        )
        .unwrap();
        let tgt = TargetDomain {
            sim: &w.sim,
            profiles: &w.tgt[..1],
            logs: &clone_logs,
            episodes: None,
        };
        assert_eq!(similar_source_users(&src, &tgt)["t00"], "s01");
    }

    #[test]
    fn choice_profile_is_normalized_per_set() {
        let w = world();
        let ch = w.sim.choices();
        let h = choice_profile(w.tgt_logs.dialogues_for("t00"), ch);
        let mut off = 0;
        for j in 0..ch.len() {
            let s: f64 = h[off..off + ch.cardinality(j)].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            off += ch.cardinality(j);
        }
        assert!(choice_profile(std::iter::empty(), ch).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ucb_finds_the_clearly_better_arm() {
        let mut r = rng::stream(9, &[]);
        let mut hits = 0;
        let trials = 50;
        for _ in 0..trials {
            let mut ucb = Ucb1::new(3, std::f64::consts::SQRT_2);
            let means = [0.0, 1.5, 0.2];
            for _ in 0..200 {
                let a = ucb.select();
                let noise: f64 = r.random_range(-0.5..0.5);
                ucb.update(a, means[a] + noise);
            }
            let frac = ucb.counts()[1] as f64 / 200.0;
            assert_eq!(ucb.best(), 1);
            if frac > 0.9 {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 > 0.9, "{hits}");
    }

    #[test]
    fn single_arm_bandit() {
        let w = world();
        let mut arms = BTreeMap::new();
        arms.insert("s00".to_string(), init(&cfg(), &w.sim, PrefScope::Shared).unwrap());
        let (best, ucb) = bandit_select(&arms, &w.sim, &w.tgt[0], 7, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(best, "s00");
        assert_eq!(ucb.counts().iter().sum::<u64>(), 7);
    }

    #[test]
    fn none_tl_never_reads_source_and_is_seeded() {
        let w = world();
        let src = SourceDomain::new(&w.sim, &w.src, &w.src_logs, 30);
        let tgt = TargetDomain {
            sim: &w.sim,
            profiles: &w.tgt,
            logs: &w.tgt_logs,
            episodes: None,
        };
        let a = train_baseline(BaselineKind::NoneTl, &cfg(), &src, &tgt, &mut SourceModels::default()).unwrap();
        let b = train_baseline(BaselineKind::NoneTl, &cfg(), &src, &tgt, &mut SourceModels::default()).unwrap();
        assert_eq!(src.reads(), 0);
        assert_eq!(a.policy.checksum(), b.policy.checksum());

        let mut zero = cfg();
        zero.target.epochs = 0;
        let untrained = train_baseline(BaselineKind::NoneTl, &zero, &src, &tgt, &mut SourceModels::default()).unwrap();
        assert_eq!(untrained.policy, PolicySet::Single(init(&cfg(), &w.sim, PrefScope::Shared).unwrap()));
    }

    #[test]
    fn every_method_goes_through_the_learner() {
        let w = world();
        let src = SourceDomain::new(&w.sim, &w.src, &w.src_logs, 30);
        let tgt = TargetDomain {
            sim: &w.sim,
            profiles: &w.tgt,
            logs: &w.tgt_logs,
            episodes: None,
        };
        for k in BaselineKind::ALL {
            let before = sgd_calls();
            let t = train_baseline(k, &cfg(), &src, &tgt, &mut SourceModels::default()).unwrap();
            assert!(sgd_calls() > before, "{k}");
            let users = tgt.users();
            for u in &users {
                let p = t.policy.for_user(u).unwrap();
                assert!(p.is_finite());
                if k.personalized() {
                    assert_eq!(p.scope, PrefScope::PerUser);
                    assert!(p.prefs.keys().all(|key| users.contains(key)));
                } else {
                    assert_eq!(p.scope, PrefScope::Shared);
                    assert!(p.prefs.keys().all(|key| key == crate::qfunction::SHARED_PREFS));
                }
            }
            if matches!(k, BaselineKind::Sim | BaselineKind::PriorSim | BaselineKind::Bandit) {
                assert_eq!(t.selections.len(), users.len());
            }
        }
    }

    #[test]
    fn prior_all_starts_from_all() {
        let w = world();
        let src = SourceDomain::new(&w.sim, &w.src, &w.src_logs, 30);
        let tgt = TargetDomain {
            sim: &w.sim,
            profiles: &w.tgt,
            logs: &w.tgt_logs,
            episodes: None,
        };
        let mut models = SourceModels::default();
        let all = train_baseline(BaselineKind::All, &cfg(), &src, &tgt, &mut models).unwrap();
        let all_src = models.all(&cfg(), &src).unwrap().params.clone();
        assert_eq!(all.policy, PolicySet::Single(all_src.clone()));
        let fresh = SourceModels::default().all(&cfg(), &src).unwrap().params.clone();
        assert_eq!(fresh.checksum(), all_src.checksum());

        let mut zero = cfg();
        zero.target.epochs = 0;
        let p = train_baseline(BaselineKind::PriorAll, &zero, &src, &tgt, &mut models).unwrap();
        assert_eq!(p.policy, PolicySet::Single(all_src.clone()));

        let mut strong = cfg();
        strong.prior_lambda = 1e6;
        strong.target.alpha = 1e-2;
        strong.target.alpha_personal = 1e-2;
        let held = train_baseline(BaselineKind::PriorAll, &strong, &src, &tgt, &mut models).unwrap();
        let held = held.policy.for_user("t00").unwrap();
        let drift = (&held.general.0 - &all_src.general.0).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(drift < 1e-3, "{drift}");
        let drift = (&held.projection.0 - &all_src.projection.0).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(drift < 1e-3, "{drift}");
    }

    #[test]
    fn zero_lambda_prior_is_plain_fine_tuning() {
        let w = world();
        let src = SourceDomain::new(&w.sim, &w.src, &w.src_logs, 30);
        let tgt = TargetDomain {
            sim: &w.sim,
            profiles: &w.tgt,
            logs: &w.tgt_logs,
            episodes: None,
        };
        let mut c = cfg();
        c.prior_lambda = 0.0;
        let mut models = SourceModels::default();
        let sim = train_baseline(BaselineKind::Sim, &c, &src, &tgt, &mut models).unwrap();
        let prior = train_baseline(BaselineKind::PriorSim, &c, &src, &tgt, &mut models).unwrap();
        assert_eq!(sim.policy, prior.policy);
        assert_eq!(sim.selections, prior.selections);
    }

    proptest! {
        #[test]
        fn ucb_pulls_sum_to_budget(budget in 0usize..60, arms in 1usize..6, seed in 0u64..1000) {
            let mut r = rng::stream(seed, &[]);
            let mut ucb = Ucb1::new(arms, 1.0);
            for _ in 0..budget {
                let a = ucb.select();
                prop_assert!(a < arms);
                ucb.update(a, r.random::<f64>());
            }
            prop_assert_eq!(ucb.counts().iter().sum::<u64>(), budget as u64);
        }
    }
}
