//! The end-to-end pipeline: data generation, source training, transfer and
//! evaluation, with an on-disk layout so each stage can run on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{train_baseline, BaselineKind, SourceDomain, SourceModels, TargetDomain, Trained};
use crate::config::{ExperimentConfig, TargetMode};
use crate::corpus::{load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::evaluation::{
    auc_evaluate, online_evaluate, write_auc_report, write_online_report, AucResult, OnlineMetrics, OnlineResult, PolicySet,
    SeedAuc,
};
use crate::exec::Execution;
use crate::learner::write_trace_csv;
use crate::qfunction::{load_params, save_params, PolicyParams};
use crate::rng;
use crate::simulator::{generate_offline_corpus, generate_profiles, load_profiles, save_profiles, Simulator, UserProfile};
use crate::transfer::SourceModel;

/// Where every artifact lives under the output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    pub fn checkpoint_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("checkpoints")
    }

    pub fn trace_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("traces")
    }

    pub fn policy_dir(&self, seed: u64, kind: BaselineKind) -> PathBuf {
        self.checkpoint_dir(seed).join(kind.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Source and target users with their logged dialogues.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub source: Vec<UserProfile>,
    pub target: Vec<UserProfile>,
    pub source_logs: Corpus,
    pub target_train: Corpus,
    pub target_test: Corpus,
}

const FILES: [&str; 5] = [
    "source_profiles.json",
    "target_profiles.json",
    "source_logs.jsonl",
    "target_train.jsonl",
    "target_test.jsonl",
];

impl DataSet {
    pub fn save(&self, dir: &Path, sim: &Simulator) -> Result<()> {
        mkdir(dir)?;
        save_profiles(&self.source, sim.choices(), &dir.join(FILES[0]))?;
        save_profiles(&self.target, sim.choices(), &dir.join(FILES[1]))?;
        self.source_logs.save(&dir.join(FILES[2]))?;
        self.target_train.save(&dir.join(FILES[3]))?;
        self.target_test.save(&dir.join(FILES[4]))
    }

    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let base = Simulator::coffee(cfg.sim)?;
        let choices = base.choices();
        Ok(DataSet {
            source: load_profiles(&dir.join(FILES[0]), choices)?,
            target: load_profiles(&dir.join(FILES[1]), choices)?,
            source_logs: load_corpus(&dir.join(FILES[2]))?,
            target_train: load_corpus(&dir.join(FILES[3]))?,
            target_test: load_corpus(&dir.join(FILES[4]))?,
        })
    }

    /// The simulator with only the source users' usual orders on its menu.
    pub fn source_simulator(&self, cfg: &ExperimentConfig) -> Result<Simulator> {
        Ok(Simulator::coffee(cfg.sim)?.with_profiles(&self.source))
    }

    /// The simulator with every known user's usual order on its menu.
    pub fn simulator(&self, cfg: &ExperimentConfig) -> Result<Simulator> {
        let all: Vec<UserProfile> = self.source.iter().chain(&self.target).cloned().collect();
        Ok(Simulator::coffee(cfg.sim)?.with_profiles(&all))
    }
}

/// Profiles and logged corpora for one seed.
pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataSet> {
    let base = Simulator::coffee(cfg.sim)?;
    let d = &cfg.data;
    let (source, target) = generate_profiles(
        base.choices(),
        d.n_source_users,
        d.n_target_users,
        d.rho,
        &mut rng::stream(seed, &[rng::label("profiles")]),
    )?;
    let all: Vec<UserProfile> = source.iter().chain(&target).cloned().collect();
    let sim = base.with_profiles(&all);
    let logs = |profiles: &[UserProfile], per_user: usize, name: &str| {
        generate_offline_corpus(
            &sim,
            profiles,
            cfg.mix,
            per_user * profiles.len(),
            &mut rng::stream(seed, &[rng::label(name)]),
        )
    };
    Ok(DataSet {
        source_logs: logs(&source, d.source_log_dialogues, "source-logs")?,
        target_train: logs(&target, d.target_train_dialogues, "target-train")?,
        target_test: logs(&target, d.target_test_dialogues, "target-test")?,
        source,
        target,
    })
}

/// Trains the source-side models `kinds` need.
pub fn train_sources(cfg: &ExperimentConfig, seed: u64, data: &DataSet, kinds: &[BaselineKind]) -> Result<SourceModels> {
    let sim = data.source_simulator(cfg)?;
    let bc = cfg.baseline_config(seed);
    let src = SourceDomain::new(&sim, &data.source, &data.source_logs, cfg.source_dialogues);
    let mut models = SourceModels::default();
    for k in kinds {
        match k {
            BaselineKind::Petal => {
                models.petal(&bc, &src)?;
            }
            BaselineKind::All | BaselineKind::PriorAll => {
                models.all(&bc, &src)?;
            }
            BaselineKind::Sim | BaselineKind::PriorSim | BaselineKind::Bandit => {
                models.per_user(&bc, &src)?;
            }
            BaselineKind::NoneTl => {}
        }
    }
    Ok(models)
}

pub fn save_sources(models: &SourceModels, dir: &Path, traces: &Path, config_hash: &str) -> Result<()> {
    mkdir(dir)?;
    mkdir(traces)?;
    for (name, m) in [("source-petal", models.stored_petal()), ("source-all", models.stored_all())] {
        if let Some(m) = m {
            save_params(&m.params, config_hash, &dir.join(format!("{name}.json")))?;
            write_trace_csv(&m.trace, &traces.join(format!("{name}.csv")))?;
        }
    }
    if let Some(per) = models.stored_per_user() {
        let d = dir.join("source-users");
        mkdir(&d)?;
        for (u, p) in per {
            save_params(p, config_hash, &d.join(format!("{u}.json")))?;
        }
    }
    Ok(())
}

/// Reloads whatever [`save_sources`] wrote. The dialogue count stands in for
/// the exploration counter, which on-policy training advances once per
/// dialogue.
pub fn load_sources(dir: &Path, cfg: &ExperimentConfig) -> Result<SourceModels> {
    let mut models = SourceModels::default();
    let beta = (cfg.source_dialogues * cfg.source.epochs) as u64;
    let model = |p: PolicyParams| SourceModel {
        params: p,
        trace: Vec::new(),
        beta,
    };
    let petal = dir.join("source-petal.json");
    if petal.exists() {
        models = models.with_petal(model(load_params(&petal)?));
    }
    let all = dir.join("source-all.json");
    if all.exists() {
        models = models.with_all(model(load_params(&all)?));
    }
    let per = dir.join("source-users");
    if per.is_dir() {
        models = models.with_per_user(load_dir(&per)?);
    }
    Ok(models)
}

fn load_dir(dir: &Path) -> Result<BTreeMap<String, PolicyParams>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(id, load_params(&path)?);
        }
    }
    Ok(out)
}

/// `policy.json` for a single policy, one file per user otherwise. Stale
/// files from an earlier run are removed first.
pub fn save_policy(policy: &PolicySet, dir: &Path, config_hash: &str) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    mkdir(dir)?;
    match policy {
        PolicySet::Single(p) => save_params(p, config_hash, &dir.join("policy.json")),
        PolicySet::PerUser(m) => {
            for (u, p) in m {
                save_params(p, config_hash, &dir.join(format!("{u}.json")))?;
            }
            Ok(())
        }
    }
}

pub fn load_policy(dir: &Path) -> Result<PolicySet> {
    let single = dir.join("policy.json");
    if single.exists() {
        return Ok(PolicySet::Single(load_params(&single)?));
    }
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint")));
    }
    let m = load_dir(dir)?;
    if m.is_empty() {
        return Err(Error::Validation(format!("no checkpoints in {}", dir.display())));
    }
    Ok(PolicySet::PerUser(m))
}

/// Trains `kind` against the target users, reusing `models` for the source side.
pub fn transfer(cfg: &ExperimentConfig, seed: u64, data: &DataSet, kind: BaselineKind, models: &mut SourceModels) -> Result<Trained> {
    let sim = data.simulator(cfg)?;
    let source_sim = data.source_simulator(cfg)?;
    let src = SourceDomain::new(&source_sim, &data.source, &data.source_logs, cfg.source_dialogues);
    let tgt = TargetDomain {
        sim: &sim,
        profiles: &data.target,
        logs: &data.target_train,
        episodes: match cfg.target_mode {
            TargetMode::Simulated => Some(cfg.data.target_train_dialogues),
            TargetMode::Logged => None,
        },
    };
    train_baseline(kind, &cfg.baseline_config(seed), &src, &tgt, models)
}

/// Online metrics over `target_test_dialogues` episodes per target user.
pub fn evaluate_online(cfg: &ExperimentConfig, seed: u64, data: &DataSet, policy: &PolicySet, exec: Execution) -> Result<OnlineMetrics> {
    let sim = data.simulator(cfg)?;
    let r = online_evaluate(policy, &sim, &data.target, cfg.data.target_test_dialogues, &[seed], exec)?;
    Ok(r.seeds[0].1)
}

/// AUC over the held-out target dialogues.
pub fn evaluate_auc(seed: u64, data: &DataSet, policy: &PolicySet, exec: Execution) -> Result<SeedAuc> {
    let r = auc_evaluate(policy, &data.target_test, &[seed], exec)?;
    Ok(r.seeds.into_iter().next().expect("one seed"))
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data: DataSet,
    pub policies: BTreeMap<BaselineKind, Trained>,
    pub online: BTreeMap<BaselineKind, OnlineMetrics>,
    pub auc: BTreeMap<BaselineKind, SeedAuc>,
}

/// Runs every stage for one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, kinds: &[BaselineKind], with_auc: bool, exec: Execution) -> Result<SeedRun> {
    let data = generate_data(cfg, seed)?;
    let mut models = train_sources(cfg, seed, &data, kinds)?;
    let mut run = SeedRun {
        seed,
        policies: BTreeMap::new(),
        online: BTreeMap::new(),
        auc: BTreeMap::new(),
        data,
    };
    for &k in kinds {
        let t = transfer(cfg, seed, &run.data, k, &mut models)?;
        run.online.insert(k, evaluate_online(cfg, seed, &run.data, &t.policy, exec)?);
        if with_auc {
            run.auc.insert(k, evaluate_auc(seed, &run.data, &t.policy, exec)?);
        }
        run.policies.insert(k, t);
    }
    Ok(run)
}

/// Per-method results over all seeds, in `kinds` order.
pub struct Report {
    pub online: Vec<(String, OnlineResult)>,
    pub auc: Vec<(String, AucResult)>,
}

pub fn aggregate(runs: &[SeedRun], kinds: &[BaselineKind]) -> Report {
    let mut online = Vec::new();
    let mut auc = Vec::new();
    for &k in kinds {
        let on: Vec<(u64, OnlineMetrics)> = runs.iter().filter_map(|r| r.online.get(&k).map(|m| (r.seed, *m))).collect();
        if !on.is_empty() {
            online.push((k.to_string(), OnlineResult::from_seeds(on)));
        }
        let a: Vec<SeedAuc> = runs.iter().filter_map(|r| r.auc.get(&k).cloned()).collect();
        if !a.is_empty() {
            auc.push((k.to_string(), AucResult::from_seeds(a)));
        }
    }
    Report { online, auc }
}

/// Generates and saves the seed's data, plus the config it was made with.
pub fn stage_gen_data(cfg: &ExperimentConfig, seed: u64, layout: &Layout) -> Result<DataSet> {
    let data = generate_data(cfg, seed)?;
    let dir = layout.data_dir(seed);
    data.save(&dir, &data.simulator(cfg)?)?;
    let path = layout.seed_dir(seed).join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(data)
}

/// Trains and saves the source models `kinds` need. Needs `stage_gen_data`.
pub fn stage_train_source(cfg: &ExperimentConfig, seed: u64, layout: &Layout, kinds: &[BaselineKind]) -> Result<SourceModels> {
    let data = DataSet::load(&layout.data_dir(seed), cfg)?;
    let models = train_sources(cfg, seed, &data, kinds)?;
    save_sources(&models, &layout.checkpoint_dir(seed), &layout.trace_dir(seed), &cfg.hash())?;
    Ok(models)
}

fn has_source(models: &SourceModels, kind: BaselineKind) -> bool {
    match kind {
        BaselineKind::NoneTl => true,
        BaselineKind::Petal => models.stored_petal().is_some(),
        BaselineKind::All | BaselineKind::PriorAll => models.stored_all().is_some(),
        BaselineKind::Sim | BaselineKind::PriorSim | BaselineKind::Bandit => models.stored_per_user().is_some(),
    }
}

/// Adapts every method in `kinds` to the target users and saves the
/// policies. Needs the source checkpoints from `stage_train_source`.
pub fn stage_transfer(cfg: &ExperimentConfig, seed: u64, layout: &Layout, kinds: &[BaselineKind]) -> Result<()> {
    let data = DataSet::load(&layout.data_dir(seed), cfg)?;
    let mut models = load_sources(&layout.checkpoint_dir(seed), cfg)?;
    for &k in kinds {
        if !has_source(&models, k) {
            return Err(Error::Validation(format!(
                "no source checkpoint for `{k}` under {}; run train-source first",
                layout.checkpoint_dir(seed).display()
            )));
        }
        let t = transfer(cfg, seed, &data, k, &mut models)?;
        save_policy(&t.policy, &layout.policy_dir(seed, k), &cfg.hash())?;
    }
    Ok(())
}

/// AUC of the saved policies on each seed's held-out target corpus; writes
/// the report files.
pub fn stage_eval_offline(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    layout: &Layout,
    kinds: &[BaselineKind],
    exec: Execution,
) -> Result<Vec<(String, AucResult)>> {
    let mut out = Vec::new();
    for &k in kinds {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let data = DataSet::load(&layout.data_dir(seed), cfg)?;
            let policy = load_policy(&layout.policy_dir(seed, k))?;
            per_seed.push(evaluate_auc(seed, &data, &policy, exec)?);
        }
        out.push((k.to_string(), AucResult::from_seeds(per_seed)));
    }
    write_auc_report(&out, &layout.report_dir())?;
    Ok(out)
}

/// Simulated episodes with the saved policies; writes the report files.
pub fn stage_eval_online(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    layout: &Layout,
    kinds: &[BaselineKind],
    exec: Execution,
) -> Result<Vec<(String, OnlineResult)>> {
    let mut out = Vec::new();
    for &k in kinds {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let data = DataSet::load(&layout.data_dir(seed), cfg)?;
            let policy = load_policy(&layout.policy_dir(seed, k))?;
            per_seed.push((seed, evaluate_online(cfg, seed, &data, &policy, exec)?));
        }
        out.push((k.to_string(), OnlineResult::from_seeds(per_seed)));
    }
    write_online_report(&out, &layout.report_dir())?;
    Ok(out)
}
