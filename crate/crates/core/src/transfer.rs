//! Shared parameters learned on source users, used to initialize target users.

use std::collections::BTreeMap;

use crate::corpus::{ChoiceSets, Dialogue};
use crate::error::{Error, Result};
use crate::learner::{train_offline, train_online_users, Anchor, Order, TraceRow, TrainConfig};
use crate::qfunction::{PersonalPreferences, PolicyParams, PrefScope};
use crate::rng::Rng;
use crate::simulator::{Simulator, UserProfile};

/// Training data for one phase.
#[derive(Clone, Copy)]
pub enum TrainData<'a> {
    /// Logged dialogues, trained for `cfg.epochs` epochs.
    Logged(&'a [&'a Dialogue]),
    /// On-policy episodes against simulated users, cycling through them.
    Simulated {
        sim: &'a Simulator,
        profiles: &'a [UserProfile],
        dialogues: usize,
    },
}

impl TrainData<'_> {
    pub fn is_empty(&self) -> bool {
        match self {
            TrainData::Logged(d) => d.is_empty(),
            TrainData::Simulated { profiles, dialogues, .. } => profiles.is_empty() || *dialogues == 0,
        }
    }

    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = match self {
            TrainData::Logged(d) => d.iter().map(|d| d.user_id.clone()).collect(),
            TrainData::Simulated { profiles, .. } => profiles.iter().map(|p| p.user_id.clone()).collect(),
        };
        u.sort();
        u.dedup();
        u
    }
}

/// Runs one training phase in place. Logged data is interleaved round-robin
/// over users.
pub fn train_phase(
    data: TrainData<'_>,
    choices: &ChoiceSets,
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    anchor: Option<&Anchor>,
    beta: &mut u64,
    rng: &mut Rng,
) -> Result<Vec<TraceRow>> {
    match data {
        TrainData::Logged(d) => {
            let cfg = TrainConfig {
                order: Order::RoundRobin,
                ..*cfg
            };
            train_offline(d, choices, theta, &cfg, anchor, beta)
        }
        TrainData::Simulated { sim, profiles, dialogues } => {
            train_online_users(sim, profiles, theta, cfg, dialogues, anchor, beta, rng)
        }
    }
}

/// Shared parameters plus the per-source-user preferences learned alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub params: PolicyParams,
    pub trace: Vec<TraceRow>,
    /// Dialogues seen, which drives the exploration schedule.
    pub beta: u64,
}

/// Trains `init` on every source user's data. Each source user keeps their
/// own preferences; `M`, `W` and `w_p` are a single shared copy.
pub fn train_source_model(
    data: TrainData<'_>,
    choices: &ChoiceSets,
    init: PolicyParams,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<SourceModel> {
    if data.is_empty() {
        return Err(Error::Validation("source data is empty".into()));
    }
    let mut params = init;
    let mut beta = 0;
    let trace = train_phase(data, choices, &mut params, cfg, None, &mut beta, rng)?;
    Ok(SourceModel { params, trace, beta })
}

/// Target initialization: exact copies of `M`, `W` and `w_p`, fresh uniform
/// preferences for each target user, no source preferences.
pub fn initialize_target(source: &PolicyParams, target_users: &[String], choices: &ChoiceSets) -> PolicyParams {
    let prefs: BTreeMap<String, PersonalPreferences> = target_users
        .iter()
        .map(|u| (u.clone(), PersonalPreferences::uniform(choices)))
        .collect();
    PolicyParams {
        projection: source.projection.clone(),
        general: source.general.clone(),
        personal_weight: source.personal_weight,
        prefs,
        scope: PrefScope::PerUser,
        memory: source.memory,
    }
}

/// Initializes from the source model and adapts every parameter (or only the
/// preferences with `cfg.freeze_shared`) on the target data.
pub fn transfer_to_target(
    data: TrainData<'_>,
    source: &SourceModel,
    choices: &ChoiceSets,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PolicyParams, Vec<TraceRow>)> {
    let mut theta = initialize_target(&source.params, &data.users(), choices);
    let mut beta = source.beta;
    let trace = train_phase(data, choices, &mut theta, cfg, None, &mut beta, rng)?;
    Ok((theta, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{History, Utterance};
    use crate::qfunction::{q_general, q_personal, ModelConfig, StateScorer};
    use crate::rng;
    use crate::simulator::{generate_offline_corpus, BaristaMix, SimConfig};
    use rand::seq::IndexedRandom;

    fn sim() -> Simulator {
        Simulator::coffee(SimConfig::default()).unwrap()
    }

    fn init(s: &Simulator, seed: u64) -> PolicyParams {
        let cfg = ModelConfig {
            dim: 6,
            ..ModelConfig::default()
        };
        PolicyParams::init(s.domain.vocab.len(), &cfg, PrefScope::PerUser, &mut rng::stream(seed, &[])).unwrap()
    }

    fn logged(s: &Simulator, profiles: &[UserProfile], n: usize, seed: u64) -> crate::corpus::Corpus {
        generate_offline_corpus(s, profiles, BaristaMix::default(), n, &mut rng::stream(seed, &[])).unwrap()
    }

    #[test]
    fn empty_source_is_an_error() {
        let s = sim();
        let r = train_source_model(TrainData::Logged(&[]), s.choices(), init(&s, 0), &TrainConfig::default(), &mut rng::stream(0, &[]));
        assert!(r.is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let s = sim();
        let p = vec![UserProfile::new("a", None, 0.8, s.choices()).unwrap()];
        let c = logged(&s, &p, 3, 1);
        let refs: Vec<&Dialogue> = c.dialogues.iter().collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = train_source_model(TrainData::Logged(&refs), s.choices(), init(&s, 1), &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m.params, init(&s, 1));
    }

    #[test]
    fn opposing_source_users_learn_different_preferences() {
        let s0 = sim();
        let ch = s0.choices();
        let p = vec![
            UserProfile::new("a", Some(vec![0, 0, 0, 0]), 1.0, ch).unwrap(),
            UserProfile::new("b", Some(vec![3, 1, 2, 3]), 1.0, ch).unwrap(),
        ];
        let s = s0.clone().with_profiles(&p);
        let c = logged(&s, &p, 60, 2);
        let refs: Vec<&Dialogue> = c.dialogues.iter().collect();
        let cfg = TrainConfig {
            epochs: 5,
            alpha: 1e-3,
            alpha_weight: 1e-3,
            alpha_personal: 0.1,
            ..TrainConfig::default()
        };
        let m = train_source_model(TrainData::Logged(&refs), ch, init(&s, 2), &cfg, &mut rng::stream(0, &[])).unwrap();
        let (a, b) = (m.params.prefs_for("a", ch), m.params.prefs_for("b", ch));
        assert_eq!(a.argmax(0), 0);
        assert_eq!(b.argmax(0), 3);
        assert!((0..ch.len()).all(|j| a.argmax(j) != b.argmax(j)));
    }

    #[test]
    fn transfer_copies_shared_params_only() {
        let s0 = sim();
        let ch = s0.choices();
        let p = vec![
            UserProfile::new("s0", Some(vec![0, 0, 0, 0]), 0.8, ch).unwrap(),
            UserProfile::new("s1", Some(vec![1, 1, 1, 1]), 0.8, ch).unwrap(),
        ];
        let s = s0.clone().with_profiles(&p);
        let cfg = TrainConfig {
            alpha: 1e-3,
            alpha_weight: 1e-3,
            alpha_personal: 0.05,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(3, &[]);
        let data = TrainData::Simulated {
            sim: &s,
            profiles: &p,
            dialogues: 30,
        };
        let src = train_source_model(data, ch, init(&s, 3), &cfg, &mut r).unwrap();
        assert_eq!(src.beta, 30);
        assert!(src.params.prefs.contains_key("s0") && src.params.prefs.contains_key("s1"));

        let targets = vec!["t0".to_string()];
        let t = initialize_target(&src.params, &targets, ch);
        assert_eq!(t.projection, src.params.projection);
        assert_eq!(t.general, src.params.general);
        assert_eq!(t.personal_weight.to_bits(), src.params.personal_weight.to_bits());
        assert_eq!(t.prefs.keys().collect::<Vec<_>>(), ["t0"]);
        assert_eq!(t.prefs["t0"], PersonalPreferences::uniform(ch));

        let replies: Vec<Utterance> = s.candidate_responses(&crate::simulator::EpisodeState::new(ch.len()))
            .into_iter()
            .map(|c| c.reply)
            .collect();
        for _ in 0..20 {
            let a = replies.choose(&mut r).unwrap();
            let h = History::new(s.opening()).extended(a, &s.domain.utterance("tall please").unwrap());
            let a2 = replies.choose(&mut r).unwrap();
            let gs = StateScorer::new(&h, &src.params, "s0", ch).unwrap().general(a2).unwrap();
            let gt = StateScorer::new(&h, &t, "t0", ch).unwrap().general(a2).unwrap();
            assert_eq!(gs.to_bits(), gt.to_bits());
            let b = crate::belief::belief_from_history(&h, &t.projection, t.memory).unwrap();
            let av = crate::belief::project(a2.bow(), &t.projection).unwrap();
            assert!((q_general(&b, &av, &t.general).unwrap() - gs).abs() < 1e-12);
            let qp = q_personal(&h, a2, &t.prefs_for("t0", ch), t.personal_weight, ch).unwrap();
            let proposed = crate::corpus::extract_proposed_choices(a2, ch).unwrap();
            let agreed = crate::corpus::detect_choices(h.user(), ch);
            let expected: f64 = (0..ch.len())
                .filter(|&j| proposed[j].is_some() && agreed[j].is_none())
                .map(|j| t.personal_weight / ch.cardinality(j) as f64)
                .sum();
            assert!((qp - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn target_adaptation_finds_mocha() {
        let s0 = sim();
        let ch = s0.choices();
        let mocha = ch.value_index(0, "mocha").unwrap();
        let src_p = vec![
            UserProfile::new("s0", Some(vec![0, 0, 0, 0]), 0.8, ch).unwrap(),
            UserProfile::new("s1", Some(vec![1, 1, 1, 1]), 0.8, ch).unwrap(),
        ];
        let tgt_p = vec![UserProfile::new("t0", Some(vec![mocha, 1, 2, 3]), 0.9, ch).unwrap()];
        let all: Vec<UserProfile> = src_p.iter().chain(&tgt_p).cloned().collect();
        let s = s0.clone().with_profiles(&all);
        let cfg = TrainConfig {
            alpha: 1e-3,
            alpha_weight: 1e-3,
            alpha_personal: 0.1,
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(4, &[]);
        let src_data = TrainData::Simulated {
            sim: &s,
            profiles: &src_p,
            dialogues: 40,
        };
        let src = train_source_model(src_data, ch, init(&s, 4), &cfg, &mut r).unwrap();
        let tc = logged(&s, &tgt_p, 20, 5);
        let refs: Vec<&Dialogue> = tc.dialogues.iter().collect();
        let (t, trace) = transfer_to_target(TrainData::Logged(&refs), &src, ch, &cfg, &mut r).unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(t.prefs_for("t0", ch).argmax(0), mocha);
        assert!(!t.prefs.contains_key("s0"));

        let frozen = TrainConfig {
            freeze_shared: true,
            ..cfg
        };
        let (tf, _) = transfer_to_target(TrainData::Logged(&refs), &src, ch, &frozen, &mut r).unwrap();
        assert_eq!(tf.general, src.params.general);
        assert_eq!(tf.projection, src.params.projection);
        assert_ne!(tf.prefs_for("t0", ch), PersonalPreferences::uniform(ch));
    }
}
