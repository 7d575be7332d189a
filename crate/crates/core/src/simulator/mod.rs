//! Coffee-ordering user simulator.
//!
//! Each episode the user samples an order intent from their profile, opens
//! with a request and reacts to agent replies. Rewards split into a general
//! part (progress, payment, turn cost, illogical replies) and a personal part
//! (suggestions confirmed or declined); only the sum reaches the learner.

mod scripted;
mod templates;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChoiceSets, Corpus, Dialogue, Domain, History, Selection, Turn, Utterance};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use scripted::{generate_offline_corpus, AskAll, BaristaMix, Noisy, SuggestIntent, SuggestKnown};
pub use templates::{
    coffee_choice_sets, coffee_domain, coffee_templates, domain_from, DialogueAct, TemplateSpec, Templates, UserAct,
};

/// Reward schedule. Defaults are the published constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Per choice value the user provides.
    pub inform: f64,
    /// Earned by a fully confirmed suggestion over every choice set; each
    /// confirmed set carries `confirm / m`.
    pub confirm: f64,
    /// Per declined (mismatched) set of a suggestion.
    pub decline: f64,
    pub payment: f64,
    pub turn: f64,
    pub illogical: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            inform: 0.1,
            confirm: 0.3,
            decline: -0.2,
            payment: 1.0,
            turn: -0.05,
            illogical: -0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub max_turns: usize,
    /// The user walks away after this many illogical replies; 0 never.
    pub patience: usize,
    pub rewards: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_turns: 20,
            patience: 0,
            rewards: RewardConfig::default(),
        }
    }
}

/// Preferred value per choice set and the probability of following it.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub preferences: Option<Vec<usize>>,
    pub rho: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    user_id: String,
    preferences: Option<BTreeMap<String, String>>,
    rho: f64,
}

impl UserProfile {
    pub fn new(user_id: impl Into<String>, preferences: Option<Vec<usize>>, rho: f64, choices: &ChoiceSets) -> Result<Self> {
        let user_id = user_id.into();
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Validation(format!("profile `{user_id}`: rho {rho} outside [0, 1]")));
        }
        if let Some(p) = &preferences {
            if p.len() != choices.len() || p.iter().enumerate().any(|(j, &v)| v >= choices.cardinality(j)) {
                return Err(Error::Validation(format!("profile `{user_id}`: invalid preference tuple")));
            }
        }
        Ok(UserProfile { user_id, preferences, rho })
    }
}

pub fn save_profiles(profiles: &[UserProfile], choices: &ChoiceSets, path: &Path) -> Result<()> {
    let records: Vec<ProfileRecord> = profiles
        .iter()
        .map(|p| ProfileRecord {
            user_id: p.user_id.clone(),
            preferences: p.preferences.as_ref().map(|pref| {
                pref.iter()
                    .enumerate()
                    .map(|(j, &v)| (choices.defs()[j].name.clone(), choices.value_token(j, v).to_string()))
                    .collect()
            }),
            rho: p.rho,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_profiles(path: &Path, choices: &ChoiceSets) -> Result<Vec<UserProfile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ProfileRecord> = serde_json::from_str(&text)?;
    records
        .into_iter()
        .map(|r| {
            let prefs = match r.preferences {
                None => None,
                Some(map) => {
                    let mut tuple = Vec::with_capacity(choices.len());
                    for (j, def) in choices.defs().iter().enumerate() {
                        let value = map.get(&def.name).ok_or_else(|| {
                            Error::Validation(format!("profile `{}` has no preference for `{}`", r.user_id, def.name))
                        })?;
                        tuple.push(choices.value_index(j, value).ok_or_else(|| {
                            Error::Validation(format!("profile `{}`: `{value}` is not a {} value", r.user_id, def.name))
                        })?);
                    }
                    if map.len() != choices.len() {
                        return Err(Error::Validation(format!("profile `{}` names unknown choice sets", r.user_id)));
                    }
                    Some(tuple)
                }
            };
            UserProfile::new(r.user_id, prefs, r.rho, choices)
        })
        .collect()
}

/// Source and target profiles. The first `n_source - 1` source users have
/// preferences and the last has none; every preference tuple is distinct, so
/// targets never share a tuple with a source user.
pub fn generate_profiles(
    choices: &ChoiceSets,
    n_source: usize,
    n_target: usize,
    rho: f64,
    rng: &mut Rng,
) -> Result<(Vec<UserProfile>, Vec<UserProfile>)> {
    let space: usize = (0..choices.len()).map(|j| choices.cardinality(j)).product();
    let needed = n_source.saturating_sub(1) + n_target;
    if needed > space {
        return Err(Error::Config(format!("{needed} distinct preference tuples requested, only {space} exist")));
    }
    let mut taken: Vec<Vec<usize>> = Vec::new();
    let mut fresh = |rng: &mut Rng| loop {
        let t: Vec<usize> = (0..choices.len()).map(|j| rng.random_range(0..choices.cardinality(j))).collect();
        if !taken.contains(&t) {
            taken.push(t.clone());
            return t;
        }
    };
    let mut source = Vec::with_capacity(n_source);
    for i in 0..n_source {
        let prefs = if i + 1 < n_source { Some(fresh(rng)) } else { None };
        source.push(UserProfile::new(format!("s{i:02}"), prefs, rho, choices)?);
    }
    let mut target = Vec::with_capacity(n_target);
    for i in 0..n_target {
        target.push(UserProfile::new(format!("t{i:02}"), Some(fresh(rng)), rho, choices)?);
    }
    Ok((source, target))
}

/// The value the user wants for each choice set this episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderIntent(pub Vec<usize>);

/// Per set: the preferred value with probability `rho`, else uniform.
pub fn sample_intent(profile: &UserProfile, choices: &ChoiceSets, rng: &mut Rng) -> OrderIntent {
    OrderIntent(
        (0..choices.len())
            .map(|j| match &profile.preferences {
                Some(p) if rng.random::<f64>() < profile.rho => p[j],
                _ => rng.random_range(0..choices.cardinality(j)),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Agent turns taken so far.
    pub turn: usize,
    pub agreed: Selection,
    pub asked: Vec<bool>,
    pub illogical: usize,
    pub paid: bool,
    pub done: bool,
    pub r_general: f64,
    pub r_personal: f64,
}

impl EpisodeState {
    pub fn new(n_sets: usize) -> Self {
        EpisodeState {
            turn: 0,
            agreed: vec![None; n_sets],
            asked: vec![false; n_sets],
            illogical: 0,
            paid: false,
            done: false,
            r_general: 0.0,
            r_personal: 0.0,
        }
    }

    pub fn open_sets(&self) -> Vec<usize> {
        self.agreed.iter().enumerate().filter_map(|(j, a)| a.is_none().then_some(j)).collect()
    }

    pub fn all_agreed(&self) -> bool {
        self.agreed.iter().all(Option::is_some)
    }

    pub fn total(&self) -> f64 {
        self.r_general + self.r_personal
    }
}

/// Reward earned by one user reaction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardParts {
    pub general: f64,
    pub personal: f64,
}

impl RewardParts {
    pub fn total(self) -> f64 {
        self.general + self.personal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub utterance: Utterance,
    pub act: UserAct,
    pub reward: RewardParts,
}

/// An agent reply on offer, with the act it realizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub act: DialogueAct,
    pub reply: Utterance,
}

/// What an agent sees when choosing a reply. Learned policies use only the
/// history and the candidate surface forms.
pub struct TurnContext<'a> {
    pub user_id: &'a str,
    pub history: &'a History,
    pub candidates: &'a [Candidate],
    pub state: &'a EpisodeState,
}

pub trait AgentPolicy {
    /// Index into `ctx.candidates`.
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize>;

    /// Called once at the start of every episode.
    fn reset(&mut self) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub dialogue: Dialogue,
    pub intent: OrderIntent,
    pub total_reward: f64,
    pub general_reward: f64,
    pub personal_reward: f64,
    pub success: bool,
    /// Agent turns.
    pub length: usize,
    pub illogical: usize,
}

/// The simulated environment: domain, templates, rules and the list of
/// frequent orders the shop knows about.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub domain: Domain,
    pub templates: Templates,
    pub config: SimConfig,
    frequent: Vec<Vec<usize>>,
    full_suggestions: bool,
    single_suggestions: Vec<usize>,
}

impl Simulator {
    pub fn new(domain: Domain, templates: Templates, config: SimConfig) -> Self {
        let m = domain.choices.len();
        let all: Vec<usize> = (0..m).collect();
        let slot_sets = templates.suggestion_slot_sets();
        let full_suggestions = slot_sets.iter().any(|s| *s == all);
        let single_suggestions = (0..m).filter(|j| slot_sets.iter().any(|s| s == &vec![*j])).collect();
        Simulator {
            domain,
            templates,
            config,
            frequent: Vec::new(),
            full_suggestions,
            single_suggestions,
        }
    }

    pub fn coffee(config: SimConfig) -> Result<Self> {
        let (domain, templates) = coffee_domain()?;
        Ok(Simulator::new(domain, templates, config))
    }

    pub fn choices(&self) -> &ChoiceSets {
        &self.domain.choices
    }

    /// Registers known frequent orders (duplicates ignored, order kept).
    pub fn set_frequent<I: IntoIterator<Item = Vec<usize>>>(&mut self, orders: I) {
        self.frequent.clear();
        for o in orders {
            if !self.frequent.contains(&o) {
                self.frequent.push(o);
            }
        }
    }

    /// Frequent orders are the preference tuples of the given profiles.
    pub fn with_profiles(mut self, profiles: &[UserProfile]) -> Self {
        self.set_frequent(profiles.iter().filter_map(|p| p.preferences.clone()));
        self
    }

    pub fn frequent(&self) -> &[Vec<usize>] {
        &self.frequent
    }

    pub fn sample_intent(&self, profile: &UserProfile, rng: &mut Rng) -> OrderIntent {
        sample_intent(profile, self.choices(), rng)
    }

    pub fn opening(&self) -> Utterance {
        self.templates.user(UserAct::Open, &[])
    }

    /// Deterministic candidate list: every ask, single-set suggestions over
    /// open sets, full suggestions of frequent orders while everything is
    /// open, then payment and greeting.
    pub fn candidate_responses(&self, state: &EpisodeState) -> Vec<Candidate> {
        let c = self.choices();
        let m = c.len();
        let mut acts = Vec::new();
        for j in 0..m {
            acts.push(DialogueAct::AskSlot(j));
        }
        for &j in &self.single_suggestions {
            if state.agreed[j].is_some() {
                continue;
            }
            for v in 0..c.cardinality(j) {
                let mut sel = vec![None; m];
                sel[j] = Some(v);
                acts.push(DialogueAct::Suggest(sel));
            }
        }
        if self.full_suggestions && state.agreed.iter().all(Option::is_none) {
            for order in &self.frequent {
                acts.push(DialogueAct::Suggest(order.iter().map(|&v| Some(v)).collect()));
            }
        }
        acts.push(DialogueAct::RequestPayment);
        if self.templates.can_render(&DialogueAct::Greet) {
            acts.push(DialogueAct::Greet);
        }
        acts.into_iter()
            .map(|act| {
                let reply = self.templates.render(&act, c).expect("candidate acts are renderable");
                Candidate { act, reply }
            })
            .collect()
    }

    /// The user's reaction to `reply`. Updates `state` in place.
    pub fn user_respond(&self, reply: &Utterance, intent: &OrderIntent, state: &mut EpisodeState, _rng: &mut Rng) -> Response {
        let r = &self.config.rewards;
        let c = self.choices();
        let m = c.len() as f64;
        let mut reward = RewardParts {
            general: r.turn,
            personal: 0.0,
        };
        let value_ids = |sets: &[usize]| -> Vec<usize> { sets.iter().map(|&j| c.value_id(j, intent.0[j])).collect() };
        let (act, values) = match self.templates.parse(reply, c) {
            None => {
                reward.general += r.illogical;
                (UserAct::Confused, Vec::new())
            }
            Some(DialogueAct::AskSlot(j)) => {
                state.asked[j] = true;
                if state.agreed[j].is_some() {
                    reward.general += r.illogical;
                    (UserAct::ComplainRepeat, Vec::new())
                } else {
                    state.agreed[j] = Some(intent.0[j]);
                    reward.general += r.inform;
                    (UserAct::Inform, value_ids(&[j]))
                }
            }
            Some(DialogueAct::Suggest(sel)) => {
                let proposed: Vec<usize> = sel.iter().enumerate().filter_map(|(j, v)| v.map(|_| j)).collect();
                if proposed.iter().any(|&j| state.agreed[j].is_some()) {
                    reward.general += r.illogical;
                    (UserAct::ComplainRepeat, Vec::new())
                } else {
                    let (matched, wrong): (Vec<usize>, Vec<usize>) =
                        proposed.iter().partition(|&&j| sel[j] == Some(intent.0[j]));
                    for &j in &proposed {
                        state.agreed[j] = Some(intent.0[j]);
                    }
                    reward.personal += r.confirm / m * matched.len() as f64;
                    if wrong.is_empty() {
                        reward.general += r.inform * proposed.len() as f64;
                        (UserAct::Confirm, value_ids(&proposed))
                    } else {
                        reward.personal += r.decline * wrong.len() as f64;
                        reward.general += r.inform * wrong.len() as f64;
                        (UserAct::Decline, value_ids(&wrong))
                    }
                }
            }
            Some(DialogueAct::RequestPayment) => {
                if state.all_agreed() {
                    state.paid = true;
                    state.done = true;
                    reward.general += r.payment;
                    (UserAct::Paid, Vec::new())
                } else {
                    reward.general += r.illogical;
                    (UserAct::ComplainEarly, Vec::new())
                }
            }
            Some(DialogueAct::Greet) => (UserAct::Open, Vec::new()),
            Some(DialogueAct::AckInform) => (UserAct::Ack, Vec::new()),
        };
        if matches!(act, UserAct::Confused | UserAct::ComplainRepeat | UserAct::ComplainEarly) {
            state.illogical += 1;
            if self.config.patience > 0 && state.illogical >= self.config.patience {
                state.done = true;
            }
        }
        state.turn += 1;
        if state.turn >= self.config.max_turns {
            state.done = true;
        }
        state.r_general += reward.general;
        state.r_personal += reward.personal;
        Response {
            utterance: self.templates.user(act, &values),
            act,
            reward,
        }
    }

    /// Runs one episode to payment, walk-away or truncation.
    pub fn run_episode(&self, policy: &mut dyn AgentPolicy, profile: &UserProfile, rng: &mut Rng) -> Result<EpisodeLog> {
        let intent = self.sample_intent(profile, rng);
        self.run_with_intent(policy, profile, intent, rng)
    }

    pub fn run_with_intent(
        &self,
        policy: &mut dyn AgentPolicy,
        profile: &UserProfile,
        intent: OrderIntent,
        rng: &mut Rng,
    ) -> Result<EpisodeLog> {
        policy.reset();
        let mut state = EpisodeState::new(self.choices().len());
        let mut history = History::new(self.opening());
        let mut turns = Vec::new();
        while !state.done {
            let candidates = self.candidate_responses(&state);
            let ctx = TurnContext {
                user_id: &profile.user_id,
                history: &history,
                candidates: &candidates,
                state: &state,
            };
            let idx = policy.choose(&ctx, rng)?;
            let chosen = candidates
                .get(idx)
                .ok_or_else(|| Error::Validation(format!("policy chose candidate {idx} of {}", candidates.len())))?;
            let response = self.user_respond(&chosen.reply, &intent, &mut state, rng);
            turns.push(Turn {
                user: history.current().clone(),
                agent: chosen.reply.clone(),
                reward: Some(response.reward.total()),
            });
            history.push(chosen.reply.clone(), response.utterance);
        }
        let success = state.paid && state.agreed.iter().zip(&intent.0).all(|(a, &w)| *a == Some(w));
        Ok(EpisodeLog {
            dialogue: Dialogue {
                user_id: profile.user_id.clone(),
                turns,
            },
            intent,
            total_reward: state.total(),
            general_reward: state.r_general,
            personal_reward: state.r_personal,
            success,
            length: state.turn,
            illogical: state.illogical,
        })
    }

    /// Wraps logged dialogues into a corpus over this simulator's domain.
    pub fn corpus(&self, dialogues: Vec<Dialogue>) -> Result<Corpus> {
        Corpus::new(self.domain.clone(), dialogues)
    }
}

/// Uniformly random replies.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl AgentPolicy for RandomPolicy {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        let idx: Vec<usize> = (0..ctx.candidates.len()).collect();
        idx.choose(rng).copied().ok_or(Error::EmptyCandidates)
    }
}
