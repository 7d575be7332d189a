//! Semi-gradient SARSA on logged dialogues and against the simulator.

use std::cell::Cell;
use std::path::Path;

use ndarray::Zip;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::corpus::{ChoiceSets, Corpus, Dialogue, History, Utterance};
use crate::error::{Error, Result};
use crate::qfunction::{argmax_first, grad_q, select_action, GradBundle, PolicyParams, StateScorer};
use crate::rng::{self, Rng};
use crate::simulator::{AgentPolicy, Simulator, TurnContext, UserProfile};

thread_local! {
    static SGD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`sgd_update`] calls made on this thread so far.
pub fn sgd_calls() -> u64 {
    SGD_CALLS.with(Cell::get)
}

/// How dialogues are ordered within an offline epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Shuffled,
    /// Each user's dialogues shuffled, then interleaved one per user.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Step size for the shared parameters `M` and `W`.
    pub alpha: f64,
    /// Step size for the shared scalar `w_p`.
    pub alpha_weight: f64,
    /// Step size for the per-user preference logits.
    pub alpha_personal: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eta_base: f64,
    pub eta_decay: f64,
    /// Also differentiate through the bootstrapped target.
    pub residual_gradient: bool,
    /// Keep `M`, `W` and `w_p` fixed.
    pub freeze_shared: bool,
    pub order: Order,
    /// Online trace granularity, in dialogues.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-4,
            alpha_weight: 1e-4,
            alpha_personal: 1e-4,
            gamma: 0.9,
            epochs: 1,
            seed: 0,
            eta_base: 0.2,
            eta_decay: 1000.0,
            residual_gradient: false,
            freeze_shared: false,
            order: Order::Shuffled,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.alpha_weight >= 0.0) || !(self.alpha_personal >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if !(self.eta_decay > 0.0) || !(0.0..=1.0).contains(&self.eta_base) {
            return Err(Error::Config("invalid exploration schedule".into()));
        }
        Ok(())
    }

    pub fn eta(&self, beta: u64) -> f64 {
        self.eta_base * (-(beta as f64) / self.eta_decay).exp()
    }
}

/// `η = 0.2 · exp(−β / 1000)`.
pub fn exploration_rate(beta: u64) -> f64 {
    TrainConfig::default().eta(beta)
}

/// What follows the action in a transition.
#[derive(Debug, Clone, PartialEq)]
pub enum Next {
    Terminal,
    /// The logged next reply.
    Action(History, Utterance),
    /// The replies on offer at the next state.
    Candidates(History, Vec<Utterance>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub history: History,
    pub action: Utterance,
    pub reward: f64,
    pub next: Next,
}

impl Transition {
    pub fn is_terminal(&self) -> bool {
        matches!(self.next, Next::Terminal)
    }
}

/// Transitions of a logged dialogue, in turn order.
pub fn dialogue_transitions(d: &Dialogue) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(d.turns.len());
    let mut h = History::new(d.turns[0].user.clone());
    for (i, turn) in d.turns.iter().enumerate() {
        let reward = turn
            .reward
            .ok_or_else(|| Error::Validation(format!("dialogue of `{}` lacks a reward at turn {i}", d.user_id)))?;
        let next = match d.turns.get(i + 1) {
            Some(n) => {
                let h2 = h.extended(&turn.agent, &n.user);
                Next::Action(h2, n.agent.clone())
            }
            None => Next::Terminal,
        };
        let cur = h.clone();
        if let Next::Action(h2, _) = &next {
            h = h2.clone();
        }
        out.push(Transition {
            history: cur,
            action: turn.agent.clone(),
            reward,
            next,
        });
    }
    Ok(out)
}

/// The bootstrapped target and the (history, action) it was taken at.
fn td_target<'t>(
    t: &'t Transition,
    theta: &PolicyParams,
    user_id: &str,
    gamma: f64,
    choices: &ChoiceSets,
) -> Result<(f64, Option<(&'t History, &'t Utterance)>)> {
    match &t.next {
        Next::Terminal => Ok((t.reward, None)),
        Next::Action(h, a) => {
            let q = StateScorer::new(h, theta, user_id, choices)?.score(a)?;
            Ok((t.reward + gamma * q, Some((h, a))))
        }
        Next::Candidates(h, cands) => {
            if cands.is_empty() {
                return Err(Error::EmptyCandidates);
            }
            let scorer = StateScorer::new(h, theta, user_id, choices)?;
            let scores = cands.iter().map(|c| scorer.score(c)).collect::<Result<Vec<_>>>()?;
            let best = argmax_first(scores.iter().copied()).ok_or_else(|| Error::Numeric("no finite next value".into()))?;
            Ok((t.reward + gamma * scores[best], Some((h, &cands[best]))))
        }
    }
}

/// `r + γ Q(H′, A′) − Q(H, A)`, or `r − Q(H, A)` at the end.
pub fn td_error_offline(t: &Transition, theta: &PolicyParams, user_id: &str, gamma: f64, choices: &ChoiceSets) -> Result<f64> {
    if matches!(t.next, Next::Candidates(..)) {
        return Err(Error::Validation("offline transitions carry the logged next reply".into()));
    }
    td_error(t, theta, user_id, gamma, choices)
}

/// `r + γ max_{A′} Q(H′, A′) − Q(H, A)`, or `r − Q(H, A)` at the end.
pub fn td_error_online(t: &Transition, theta: &PolicyParams, user_id: &str, gamma: f64, choices: &ChoiceSets) -> Result<f64> {
    if matches!(t.next, Next::Action(..)) {
        return Err(Error::Validation("online transitions carry the next candidate set".into()));
    }
    td_error(t, theta, user_id, gamma, choices)
}

fn td_error(t: &Transition, theta: &PolicyParams, user_id: &str, gamma: f64, choices: &ChoiceSets) -> Result<f64> {
    let q = StateScorer::new(&t.history, theta, user_id, choices)?.score(&t.action)?;
    let (target, _) = td_target(t, theta, user_id, gamma, choices)?;
    Ok(target - q)
}

/// L2 pull toward a prior policy, applied as a proximal step so that any
/// strength stays stable.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub params: PolicyParams,
    pub lambda: f64,
}

fn finite_bundle(g: &GradBundle) -> bool {
    g.personal_weight.is_finite()
        && g.projection.iter().all(|x| x.is_finite())
        && g.general.iter().all(|x| x.is_finite())
        && g.logits.iter().all(|l| l.iter().all(|x| x.is_finite()))
}

/// One semi-gradient step `Θ ← Θ + α δ ∇Q(H, A)`. Only the acting user's
/// preference logits move. Returns the TD error.
pub fn sgd_update(
    theta: &mut PolicyParams,
    t: &Transition,
    user_id: &str,
    cfg: &TrainConfig,
    choices: &ChoiceSets,
    anchor: Option<&Anchor>,
) -> Result<f64> {
    SGD_CALLS.with(|c| c.set(c.get() + 1));
    let scorer = StateScorer::new(&t.history, theta, user_id, choices)?;
    let q = scorer.score(&t.action)?;
    let mut g = scorer.gradient(&t.action)?;
    let (target, next) = td_target(t, theta, user_id, cfg.gamma, choices)?;
    let td = target - q;
    if !td.is_finite() {
        return Err(Error::Numeric(format!("TD error {td} for user `{user_id}`")));
    }
    if cfg.residual_gradient {
        if let Some((h, a)) = next {
            let gn = grad_q(h, a, theta, user_id, choices)?;
            g.projection.scaled_add(-cfg.gamma, &gn.projection);
            g.general.scaled_add(-cfg.gamma, &gn.general);
            g.personal_weight -= cfg.gamma * gn.personal_weight;
            for (l, ln) in g.logits.iter_mut().zip(&gn.logits) {
                l.scaled_add(-cfg.gamma, ln);
            }
        }
    }
    if !finite_bundle(&g) {
        return Err(Error::Numeric(format!("non-finite gradient for user `{user_id}`")));
    }
    if td == 0.0 {
        return Ok(td);
    }

    let shared = if cfg.freeze_shared { 0.0 } else { 1.0 };
    // Shrink the step when, to first order, it would move Q(H, A) further
    // past the target than it started: on long histories |∇Q|² gets large
    // enough to diverge otherwise.
    let sq = |x: &ndarray::Array2<f64>| x.iter().map(|v| v * v).sum::<f64>();
    let gain = shared * cfg.alpha * (sq(&g.projection) + sq(&g.general))
        + shared * cfg.alpha_weight * g.personal_weight.powi(2)
        + cfg.alpha_personal * g.logits.iter().map(|l| l.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    let scale = if gain > 2.0 { 2.0 / gain } else { 1.0 };
    let (a_g, a_w, a_p) = (
        scale * shared * cfg.alpha * td,
        scale * shared * cfg.alpha_weight * td,
        scale * cfg.alpha_personal * td,
    );
    let prox = |lr: f64| anchor.map_or(0.0, |a| lr.abs() / td.abs() * a.lambda);

    let mut projection = theta.projection.0.clone();
    let mut general = theta.general.0.clone();
    let mut wp = theta.personal_weight;
    let key = theta.pref_key(user_id).to_string();
    let mut logits = theta.prefs_for(user_id, choices).logits;

    if a_g != 0.0 {
        projection.scaled_add(a_g, &g.projection);
        general.scaled_add(a_g, &g.general);
    }
    wp += a_w * g.personal_weight;
    for (l, gl) in logits.iter_mut().zip(&g.logits) {
        l.scaled_add(a_p, gl);
    }
    if let Some(anchor) = anchor {
        let (kg, kw, kp) = (prox(a_g), prox(a_w), prox(a_p));
        let pull = |x: &mut ndarray::Array2<f64>, prior: &ndarray::Array2<f64>, k: f64| {
            if k > 0.0 {
                Zip::from(x).and(prior).for_each(|x, &p| *x = (*x + k * p) / (1.0 + k));
            }
        };
        pull(&mut projection, &anchor.params.projection.0, kg);
        pull(&mut general, &anchor.params.general.0, kg);
        if kw > 0.0 {
            wp = (wp + kw * anchor.params.personal_weight) / (1.0 + kw);
        }
        if kp > 0.0 {
            if let Some(prior) = anchor.params.prefs.get(&key) {
                for (l, pl) in logits.iter_mut().zip(&prior.logits) {
                    Zip::from(l).and(pl).for_each(|x, &p| *x = (*x + kp * p) / (1.0 + kp));
                }
            }
        }
    }

    let ok = wp.is_finite()
        && projection.iter().all(|x| x.is_finite())
        && general.iter().all(|x| x.is_finite())
        && logits.iter().all(|l| l.iter().all(|x| x.is_finite()));
    if !ok {
        return Err(Error::Numeric(format!("update for user `{user_id}` diverged (TD error {td})")));
    }
    theta.projection.0 = projection;
    theta.general.0 = general;
    theta.personal_weight = wp;
    theta.prefs_entry(user_id, choices).logits = logits;
    Ok(td)
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub dialogues_seen: u64,
    pub mean_squared_td_error: f64,
    pub eta: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "dialogues_seen", "mean_squared_td_error", "eta"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn epoch_order(dialogues: &[&Dialogue], order: Order, rng: &mut Rng) -> Vec<usize> {
    match order {
        Order::Shuffled => {
            let mut idx: Vec<usize> = (0..dialogues.len()).collect();
            idx.shuffle(rng);
            idx
        }
        Order::RoundRobin => {
            let mut users: Vec<&str> = dialogues.iter().map(|d| d.user_id.as_str()).collect();
            users.sort_unstable();
            users.dedup();
            let mut queues: Vec<Vec<usize>> = users
                .iter()
                .map(|u| {
                    let mut q: Vec<usize> = (0..dialogues.len()).filter(|&i| dialogues[i].user_id == *u).collect();
                    q.shuffle(rng);
                    q.reverse();
                    q
                })
                .collect();
            let mut out = Vec::with_capacity(dialogues.len());
            while out.len() < dialogues.len() {
                for q in queues.iter_mut() {
                    if let Some(i) = q.pop() {
                        out.push(i);
                    }
                }
            }
            out
        }
    }
}

/// Offline SARSA over logged dialogues for `cfg.epochs` epochs. Each
/// dialogue trains its own user's preferences. `beta` counts dialogues.
pub fn train_offline(
    dialogues: &[&Dialogue],
    choices: &ChoiceSets,
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    anchor: Option<&Anchor>,
    beta: &mut u64,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let transitions = dialogues
        .iter()
        .map(|d| dialogue_transitions(d))
        .collect::<Result<Vec<_>>>()?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[rng::label("offline-epoch"), epoch as u64]);
        let (mut sq, mut n) = (0.0, 0usize);
        for i in epoch_order(dialogues, cfg.order, &mut rng) {
            for t in &transitions[i] {
                let td = sgd_update(theta, t, &dialogues[i].user_id, cfg, choices, anchor)?;
                sq += td * td;
                n += 1;
            }
            *beta += 1;
        }
        trace.push(TraceRow {
            epoch,
            dialogues_seen: *beta,
            mean_squared_td_error: if n == 0 { 0.0 } else { sq / n as f64 },
            eta: cfg.eta(*beta),
        });
    }
    Ok(trace)
}

pub fn train_offline_corpus(
    corpus: &Corpus,
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    anchor: Option<&Anchor>,
) -> Result<Vec<TraceRow>> {
    let refs: Vec<&Dialogue> = corpus.dialogues.iter().collect();
    let mut beta = 0;
    train_offline(&refs, &corpus.domain.choices, theta, cfg, anchor, &mut beta)
}

/// Summary of one on-policy training episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub squared_td: f64,
    pub updates: usize,
    pub reward: f64,
    pub success: bool,
}

/// Plays one episode with η-greedy choices, updating after every transition.
pub fn train_online_episode(
    sim: &Simulator,
    profile: &UserProfile,
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    anchor: Option<&Anchor>,
    beta: &mut u64,
    rng: &mut Rng,
) -> Result<EpisodeStats> {
    let choices = sim.choices();
    let user = profile.user_id.as_str();
    let eta = cfg.eta(*beta);
    let intent = sim.sample_intent(profile, rng);
    let mut state = crate::simulator::EpisodeState::new(choices.len());
    let mut history = History::new(sim.opening());
    let mut replies: Vec<Utterance> = sim.candidate_responses(&state).into_iter().map(|c| c.reply).collect();
    let (mut idx, _) = select_action(&history, &replies, theta, user, eta, choices, rng)?;
    let mut stats = EpisodeStats {
        squared_td: 0.0,
        updates: 0,
        reward: 0.0,
        success: false,
    };
    loop {
        let action = replies[idx].clone();
        let resp = sim.user_respond(&action, &intent, &mut state, rng);
        let next_history = history.extended(&action, &resp.utterance);
        let next_replies: Vec<Utterance> = if state.done {
            Vec::new()
        } else {
            sim.candidate_responses(&state).into_iter().map(|c| c.reply).collect()
        };
        let t = Transition {
            history,
            action,
            reward: resp.reward.total(),
            next: if state.done {
                Next::Terminal
            } else {
                Next::Candidates(next_history.clone(), next_replies.clone())
            },
        };
        let td = sgd_update(theta, &t, user, cfg, choices, anchor)?;
        stats.squared_td += td * td;
        stats.updates += 1;
        if state.done {
            break;
        }
        history = next_history;
        replies = next_replies;
        idx = select_action(&history, &replies, theta, user, eta, choices, rng)?.0;
    }
    stats.reward = state.total();
    stats.success = state.paid && state.agreed.iter().zip(&intent.0).all(|(a, &w)| *a == Some(w));
    *beta += 1;
    Ok(stats)
}

/// On-policy training against one simulated user for `n` dialogues.
pub fn train_online(
    sim: &Simulator,
    profile: &UserProfile,
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    n: usize,
    anchor: Option<&Anchor>,
    beta: &mut u64,
    rng: &mut Rng,
) -> Result<Vec<TraceRow>> {
    train_online_users(sim, std::slice::from_ref(profile), theta, cfg, n, anchor, beta, rng)
}

/// On-policy training cycling through `profiles` one dialogue at a time.
#[allow(clippy::too_many_arguments)]
pub fn train_online_users(
    sim: &Simulator,
    profiles: &[UserProfile],
    theta: &mut PolicyParams,
    cfg: &TrainConfig,
    n: usize,
    anchor: Option<&Anchor>,
    beta: &mut u64,
    rng: &mut Rng,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if n > 0 && profiles.is_empty() {
        return Err(Error::Validation("no users to train against".into()));
    }
    let every = cfg.trace_every.max(1);
    let mut trace = Vec::new();
    let (mut sq, mut updates) = (0.0, 0usize);
    for k in 0..n {
        let s = train_online_episode(sim, &profiles[k % profiles.len()], theta, cfg, anchor, beta, rng)?;
        sq += s.squared_td;
        updates += s.updates;
        if (k + 1) % every == 0 || k + 1 == n {
            trace.push(TraceRow {
                epoch: k / every,
                dialogues_seen: *beta,
                mean_squared_td_error: sq / updates.max(1) as f64,
                eta: cfg.eta(*beta),
            });
            sq = 0.0;
            updates = 0;
        }
    }
    Ok(trace)
}

/// η-greedy agent over a fixed parameter set.
pub struct QPolicy<'a> {
    pub theta: &'a PolicyParams,
    pub choices: &'a ChoiceSets,
    pub eta: f64,
}

impl AgentPolicy for QPolicy<'_> {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        let replies: Vec<Utterance> = ctx.candidates.iter().map(|c| c.reply.clone()).collect();
        Ok(select_action(ctx.history, &replies, self.theta, ctx.user_id, self.eta, self.choices, rng)?.0)
    }
}
