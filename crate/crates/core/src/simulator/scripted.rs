//! Hand-written agent policies and logged-corpus generation.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{AgentPolicy, Candidate, DialogueAct, Simulator, TurnContext, UserProfile};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn position(cands: &[Candidate], act: &DialogueAct) -> Option<usize> {
    cands.iter().position(|c| &c.act == act)
}

/// Asks every open slot, then requests payment. With `shuffle` the next slot
/// is drawn at random, otherwise slots go in declaration order.
#[derive(Debug, Clone, Copy, Default)]
pub struct AskAll {
    pub shuffle: bool,
}

impl AgentPolicy for AskAll {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        let open = ctx.state.open_sets();
        let act = if open.is_empty() {
            DialogueAct::RequestPayment
        } else if self.shuffle {
            DialogueAct::AskSlot(*open.choose(rng).expect("non-empty"))
        } else {
            DialogueAct::AskSlot(open[0])
        };
        position(ctx.candidates, &act).ok_or_else(|| Error::Validation(format!("{act:?} is not on offer")))
    }
}

/// Suggests a fixed full order first, then falls back to [`AskAll`].
#[derive(Debug, Clone)]
pub struct SuggestIntent {
    pub order: Vec<usize>,
}

impl AgentPolicy for SuggestIntent {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        let full = DialogueAct::Suggest(self.order.iter().map(|&v| Some(v)).collect());
        match position(ctx.candidates, &full) {
            Some(i) => Ok(i),
            None => AskAll::default().choose(ctx, rng),
        }
    }
}

/// A barista who remembers each customer's past orders and opens with
/// "same as before" when a regular order is known and on offer.
#[derive(Debug, Clone, Default)]
pub struct SuggestKnown {
    history: BTreeMap<String, Vec<Vec<usize>>>,
}

impl SuggestKnown {
    pub fn record(&mut self, user_id: &str, order: Vec<usize>) {
        self.history.entry(user_id.to_string()).or_default().push(order);
    }

    /// Most frequent past order; ties go to the most recent.
    pub fn usual(&self, user_id: &str) -> Option<&Vec<usize>> {
        let past = self.history.get(user_id)?;
        let mut best: Option<(usize, usize)> = None;
        for (i, o) in past.iter().enumerate() {
            let n = past.iter().filter(|p| *p == o).count();
            if best.is_none_or(|(bn, _)| n >= bn) {
                best = Some((n, i));
            }
        }
        best.map(|(_, i)| &past[i])
    }
}

impl AgentPolicy for SuggestKnown {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        if ctx.state.turn == 0 {
            if let Some(order) = self.usual(ctx.user_id) {
                let act = DialogueAct::Suggest(order.iter().map(|&v| Some(v)).collect());
                if let Some(i) = position(ctx.candidates, &act) {
                    return Ok(i);
                }
            }
        }
        AskAll { shuffle: true }.choose(ctx, rng)
    }
}

/// Replaces the inner choice with a uniformly random candidate with
/// probability `eps`.
#[derive(Debug, Clone)]
pub struct Noisy<P> {
    pub inner: P,
    pub eps: f64,
}

impl<P: AgentPolicy> AgentPolicy for Noisy<P> {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        let inner = self.inner.choose(ctx, rng)?;
        if self.eps > 0.0 && rng.random::<f64>() < self.eps {
            return Ok(rng.random_range(0..ctx.candidates.len()));
        }
        Ok(inner)
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

/// Human-like logging policy: per dialogue, a suggesting barista with
/// probability `suggest_prob`, otherwise one who asks everything; either
/// makes a random reply with probability `noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaristaMix {
    pub suggest_prob: f64,
    pub noise: f64,
}

impl Default for BaristaMix {
    fn default() -> Self {
        BaristaMix {
            suggest_prob: 0.5,
            noise: 0.1,
        }
    }
}

struct Barista<'a> {
    known: &'a mut SuggestKnown,
    mix: BaristaMix,
    suggesting: bool,
}

impl AgentPolicy for Barista<'_> {
    fn choose(&mut self, ctx: &TurnContext<'_>, rng: &mut Rng) -> Result<usize> {
        if ctx.state.turn == 0 {
            self.suggesting = rng.random::<f64>() < self.mix.suggest_prob;
        }
        let inner = if self.suggesting {
            self.known.choose(ctx, rng)?
        } else {
            AskAll { shuffle: true }.choose(ctx, rng)?
        };
        if self.mix.noise > 0.0 && rng.random::<f64>() < self.mix.noise {
            return Ok(rng.random_range(0..ctx.candidates.len()));
        }
        Ok(inner)
    }
}

/// Logs `n` episodes, cycling through `profiles`, under the barista mix.
pub fn generate_offline_corpus(
    sim: &Simulator,
    profiles: &[UserProfile],
    mix: BaristaMix,
    n: usize,
    rng: &mut Rng,
) -> Result<Corpus> {
    if n == 0 || profiles.is_empty() {
        return Err(Error::Validation("no dialogues".into()));
    }
    let mut known = SuggestKnown::default();
    let mut dialogues = Vec::with_capacity(n);
    for k in 0..n {
        let profile = &profiles[k % profiles.len()];
        let mut barista = Barista {
            known: &mut known,
            mix,
            suggesting: false,
        };
        let log = sim.run_episode(&mut barista, profile, rng)?;
        if log.success {
            known.record(&profile.user_id, log.intent.0.clone());
        }
        dialogues.push(log.dialogue);
    }
    sim.corpus(dialogues)
}
