//! The personalized Q-function `Q = Q_g + Q_p`.
//!
//! `Q_g(H, A) = a W bᵀ` is bilinear in the action embedding `a = A M` and the
//! belief `b`. `Q_p(H, A) = w_p Σ_j p_uj[c_j] δ_j` adds, for every choice set
//! the reply proposes a value for, the user's probability of that value while
//! the set is still open.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::{BeliefState, HistoryBags, MemoryFactor, ProjectionMatrix};
use crate::corpus::{detect_choices, extract_proposed_choices, open_indicator, ChoiceSets, History, Selection, Utterance};
use crate::error::{Error, Result};

/// Key under which a policy without per-user personalization stores its
/// single preference vector.
pub const SHARED_PREFS: &str = "*";

/// `W ∈ R^{d × 4d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralWeights(pub Array2<f64>);

impl GeneralWeights {
    pub fn zeros(dim: usize) -> Self {
        GeneralWeights(Array2::zeros((dim, 4 * dim)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Column-major flattening `vec(W)`.
    pub fn vec(&self) -> Array1<f64> {
        self.0.t().iter().copied().collect()
    }
}

/// Per-choice-set preference logits; `softmax(logits_j)` is `p_uj`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalPreferences {
    pub logits: Vec<Array1<f64>>,
}

impl PersonalPreferences {
    pub fn uniform(choices: &ChoiceSets) -> Self {
        PersonalPreferences {
            logits: (0..choices.len()).map(|j| Array1::zeros(choices.cardinality(j))).collect(),
        }
    }

    pub fn probs(&self, set: usize) -> Array1<f64> {
        softmax(self.logits[set].view())
    }

    pub fn argmax(&self, set: usize) -> usize {
        argmax_first(self.logits[set].iter().copied()).expect("non-empty choice set")
    }

    pub fn param_count(&self) -> usize {
        self.logits.iter().map(Array1::len).sum()
    }
}

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Index of the first maximum; `None` for an empty iterator. NaN never wins.
pub fn argmax_first<I: IntoIterator<Item = f64>>(values: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Whether preference vectors are kept per user or shared by everyone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefScope {
    PerUser,
    Shared,
}

/// Model hyperparameters fixed at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub projection_std: f64,
    pub general_std: f64,
    pub personal_weight_init: f64,
    pub memory_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 50,
            projection_std: 0.1,
            general_std: 0.01,
            personal_weight_init: 0.0,
            memory_factor: 0.8,
        }
    }
}

/// `Θ = {M, W, w_p, {p_u}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub projection: ProjectionMatrix,
    pub general: GeneralWeights,
    pub personal_weight: f64,
    pub prefs: BTreeMap<String, PersonalPreferences>,
    pub scope: PrefScope,
    pub memory: MemoryFactor,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(vocab_len: usize, cfg: &ModelConfig, scope: PrefScope, rng: &mut R) -> Result<Self> {
        if cfg.dim == 0 || vocab_len == 0 {
            return Err(Error::Config("model dimension and vocabulary must be positive".into()));
        }
        let projection = ProjectionMatrix::random(vocab_len, cfg.dim, cfg.projection_std, rng);
        let general = if cfg.general_std > 0.0 {
            let normal = Normal::new(0.0, cfg.general_std).map_err(|e| Error::Config(e.to_string()))?;
            GeneralWeights(Array2::from_shape_simple_fn((cfg.dim, 4 * cfg.dim), || normal.sample(rng)))
        } else {
            GeneralWeights::zeros(cfg.dim)
        };
        Ok(PolicyParams {
            projection,
            general,
            personal_weight: cfg.personal_weight_init,
            prefs: BTreeMap::new(),
            scope,
            memory: MemoryFactor::new(cfg.memory_factor)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.dim()
    }

    pub fn vocab_len(&self) -> usize {
        self.projection.vocab_len()
    }

    pub fn pref_key<'a>(&self, user_id: &'a str) -> &'a str {
        match self.scope {
            PrefScope::PerUser => user_id,
            PrefScope::Shared => SHARED_PREFS,
        }
    }

    /// Preferences used for `user_id`; uniform if none were learned yet.
    pub fn prefs_for(&self, user_id: &str, choices: &ChoiceSets) -> PersonalPreferences {
        self.prefs
            .get(self.pref_key(user_id))
            .cloned()
            .unwrap_or_else(|| PersonalPreferences::uniform(choices))
    }

    pub fn prefs_entry(&mut self, user_id: &str, choices: &ChoiceSets) -> &mut PersonalPreferences {
        let key = self.pref_key(user_id).to_string();
        self.prefs
            .entry(key)
            .or_insert_with(|| PersonalPreferences::uniform(choices))
    }

    /// Size of the shared part: `|vec(W)| + |M| + 1`.
    pub fn shared_param_count(&self) -> usize {
        self.general.0.len() + self.projection.0.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.personal_weight.is_finite()
            && self.projection.0.iter().all(|x| x.is_finite())
            && self.general.0.iter().all(|x| x.is_finite())
            && self.prefs.values().all(|p| p.logits.iter().all(|l| l.iter().all(|x| x.is_finite())))
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.projection.0.iter().chain(self.general.0.iter()) {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(self.personal_weight.to_bits().to_le_bytes());
        for (k, p) in &self.prefs {
            h.update(k.as_bytes());
            for l in &p.logits {
                for x in l {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Shared-parameter count `4d² + v·d` for a model of the given size.
pub fn general_param_count(dim: usize, vocab_len: usize) -> usize {
    4 * dim * dim + vocab_len * dim
}

/// `b ⊗ a`, ordered so that `(b ⊗ a) · vec(W) = a W bᵀ`.
pub fn kron(b: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(b.len() * a.len());
    for (i, &bi) in b.iter().enumerate() {
        out.slice_mut(s![i * a.len()..(i + 1) * a.len()]).assign(&(a * bi));
    }
    out
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

/// `Q_g = a W bᵀ`.
pub fn q_general(b: &BeliefState, a: &Array1<f64>, w: &GeneralWeights) -> Result<f64> {
    let bv = b.vector();
    if a.len() != w.0.nrows() || bv.len() != w.0.ncols() {
        return Err(Error::Shape(format!(
            "W is {}x{}, action has {} entries and belief {}",
            w.0.nrows(),
            w.0.ncols(),
            a.len(),
            bv.len()
        )));
    }
    finite(a.dot(&w.0.dot(&bv)), "Q_g")
}

/// Terms of `Q_p`: for every proposed set, `(set, value, δ_j)`.
fn personal_terms(h: &History, proposed: &Selection, choices: &ChoiceSets) -> Vec<(usize, usize, f64)> {
    let open = open_indicator(&detect_choices(h.user(), choices));
    proposed
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|v| (j, v, open[j])))
        .collect()
}

pub fn q_personal(
    h: &History,
    reply: &Utterance,
    prefs: &PersonalPreferences,
    personal_weight: f64,
    choices: &ChoiceSets,
) -> Result<f64> {
    let proposed = extract_proposed_choices(reply, choices)?;
    let sum: f64 = personal_terms(h, &proposed, choices)
        .into_iter()
        .map(|(j, v, delta)| prefs.probs(j)[v] * delta)
        .sum();
    finite(personal_weight * sum, "Q_p")
}

/// Full `Q(H, A)` for `user_id`.
pub fn q_total(h: &History, reply: &Utterance, theta: &PolicyParams, user_id: &str, choices: &ChoiceSets) -> Result<f64> {
    StateScorer::new(h, theta, user_id, choices)?.score(reply)
}

/// Everything about a history needed to score many candidate replies.
pub struct StateScorer<'a> {
    theta: &'a PolicyParams,
    choices: &'a ChoiceSets,
    bags: HistoryBags,
    belief: Array1<f64>,
    /// `W bᵀ`, the gradient of `Q_g` with respect to `a`.
    w_b: Array1<f64>,
    /// `M W bᵀ`: `Q_g` of a reply is the sum of these entries over its tokens.
    token_scores: Array1<f64>,
    open: Vec<f64>,
    prefs: PersonalPreferences,
}

impl<'a> StateScorer<'a> {
    pub fn new(h: &History, theta: &'a PolicyParams, user_id: &str, choices: &'a ChoiceSets) -> Result<Self> {
        let v = theta.vocab_len();
        if let Some(bad) = h.user().iter().chain(h.agent()).find(|u| u.bow().len() != v) {
            return Err(Error::Shape(format!(
                "history encoded over {} tokens, model expects {v}",
                bad.bow().len()
            )));
        }
        let bags = HistoryBags::new(h, v, theta.memory);
        let belief = bags.belief(&theta.projection).vector();
        let w_b = theta.general.0.dot(&belief);
        let token_scores = theta.projection.0.dot(&w_b);
        Ok(StateScorer {
            theta,
            choices,
            bags,
            belief,
            w_b,
            token_scores,
            open: open_indicator(&detect_choices(h.user(), choices)),
            prefs: theta.prefs_for(user_id, choices),
        })
    }

    pub fn belief(&self) -> &Array1<f64> {
        &self.belief
    }

    fn check_reply(&self, reply: &Utterance) -> Result<()> {
        if reply.bow().len() != self.theta.vocab_len() {
            return Err(Error::Shape(format!(
                "reply encoded over {} tokens, model expects {}",
                reply.bow().len(),
                self.theta.vocab_len()
            )));
        }
        Ok(())
    }

    pub fn general(&self, reply: &Utterance) -> Result<f64> {
        self.check_reply(reply)?;
        finite(reply.bow().active().iter().map(|&t| self.token_scores[t]).sum(), "Q_g")
    }

    pub fn personal(&self, reply: &Utterance) -> Result<f64> {
        let proposed = extract_proposed_choices(reply, self.choices)?;
        let sum: f64 = proposed
            .iter()
            .enumerate()
            .filter_map(|(j, c)| c.map(|v| self.prefs.probs(j)[v] * self.open[j]))
            .sum();
        finite(self.theta.personal_weight * sum, "Q_p")
    }

    pub fn score(&self, reply: &Utterance) -> Result<f64> {
        Ok(self.general(reply)? + self.personal(reply)?)
    }

    pub fn gradient(&self, reply: &Utterance) -> Result<GradBundle> {
        self.check_reply(reply)?;
        let theta = self.theta;
        let d = theta.dim();
        let a = crate::belief::project(reply.bow(), &theta.projection)?;

        // ∂Q/∂W = aᵀ b
        let general = outer(&a, &self.belief);

        // ∂Q/∂M through the action (W bᵀ on every reply token) and through
        // each belief block (bag_k ⊗ (a W)_k).
        let a_w = a.dot(&theta.general.0);
        let mut projection = Array2::zeros((theta.vocab_len(), d));
        for &t in reply.bow().active() {
            projection.row_mut(t).scaled_add(1.0, &self.w_b);
        }
        for (k, bag) in self.bags.0.iter().enumerate() {
            let g = a_w.slice(s![k * d..(k + 1) * d]);
            for (t, &weight) in bag.iter().enumerate() {
                if weight != 0.0 {
                    projection.row_mut(t).scaled_add(weight, &g);
                }
            }
        }

        let proposed = extract_proposed_choices(reply, self.choices)?;
        let mut personal_weight = 0.0;
        let mut logits: Vec<Array1<f64>> = self.prefs.logits.iter().map(|l| Array1::zeros(l.len())).collect();
        for (j, c) in proposed.iter().enumerate() {
            let Some(v) = *c else { continue };
            if self.open[j] == 0.0 {
                continue;
            }
            let p = self.prefs.probs(j);
            personal_weight += p[v];
            // ∂p_v/∂z_k = p_v (1[k=v] - p_k)
            let scale = theta.personal_weight * p[v];
            for k in 0..p.len() {
                let ind = if k == v { 1.0 } else { 0.0 };
                logits[j][k] = scale * (ind - p[k]);
            }
        }
        Ok(GradBundle {
            projection,
            general,
            personal_weight,
            logits,
        })
    }
}

fn outer(x: &Array1<f64>, y: &Array1<f64>) -> Array2<f64> {
    let xc = x.view().insert_axis(Axis(1));
    let yr = y.view().insert_axis(Axis(0));
    xc.dot(&yr)
}

/// Analytic gradient of `Q(H, A)` for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub projection: Array2<f64>,
    pub general: Array2<f64>,
    pub personal_weight: f64,
    /// Gradient for the acting user's logits (or the shared vector).
    pub logits: Vec<Array1<f64>>,
}

pub fn grad_q(h: &History, reply: &Utterance, theta: &PolicyParams, user_id: &str, choices: &ChoiceSets) -> Result<GradBundle> {
    StateScorer::new(h, theta, user_id, choices)?.gradient(reply)
}

/// Scores every candidate; errors on an empty list.
pub fn score_candidates(
    h: &History,
    candidates: &[Utterance],
    theta: &PolicyParams,
    user_id: &str,
    choices: &ChoiceSets,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scorer = StateScorer::new(h, theta, user_id, choices)?;
    candidates.iter().map(|c| scorer.score(c)).collect()
}

/// η-greedy choice: with probability `eta` a uniformly random candidate,
/// otherwise the first candidate with maximal Q. Returns the index and
/// whether the choice was random.
pub fn select_action<R: Rng + ?Sized>(
    h: &History,
    candidates: &[Utterance],
    theta: &PolicyParams,
    user_id: &str,
    eta: f64,
    choices: &ChoiceSets,
    rng: &mut R,
) -> Result<(usize, bool)> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("exploration rate must lie in [0, 1], got {eta}")));
    }
    if eta > 0.0 && rng.random::<f64>() < eta {
        let idx: Vec<usize> = (0..candidates.len()).collect();
        return Ok((*idx.choose(rng).expect("non-empty"), true));
    }
    let scores = score_candidates(h, candidates, theta, user_id, choices)?;
    let best = argmax_first(scores.iter().copied())
        .ok_or_else(|| Error::Numeric("no finite candidate score".into()))?;
    Ok((best, false))
}

// --- checkpoints -----------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "petal-checkpoint/1";

/// On-disk parameter bundle. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dim: usize,
    pub vocab_len: usize,
    pub memory_factor: f64,
    pub pref_scope: PrefScope,
    pub projection: Vec<f64>,
    pub general: Vec<f64>,
    pub personal_weight: f64,
    #[serde(default)]
    pub preferences: BTreeMap<String, Vec<Vec<f64>>>,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_params(theta: &PolicyParams, config_hash: &str) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            dim: theta.dim(),
            vocab_len: theta.vocab_len(),
            memory_factor: theta.memory.get(),
            pref_scope: theta.scope,
            projection: theta.projection.0.iter().copied().collect(),
            general: theta.general.0.iter().copied().collect(),
            personal_weight: theta.personal_weight,
            preferences: theta
                .prefs
                .iter()
                .map(|(k, p)| (k.clone(), p.logits.iter().map(|l| l.to_vec()).collect()))
                .collect(),
            config_hash: config_hash.into(),
        }
    }

    pub fn into_params(self) -> Result<PolicyParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unsupported checkpoint format `{}`", self.format)));
        }
        let (v, d) = (self.vocab_len, self.dim);
        let projection = Array2::from_shape_vec((v, d), self.projection)
            .map_err(|e| Error::Shape(format!("projection: {e}")))?;
        let general = Array2::from_shape_vec((d, 4 * d), self.general)
            .map_err(|e| Error::Shape(format!("general weights: {e}")))?;
        Ok(PolicyParams {
            projection: ProjectionMatrix(projection),
            general: GeneralWeights(general),
            personal_weight: self.personal_weight,
            prefs: self
                .preferences
                .into_iter()
                .map(|(k, ls)| {
                    (
                        k,
                        PersonalPreferences {
                            logits: ls.into_iter().map(Array1::from).collect(),
                        },
                    )
                })
                .collect(),
            scope: self.pref_scope,
            memory: MemoryFactor::new(self.memory_factor)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn save_params(theta: &PolicyParams, config_hash: &str, path: &Path) -> Result<()> {
    Checkpoint::from_params(theta, config_hash).save(path)
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    Checkpoint::load(path)?.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::{belief_from_history, project};
    use crate::corpus::{ChoiceSetDef, Domain, Vocabulary};
    use crate::rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    pub(crate) fn toy_domain() -> Domain {
        let vocab = Vocabulary::new([
            "i", "want", "coffee", "what", "drink", "size", "please", "pay", "same", "as", "before",
            "latte", "mocha", "americano", "macchiato", "hot", "iced", "tall", "grande", "yes", "no",
        ])
        .unwrap();
        Domain::new(
            vocab,
            vec![
                ChoiceSetDef {
                    name: "coffee_type".into(),
                    values: ["latte", "mocha", "americano", "macchiato"].map(String::from).to_vec(),
                },
                ChoiceSetDef { name: "temperature".into(), values: vec!["hot".into(), "iced".into()] },
                ChoiceSetDef { name: "size".into(), values: vec!["tall".into(), "grande".into()] },
            ],
        )
        .unwrap()
    }

    fn random_params(seed: u64, v: usize, d: usize, scope: PrefScope) -> PolicyParams {
        let cfg = ModelConfig {
            dim: d,
            projection_std: 0.5,
            general_std: 0.5,
            personal_weight_init: 0.7,
            memory_factor: 0.8,
        };
        PolicyParams::init(v, &cfg, scope, &mut rng::stream(seed, &[])).unwrap()
    }

    fn random_utt<R: Rng>(v: usize, rng: &mut R) -> Utterance {
        let n = rng.random_range(0..5);
        Utterance::from_ids((0..n).map(|_| rng.random_range(0..v)).collect(), v)
    }

    /// Replies that propose at most one value per choice set.
    fn random_reply<R: Rng>(dom: &Domain, rng: &mut R) -> Utterance {
        let mut ids: Vec<usize> = (0..rng.random_range(0..4))
            .map(|_| rng.random_range(0..11))
            .collect();
        for j in 0..dom.choices.len() {
            if rng.random_bool(0.5) {
                let k = rng.random_range(0..dom.choices.cardinality(j));
                ids.push(dom.choices.value_id(j, k));
            }
        }
        Utterance::from_ids(ids, dom.vocab.len())
    }

    fn random_history<R: Rng>(dom: &Domain, turns: usize, rng: &mut R) -> History {
        let v = dom.vocab.len();
        let mut h = History::new(random_utt(v, rng));
        for _ in 0..turns {
            h.push(random_reply(dom, rng), random_utt(v, rng));
        }
        h
    }

    #[test]
    fn toy_bilinear_value() {
        let b = BeliefState {
            o_hist: Array1::from(vec![1.0]),
            o_cur: Array1::from(vec![0.0]),
            a_hist: Array1::from(vec![0.0]),
            a_last: Array1::from(vec![0.0]),
        };
        let w = GeneralWeights(Array2::from_shape_vec((1, 4), vec![3.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(q_general(&b, &Array1::from(vec![2.0]), &w).unwrap(), 6.0);
        assert_eq!(q_general(&b, &Array1::from(vec![2.0]), &GeneralWeights::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn kron_layout() {
        let b = Array1::from(vec![1.0, 0.0, 0.0, 0.0]);
        let a = Array1::from(vec![2.0, 3.0]);
        let k = kron(&b, &a);
        assert_eq!(k.to_vec(), vec![2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let k = kron(&Array1::from(vec![0.0, 1.0]), &Array1::from(vec![0.0, 0.0, 1.0]));
        assert_eq!(k.iter().position(|&x| x == 1.0), Some(5));
        assert_eq!(k.sum(), 1.0);
    }

    #[test]
    fn kron_identity_on_random_instances() {
        let mut r = rng::stream(11, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let d = r.random_range(1..7);
            let a = Array1::from_shape_simple_fn(d, || normal.sample(&mut r));
            let parts: [Array1<f64>; 4] = std::array::from_fn(|_| Array1::from_shape_simple_fn(d, || normal.sample(&mut r)));
            let b = BeliefState {
                o_hist: parts[0].clone(),
                o_cur: parts[1].clone(),
                a_hist: parts[2].clone(),
                a_last: parts[3].clone(),
            };
            let w = GeneralWeights(Array2::from_shape_simple_fn((d, 4 * d), || normal.sample(&mut r)));
            let lhs = q_general(&b, &a, &w).unwrap();
            let rhs = kron(&b.vector(), &a).dot(&w.vec());
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn personal_term_cases() {
        let dom = toy_domain();
        let prefs = PersonalPreferences::uniform(&dom.choices);
        let h = History::new(dom.utterance("i want coffee").unwrap());
        let none = dom.utterance("what drink").unwrap();
        assert_eq!(q_personal(&h, &none, &prefs, 1.0, &dom.choices).unwrap(), 0.0);
        let one = dom.utterance("latte please").unwrap();
        assert!((q_personal(&h, &one, &prefs, 1.0, &dom.choices).unwrap() - 0.25).abs() < 1e-15);

        let mut closed = History::new(dom.utterance("latte hot tall").unwrap());
        closed.push(none.clone(), dom.utterance("yes").unwrap());
        let full = dom.utterance("same as before mocha iced grande").unwrap();
        assert_eq!(q_personal(&closed, &full, &prefs, 1.0, &dom.choices).unwrap(), 0.0);
    }

    #[test]
    fn q_total_decomposes() {
        let dom = toy_domain();
        let v = dom.vocab.len();
        let mut theta = random_params(5, v, 4, PrefScope::PerUser);
        let mut r = rng::stream(6, &[]);
        let h = random_history(&dom, 3, &mut r);
        let reply = dom.utterance("same as before mocha hot").unwrap();
        let b = belief_from_history(&h, &theta.projection, theta.memory).unwrap();
        let a = project(reply.bow(), &theta.projection).unwrap();
        let g = q_general(&b, &a, &theta.general).unwrap();
        let total = q_total(&h, &reply, &theta, "u", &dom.choices).unwrap();
        let p = q_personal(&h, &reply, &theta.prefs_for("u", &dom.choices), theta.personal_weight, &dom.choices).unwrap();
        assert!((total - (g + p)).abs() < 1e-12);

        theta.personal_weight = 0.0;
        assert!((q_total(&h, &reply, &theta, "u", &dom.choices).unwrap() - g).abs() < 1e-12);

        theta.general = GeneralWeights::zeros(4);
        assert_eq!(q_total(&h, &reply, &theta, "u", &dom.choices).unwrap(), 0.0);
    }

    #[test]
    fn users_differ_only_through_personal_term() {
        let dom = toy_domain();
        let mut theta = random_params(8, dom.vocab.len(), 4, PrefScope::PerUser);
        theta.prefs_entry("alice", &dom.choices).logits[0][0] = 3.0;
        theta.prefs_entry("bob", &dom.choices).logits[0][1] = 3.0;
        let h = History::new(dom.utterance("i want coffee").unwrap());
        let reply = dom.utterance("latte please").unwrap();
        let qa = q_total(&h, &reply, &theta, "alice", &dom.choices).unwrap();
        let qb = q_total(&h, &reply, &theta, "bob", &dom.choices).unwrap();
        let pa = q_personal(&h, &reply, &theta.prefs_for("alice", &dom.choices), theta.personal_weight, &dom.choices).unwrap();
        let pb = q_personal(&h, &reply, &theta.prefs_for("bob", &dom.choices), theta.personal_weight, &dom.choices).unwrap();
        assert!(qa != qb);
        assert!(((qa - pa) - (qb - pb)).abs() < 1e-12);
    }

    #[test]
    fn shared_scope_uses_one_vector() {
        let dom = toy_domain();
        let mut theta = random_params(9, dom.vocab.len(), 3, PrefScope::Shared);
        theta.prefs_entry("alice", &dom.choices);
        theta.prefs_entry("bob", &dom.choices);
        assert_eq!(theta.prefs.len(), 1);
        assert!(theta.prefs.contains_key(SHARED_PREFS));
    }

    #[test]
    fn gradient_closed_forms() {
        let dom = toy_domain();
        let theta = random_params(10, dom.vocab.len(), 3, PrefScope::PerUser);
        let mut r = rng::stream(12, &[]);
        let h = random_history(&dom, 2, &mut r);
        let reply = random_reply(&dom, &mut r);
        let g = grad_q(&h, &reply, &theta, "u", &dom.choices).unwrap();
        let b = belief_from_history(&h, &theta.projection, theta.memory).unwrap().vector();
        let a = project(reply.bow(), &theta.projection).unwrap();
        assert!((g.general.clone() - outer(&a, &b)).iter().all(|x| x.abs() < 1e-12));
        let wp = q_personal(&h, &reply, &theta.prefs_for("u", &dom.choices), 1.0, &dom.choices).unwrap();
        assert!((g.personal_weight - wp).abs() < 1e-12);
    }

    /// Central finite differences of `q_total` for every parameter group.
    fn fd_check(seed: u64) {
        let dom = toy_domain();
        let v = dom.vocab.len();
        let mut r = rng::stream(seed, &[1]);
        let mut theta = random_params(seed, v, 3, PrefScope::PerUser);
        {
            let p = theta.prefs_entry("u", &dom.choices);
            for l in p.logits.iter_mut() {
                l.mapv_inplace(|_| r.random_range(-1.0..1.0));
            }
        }
        let turns = r.random_range(0..5);
        let h = random_history(&dom, turns, &mut r);
        let reply = random_reply(&dom, &mut r);
        let g = grad_q(&h, &reply, &theta, "u", &dom.choices).unwrap();
        let step = 1e-5;
        let q = |t: &PolicyParams| q_total(&h, &reply, t, "u", &dom.choices).unwrap();
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-8,
                "{what}: analytic {analytic} numeric {numeric}"
            );
        };
        for idx in 0..theta.projection.0.len() {
            let (i, j) = (idx / 3, idx % 3);
            let mut p = theta.clone();
            p.projection.0[[i, j]] += step;
            let mut m = theta.clone();
            m.projection.0[[i, j]] -= step;
            check(g.projection[[i, j]], (q(&p) - q(&m)) / (2.0 * step), "M");
        }
        for i in 0..3 {
            for j in 0..12 {
                let mut p = theta.clone();
                p.general.0[[i, j]] += step;
                let mut m = theta.clone();
                m.general.0[[i, j]] -= step;
                check(g.general[[i, j]], (q(&p) - q(&m)) / (2.0 * step), "W");
            }
        }
        let mut p = theta.clone();
        p.personal_weight += step;
        let mut m = theta.clone();
        m.personal_weight -= step;
        check(g.personal_weight, (q(&p) - q(&m)) / (2.0 * step), "w_p");
        for j in 0..dom.choices.len() {
            for k in 0..dom.choices.cardinality(j) {
                let mut p = theta.clone();
                p.prefs.get_mut("u").unwrap().logits[j][k] += step;
                let mut m = theta.clone();
                m.prefs.get_mut("u").unwrap().logits[j][k] -= step;
                check(g.logits[j][k], (q(&p) - q(&m)) / (2.0 * step), "logits");
            }
        }
        theta.personal_weight = 0.0;
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            fd_check(seed);
        }
    }

    #[test]
    fn select_action_rules() {
        let dom = toy_domain();
        let mut theta = random_params(13, dom.vocab.len(), 3, PrefScope::PerUser);
        let h = History::new(dom.utterance("i want coffee").unwrap());
        let mut r = rng::stream(14, &[]);
        let only = vec![dom.utterance("please pay").unwrap()];
        assert_eq!(select_action(&h, &only, &theta, "u", 0.0, &dom.choices, &mut r).unwrap(), (0, false));
        assert!(matches!(
            select_action(&h, &[], &theta, "u", 0.0, &dom.choices, &mut r),
            Err(Error::EmptyCandidates)
        ));

        // Q values (0.2, 0.9, 0.9): only the personal term, w_p = 1.
        theta.general = GeneralWeights::zeros(3);
        theta.personal_weight = 1.0;
        let p = theta.prefs_entry("u", &dom.choices);
        p.logits[0] = Array1::from(vec![0.2f64.ln(), 0.4f64.ln(), 0.2f64.ln(), 0.2f64.ln()]);
        p.logits[1] = Array1::from(vec![0.9f64.ln(), 0.1f64.ln()]);
        let cands = vec![
            dom.utterance("latte").unwrap(),
            dom.utterance("hot").unwrap(),
            dom.utterance("mocha iced").unwrap(),
        ];
        let scores = score_candidates(&h, &cands, &theta, "u", &dom.choices).unwrap();
        assert!((scores[0] - 0.2).abs() < 1e-12 && (scores[1] - 0.9).abs() < 1e-12);
        assert!((scores[2] - 0.5).abs() < 1e-12);
        let cands = vec![cands[0].clone(), cands[1].clone(), cands[1].clone()];
        assert_eq!(select_action(&h, &cands, &theta, "u", 0.0, &dom.choices, &mut r).unwrap(), (1, false));
    }

    #[test]
    fn full_exploration_is_uniform() {
        let dom = toy_domain();
        let theta = random_params(15, dom.vocab.len(), 3, PrefScope::PerUser);
        let h = History::new(dom.utterance("i want coffee").unwrap());
        let cands: Vec<Utterance> = ["latte", "mocha", "hot", "tall"].iter().map(|s| dom.utterance(s).unwrap()).collect();
        let mut r = rng::stream(16, &[]);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (i, random) = select_action(&h, &cands, &theta, "u", 1.0, &dom.choices, &mut r).unwrap();
            assert!(random);
            counts[i] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, 99.9th percentile
        assert!(chi2 < 16.27, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(general_param_count(50, 1500), 85_000);
        let dom = toy_domain();
        let theta = random_params(1, dom.vocab.len(), 5, PrefScope::PerUser);
        assert_eq!(theta.shared_param_count(), 4 * 25 + dom.vocab.len() * 5 + 1);
        assert_eq!(PersonalPreferences::uniform(&dom.choices).param_count(), 8);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dom = toy_domain();
        let mut theta = random_params(17, dom.vocab.len(), 4, PrefScope::PerUser);
        theta.prefs_entry("u1", &dom.choices).logits[1][0] = 0.1 + 0.2;
        theta.personal_weight = std::f64::consts::PI / 7.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_params(&theta, "abc", &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.checksum(), theta.checksum());
        assert_eq!(back, theta);
        let first = fs::read(&path).unwrap();
        save_params(&back, "abc", &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    proptest! {
        #[test]
        fn personal_term_is_bounded(seed in any::<u64>(), wp in -5.0f64..5.0) {
            let dom = toy_domain();
            let mut r = rng::stream(seed, &[]);
            let mut theta = random_params(seed, dom.vocab.len(), 3, PrefScope::PerUser);
            theta.personal_weight = wp;
            let p = theta.prefs_entry("u", &dom.choices);
            for l in p.logits.iter_mut() {
                l.mapv_inplace(|_| r.random_range(-4.0..4.0));
            }
            let h = random_history(&dom, 2, &mut r);
            let reply = random_reply(&dom, &mut r);
            let q = q_personal(&h, &reply, &theta.prefs_for("u", &dom.choices), wp, &dom.choices).unwrap();
            prop_assert!(q.abs() <= wp.abs() * dom.choices.len() as f64 + 1e-12);
            for j in 0..dom.choices.len() {
                let s = theta.prefs_for("u", &dom.choices).probs(j);
                prop_assert!((s.sum() - 1.0).abs() < 1e-12);
                prop_assert!(s.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn other_users_are_isolated(seed in any::<u64>(), bump in -3.0f64..3.0) {
            let dom = toy_domain();
            let mut r = rng::stream(seed, &[2]);
            let mut theta = random_params(seed, dom.vocab.len(), 3, PrefScope::PerUser);
            let h = random_history(&dom, 2, &mut r);
            let reply = random_reply(&dom, &mut r);
            let before = q_total(&h, &reply, &theta, "v", &dom.choices).unwrap();
            theta.prefs_entry("u", &dom.choices).logits[0][1] += bump;
            prop_assert_eq!(q_total(&h, &reply, &theta, "v", &dom.choices).unwrap(), before);
        }

        #[test]
        fn greedy_choice_ignores_constant_shift(seed in any::<u64>(), shift in -10.0f64..10.0) {
            let dom = toy_domain();
            let mut r = rng::stream(seed, &[3]);
            let theta = random_params(seed, dom.vocab.len(), 3, PrefScope::PerUser);
            let h = random_history(&dom, 2, &mut r);
            let cands: Vec<Utterance> = (0..6).map(|_| random_reply(&dom, &mut r)).collect();
            let scores = score_candidates(&h, &cands, &theta, "u", &dom.choices).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(argmax_first(scores), argmax_first(shifted));
        }
    }
}
