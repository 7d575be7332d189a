//! Surface forms for agent acts and simulated user reactions.
//!
//! A pattern is a space-separated token sequence. `{set}` stands for one value
//! of the named choice set; in user patterns `{values}` expands to a list of
//! value tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChoiceSetDef, ChoiceSets, Domain, Selection, Utterance, Vocabulary};
use crate::error::{Error, Result};

/// Internal meaning of an agent reply. The learner only ever sees the
/// rendered tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DialogueAct {
    AskSlot(usize),
    Suggest(Selection),
    RequestPayment,
    Greet,
    AckInform,
}

impl DialogueAct {
    pub fn is_suggest(&self) -> bool {
        matches!(self, DialogueAct::Suggest(_))
    }
}

/// What the simulated user says back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserAct {
    Open,
    Inform,
    Confirm,
    Decline,
    Paid,
    ComplainRepeat,
    ComplainEarly,
    Confused,
    Ack,
}

impl UserAct {
    fn key(self) -> &'static str {
        match self {
            UserAct::Open => "user_open",
            UserAct::Inform => "user_inform",
            UserAct::Confirm => "user_confirm",
            UserAct::Decline => "user_decline",
            UserAct::Paid => "user_paid",
            UserAct::ComplainRepeat => "user_complain_repeat",
            UserAct::ComplainEarly => "user_complain_early",
            UserAct::Confused => "user_confused",
            UserAct::Ack => "user_ack",
        }
    }

    const ALL: [UserAct; 9] = [
        UserAct::Open,
        UserAct::Inform,
        UserAct::Confirm,
        UserAct::Decline,
        UserAct::Paid,
        UserAct::ComplainRepeat,
        UserAct::ComplainEarly,
        UserAct::Confused,
        UserAct::Ack,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(usize),
    Values,
}

#[derive(Debug, Clone, PartialEq)]
struct AgentTemplate {
    key: String,
    kind: AgentKind,
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AgentKind {
    Ask(usize),
    Suggest,
    RequestPayment,
    Greet,
    AckInform,
}

/// Template file contents: act name → pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateSpec(pub BTreeMap<String, String>);

impl TemplateSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Every literal token, in key order, then every choice value.
    pub fn vocabulary(&self, defs: &[ChoiceSetDef]) -> Result<Vocabulary> {
        let mut seen = std::collections::HashSet::new();
        let mut tokens = Vec::new();
        let values: std::collections::HashSet<&str> =
            defs.iter().flat_map(|d| d.values.iter().map(String::as_str)).collect();
        for pattern in self.0.values() {
            for tok in pattern.split_whitespace() {
                if tok.starts_with('{') || values.contains(tok) {
                    continue;
                }
                if seen.insert(tok.to_string()) {
                    tokens.push(tok.to_string());
                }
            }
        }
        for d in defs {
            for v in &d.values {
                if seen.insert(v.clone()) {
                    tokens.push(v.clone());
                }
            }
        }
        Vocabulary::new(tokens)
    }
}

/// Compiled templates for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    agent: Vec<AgentTemplate>,
    user: BTreeMap<&'static str, Vec<Piece>>,
    vocab_len: usize,
    word_ids: BTreeMap<String, usize>,
}

fn compile(pattern: &str, choices: &ChoiceSets, allow_values: bool) -> Result<Vec<Piece>> {
    pattern
        .split_whitespace()
        .map(|tok| {
            if let Some(name) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                if name == "values" && allow_values {
                    return Ok(Piece::Values);
                }
                choices
                    .position(name)
                    .map(Piece::Slot)
                    .ok_or_else(|| Error::Validation(format!("template placeholder `{tok}` names no choice set")))
            } else {
                Ok(Piece::Word(tok.to_string()))
            }
        })
        .collect()
}

impl Templates {
    pub fn new(spec: &TemplateSpec, domain: &Domain) -> Result<Self> {
        let choices = &domain.choices;
        let mut agent = Vec::new();
        let mut user = BTreeMap::new();
        for (key, pattern) in &spec.0 {
            if key.starts_with("user_") {
                let act = UserAct::ALL
                    .iter()
                    .find(|a| a.key() == key)
                    .ok_or_else(|| Error::Validation(format!("unknown user template `{key}`")))?;
                user.insert(act.key(), compile(pattern, choices, true)?);
                continue;
            }
            let kind = match key.as_str() {
                "greet" => AgentKind::Greet,
                "ack_inform" => AgentKind::AckInform,
                "request_payment" => AgentKind::RequestPayment,
                k if k.starts_with("ask_") => AgentKind::Ask(
                    choices
                        .position(&k[4..])
                        .ok_or_else(|| Error::Validation(format!("template `{k}` asks for an unknown choice set")))?,
                ),
                k if k.starts_with("suggest_") => AgentKind::Suggest,
                k => return Err(Error::Validation(format!("unknown agent template `{k}`"))),
            };
            let pieces = compile(pattern, choices, false)?;
            let slots: Vec<usize> = pieces
                .iter()
                .filter_map(|p| match p {
                    Piece::Slot(j) => Some(*j),
                    _ => None,
                })
                .collect();
            let mut distinct = slots.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != slots.len() {
                return Err(Error::Validation(format!("template `{key}` repeats a placeholder")));
            }
            match kind {
                AgentKind::Suggest if slots.is_empty() => {
                    return Err(Error::Validation(format!("suggestion template `{key}` has no placeholder")))
                }
                AgentKind::Suggest => {}
                _ if !slots.is_empty() => {
                    return Err(Error::Validation(format!("template `{key}` must not contain placeholders")))
                }
                _ => {}
            }
            for p in &pieces {
                if let Piece::Word(w) = p {
                    if let Some(id) = domain.vocab.id(w) {
                        if choices.classify(id).is_some() {
                            return Err(Error::Validation(format!(
                                "template `{key}` contains the choice value `{w}` literally"
                            )));
                        }
                    }
                }
            }
            agent.push(AgentTemplate { key: key.clone(), kind, pieces });
        }
        for act in UserAct::ALL {
            if !user.contains_key(act.key()) {
                return Err(Error::Validation(format!("missing user template `{}`", act.key())));
            }
        }
        if !agent.iter().any(|t| t.kind == AgentKind::RequestPayment) {
            return Err(Error::Validation("missing template `request_payment`".into()));
        }
        for j in 0..choices.len() {
            if !agent.iter().any(|t| t.kind == AgentKind::Ask(j)) {
                return Err(Error::Validation(format!(
                    "missing template `ask_{}`",
                    choices.defs()[j].name
                )));
            }
        }
        let mut word_ids = BTreeMap::new();
        for p in agent.iter().flat_map(|t| t.pieces.iter()).chain(user.values().flatten()) {
            if let Piece::Word(w) = p {
                let id = domain
                    .vocab
                    .id(w)
                    .ok_or_else(|| Error::UnknownToken(w.clone()))?;
                word_ids.insert(w.clone(), id);
            }
        }
        Ok(Templates {
            agent,
            user,
            vocab_len: domain.vocab.len(),
            word_ids,
        })
    }

    fn render_pieces(&self, pieces: &[Piece], fill: &Selection, values: &[usize], choices: &ChoiceSets) -> Utterance {
        let mut ids = Vec::new();
        for p in pieces {
            match p {
                Piece::Word(w) => ids.push(self.word_ids[w]),
                Piece::Slot(j) => ids.push(choices.value_id(*j, fill[*j].expect("slot filled"))),
                Piece::Values => ids.extend_from_slice(values),
            }
        }
        Utterance::from_ids(ids, self.vocab_len)
    }

    fn slots(t: &AgentTemplate) -> Vec<usize> {
        let mut s: Vec<usize> = t
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(j) => Some(*j),
                _ => None,
            })
            .collect();
        s.sort_unstable();
        s
    }

    /// Whether some template can express `act`.
    pub fn can_render(&self, act: &DialogueAct) -> bool {
        self.find(act).is_some()
    }

    fn find(&self, act: &DialogueAct) -> Option<&AgentTemplate> {
        self.agent.iter().find(|t| match (act, t.kind) {
            (DialogueAct::AskSlot(j), AgentKind::Ask(k)) => *j == k,
            (DialogueAct::RequestPayment, AgentKind::RequestPayment) => true,
            (DialogueAct::Greet, AgentKind::Greet) => true,
            (DialogueAct::AckInform, AgentKind::AckInform) => true,
            (DialogueAct::Suggest(sel), AgentKind::Suggest) => {
                let proposed: Vec<usize> = sel.iter().enumerate().filter_map(|(j, v)| v.map(|_| j)).collect();
                Self::slots(t) == proposed
            }
            _ => false,
        })
    }

    pub fn render(&self, act: &DialogueAct, choices: &ChoiceSets) -> Result<Utterance> {
        let t = self
            .find(act)
            .ok_or_else(|| Error::Validation(format!("no template renders {act:?}")))?;
        let empty = vec![None; choices.len()];
        let fill = match act {
            DialogueAct::Suggest(sel) => sel,
            _ => &empty,
        };
        Ok(self.render_pieces(&t.pieces, fill, &[], choices))
    }

    /// Recovers the act behind a reply, or `None` when no template matches.
    pub fn parse(&self, reply: &Utterance, choices: &ChoiceSets) -> Option<DialogueAct> {
        let ids = reply.ids();
        'templates: for t in &self.agent {
            if t.pieces.len() != ids.len() {
                continue;
            }
            let mut sel: Selection = vec![None; choices.len()];
            for (p, &id) in t.pieces.iter().zip(ids) {
                match p {
                    Piece::Word(w) if self.word_ids[w] == id => {}
                    Piece::Slot(j) => match choices.classify(id) {
                        Some((set, value)) if set == *j => sel[set] = Some(value),
                        _ => continue 'templates,
                    },
                    _ => continue 'templates,
                }
            }
            return Some(match t.kind {
                AgentKind::Ask(j) => DialogueAct::AskSlot(j),
                AgentKind::Suggest => DialogueAct::Suggest(sel),
                AgentKind::RequestPayment => DialogueAct::RequestPayment,
                AgentKind::Greet => DialogueAct::Greet,
                AgentKind::AckInform => DialogueAct::AckInform,
            });
        }
        None
    }

    /// Suggestion template keys, in file order.
    pub fn suggestion_slot_sets(&self) -> Vec<Vec<usize>> {
        self.agent
            .iter()
            .filter(|t| t.kind == AgentKind::Suggest)
            .map(Self::slots)
            .collect()
    }

    /// A user utterance; `values` are vocabulary ids of choice values.
    pub fn user(&self, act: UserAct, values: &[usize]) -> Utterance {
        let pieces = &self.user[act.key()];
        let mut ids = Vec::new();
        for p in pieces {
            match p {
                Piece::Word(w) => ids.push(self.word_ids[w]),
                Piece::Values | Piece::Slot(_) => ids.extend_from_slice(values),
            }
        }
        Utterance::from_ids(ids, self.vocab_len)
    }

    pub fn agent_keys(&self) -> Vec<&str> {
        self.agent.iter().map(|t| t.key.as_str()).collect()
    }
}

pub fn coffee_choice_sets() -> Vec<ChoiceSetDef> {
    let set = |name: &str, values: &[&str]| ChoiceSetDef {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    vec![
        set("coffee_type", &["latte", "cappuccino", "americano", "mocha", "macchiato"]),
        set("temperature", &["hot", "iced"]),
        set("size", &["tall", "grande", "venti"]),
        set("address", &["minsheng", "beiyuan", "zhongguancun", "pudong"]),
    ]
}

pub fn coffee_templates() -> TemplateSpec {
    let pairs = [
        ("greet", "hello what can i get for you"),
        ("ack_inform", "alright"),
        ("request_payment", "please pay for your order"),
        ("ask_coffee_type", "what coffee would you like"),
        ("ask_temperature", "what temperature would you like"),
        ("ask_size", "what size would you like"),
        ("ask_address", "where should we deliver"),
        ("suggest_coffee_type", "would you like a {coffee_type}"),
        ("suggest_temperature", "would you like it {temperature}"),
        ("suggest_size", "would you like a {size} cup"),
        ("suggest_address", "deliver to {address} as usual"),
        ("suggest_all", "same as before {size} {temperature} {coffee_type} to {address}"),
        ("user_open", "i want a cup of coffee"),
        ("user_inform", "{values} please"),
        ("user_confirm", "yes {values}"),
        ("user_decline", "no i want {values} today"),
        ("user_paid", "payment completed"),
        ("user_complain_repeat", "you asked that already"),
        ("user_complain_early", "i have not finished ordering"),
        ("user_confused", "sorry what do you mean"),
        ("user_ack", "ok"),
    ];
    TemplateSpec(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

/// The coffee domain: vocabulary built from the templates plus values.
pub fn coffee_domain() -> Result<(Domain, Templates)> {
    domain_from(&coffee_templates(), coffee_choice_sets())
}

pub fn domain_from(spec: &TemplateSpec, defs: Vec<ChoiceSetDef>) -> Result<(Domain, Templates)> {
    let vocab = spec.vocabulary(&defs)?;
    let domain = Domain::new(vocab, defs)?;
    let templates = Templates::new(spec, &domain)?;
    Ok((domain, templates))
}
