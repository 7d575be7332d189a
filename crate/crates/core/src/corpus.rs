//! Logged dialogues, vocabularies and choice sets.
//!
//! Utterances are bags of words over a fixed vocabulary. Choice detection is
//! lexical: a token that belongs to a choice set's value list counts as a
//! mention of that value.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '_')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() {
                return Err(Error::Validation("empty token in vocabulary".into()));
            }
            if vocab.index.contains_key(&tok) {
                return Err(Error::Validation(format!("duplicate vocabulary token `{tok}`")));
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len());
            vocab.tokens.push(tok);
        }
        if vocab.tokens.is_empty() {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        Ok(vocab)
    }

    /// Builds a vocabulary in first-appearance order, skipping repeats.
    pub fn from_appearance<'a, I>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = std::collections::HashSet::new();
        let ordered: Vec<&str> = tokens.into_iter().filter(|t| seen.insert(*t)).collect();
        Vocabulary::new(ordered)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Binary bag-of-words vector, stored sparsely as the sorted set of active
/// indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BowVector {
    len: usize,
    active: Vec<usize>,
}

impl BowVector {
    pub fn zeros(len: usize) -> Self {
        BowVector {
            len,
            active: Vec::new(),
        }
    }

    pub fn from_ids(len: usize, ids: &[usize]) -> Self {
        let mut active = ids.to_vec();
        active.sort_unstable();
        active.dedup();
        debug_assert!(active.last().is_none_or(|&k| k < len));
        BowVector { len, active }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn get(&self, k: usize) -> u8 {
        u8::from(self.active.binary_search(&k).is_ok())
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut out = vec![0; self.len];
        for &k in &self.active {
            out[k] = 1;
        }
        out
    }
}

pub fn bow_encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<BowVector> {
    let ids = token_ids(tokens, vocab)?;
    Ok(BowVector::from_ids(vocab.len(), &ids))
}

fn token_ids<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| {
            vocab
                .id(t.as_ref())
                .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
        })
        .collect()
}

/// One side of a turn: ordered token ids plus the binary encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    ids: Vec<usize>,
    bow: BowVector,
}

impl Utterance {
    pub fn new<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Self> {
        let ids = token_ids(tokens, vocab)?;
        Ok(Utterance::from_ids(ids, vocab.len()))
    }

    pub fn from_ids(ids: Vec<usize>, vocab_len: usize) -> Self {
        let bow = BowVector::from_ids(vocab_len, &ids);
        Utterance { ids, bow }
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        Utterance::new(&tokenize(text), vocab)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn bow(&self) -> &BowVector {
        &self.bow
    }

    pub fn tokens<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.ids.iter().map(|&i| vocab.token(i)).collect()
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.tokens(vocab).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub user: Utterance,
    pub agent: Utterance,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub user_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// History up to and including the user utterance of turn `i`.
    pub fn history_at(&self, i: usize) -> History {
        let mut h = History::new(self.turns[0].user.clone());
        for t in 1..=i {
            h.push(self.turns[t - 1].agent.clone(), self.turns[t].user.clone());
        }
        h
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.turns.iter().map(|t| t.reward).sum()
    }
}

/// Dialogue history `{(O_k, A_k)}_{k<i}, O_i`: always one more user
/// utterance than agent replies.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct History {
    user: Vec<Utterance>,
    agent: Vec<Utterance>,
}

impl History {
    pub fn new(opening: Utterance) -> Self {
        History {
            user: vec![opening],
            agent: Vec::new(),
        }
    }

    pub fn from_parts(user: Vec<Utterance>, agent: Vec<Utterance>) -> Result<Self> {
        if user.len() != agent.len() + 1 {
            return Err(Error::Validation(format!(
                "history needs one more user utterance than agent replies, got {} and {}",
                user.len(),
                agent.len()
            )));
        }
        Ok(History { user, agent })
    }

    pub fn push(&mut self, agent: Utterance, user: Utterance) {
        self.agent.push(agent);
        self.user.push(user);
    }

    pub fn extended(&self, agent: &Utterance, user: &Utterance) -> History {
        let mut h = self.clone();
        h.push(agent.clone(), user.clone());
        h
    }

    /// Turn index `i` of the current user utterance.
    pub fn index(&self) -> usize {
        self.agent.len()
    }

    pub fn user(&self) -> &[Utterance] {
        &self.user
    }

    pub fn agent(&self) -> &[Utterance] {
        &self.agent
    }

    pub fn current(&self) -> &Utterance {
        self.user.last().expect("history is never empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSetDef {
    pub name: String,
    pub values: Vec<String>,
}

/// Choice sets bound to a vocabulary, with a token → (set, value) lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceSets {
    defs: Vec<ChoiceSetDef>,
    lookup: Vec<Option<(usize, usize)>>,
    value_ids: Vec<Vec<usize>>,
}

/// Per choice set, the index of the chosen (or proposed) value, if any.
pub type Selection = Vec<Option<usize>>;

impl ChoiceSets {
    pub fn new(defs: Vec<ChoiceSetDef>, vocab: &Vocabulary) -> Result<Self> {
        let mut lookup: Vec<Option<(usize, usize)>> = vec![None; vocab.len()];
        let mut value_ids = Vec::with_capacity(defs.len());
        for (j, def) in defs.iter().enumerate() {
            if def.values.is_empty() {
                return Err(Error::Validation(format!("choice set `{}` has no values", def.name)));
            }
            let mut ids = Vec::with_capacity(def.values.len());
            for (k, v) in def.values.iter().enumerate() {
                let id = vocab.id(v).ok_or_else(|| Error::UnknownToken(v.clone()))?;
                if let Some((other, _)) = lookup[id] {
                    return Err(Error::Validation(format!(
                        "value `{v}` appears in choice sets `{}` and `{}`",
                        defs[other].name, def.name
                    )));
                }
                lookup[id] = Some((j, k));
                ids.push(id);
            }
            value_ids.push(ids);
        }
        Ok(ChoiceSets {
            defs,
            lookup,
            value_ids,
        })
    }

    /// Number of choice sets `m`.
    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[ChoiceSetDef] {
        &self.defs
    }

    pub fn cardinality(&self, set: usize) -> usize {
        self.defs[set].values.len()
    }

    pub fn position(&self, set_name: &str) -> Option<usize> {
        self.defs.iter().position(|d| d.name == set_name)
    }

    pub fn value_token(&self, set: usize, value: usize) -> &str {
        &self.defs[set].values[value]
    }

    pub fn value_id(&self, set: usize, value: usize) -> usize {
        self.value_ids[set][value]
    }

    pub fn classify(&self, token_id: usize) -> Option<(usize, usize)> {
        self.lookup.get(token_id).copied().flatten()
    }

    pub fn value_index(&self, set: usize, token: &str) -> Option<usize> {
        self.defs[set].values.iter().position(|v| v == token)
    }
}

/// For each choice set, the most recent value the user mentioned anywhere in
/// `user_utterances`. Agent replies never count as choices.
pub fn detect_choices(user_utterances: &[Utterance], choices: &ChoiceSets) -> Selection {
    let mut chosen = vec![None; choices.len()];
    for utt in user_utterances {
        for &id in utt.ids() {
            if let Some((set, value)) = choices.classify(id) {
                chosen[set] = Some(value);
            }
        }
    }
    chosen
}

/// `δ(C_j, H)`: 1 while the user has not chosen a value for set `j`.
pub fn open_indicator(chosen: &Selection) -> Vec<f64> {
    chosen.iter().map(|c| if c.is_none() { 1.0 } else { 0.0 }).collect()
}

/// Choice values proposed by a single agent reply.
pub fn extract_proposed_choices(reply: &Utterance, choices: &ChoiceSets) -> Result<Selection> {
    let mut proposed: Selection = vec![None; choices.len()];
    for &id in reply.ids() {
        if let Some((set, value)) = choices.classify(id) {
            match proposed[set] {
                Some(prev) if prev != value => {
                    return Err(Error::AmbiguousProposal {
                        set: choices.defs[set].name.clone(),
                        first: choices.value_token(set, prev).to_string(),
                        second: choices.value_token(set, value).to_string(),
                    })
                }
                _ => proposed[set] = Some(value),
            }
        }
    }
    Ok(proposed)
}

/// Vocabulary plus the choice sets defined over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub vocab: Vocabulary,
    pub choices: ChoiceSets,
}

impl Domain {
    pub fn new(vocab: Vocabulary, choice_defs: Vec<ChoiceSetDef>) -> Result<Self> {
        let choices = ChoiceSets::new(choice_defs, &vocab)?;
        Ok(Domain { vocab, choices })
    }

    pub fn utterance(&self, text: &str) -> Result<Utterance> {
        Utterance::parse(text, &self.vocab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub domain: Domain,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    #[serde(default)]
    choice_sets: Vec<ChoiceSetDef>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    user: Vec<String>,
    agent: Vec<String>,
    reward: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    user_id: String,
    turns: Vec<TurnRecord>,
}

impl Corpus {
    pub fn new(domain: Domain, dialogues: Vec<Dialogue>) -> Result<Self> {
        if dialogues.is_empty() {
            return Err(Error::Validation("no dialogues".into()));
        }
        for d in &dialogues {
            if d.turns.is_empty() {
                return Err(Error::Validation(format!(
                    "dialogue for user `{}` has no turns",
                    d.user_id
                )));
            }
        }
        Ok(Corpus { domain, dialogues })
    }

    pub fn user_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.dialogues.iter().map(|d| d.user_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn dialogues_for<'a>(&'a self, user_id: &'a str) -> impl Iterator<Item = &'a Dialogue> + 'a {
        self.dialogues.iter().filter(move |d| d.user_id == user_id)
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        let header = HeaderRecord {
            vocab: Some(self.domain.vocab.tokens().to_vec()),
            choice_sets: self.domain.choices.defs().to_vec(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w).map_err(|e| Error::io("<corpus>", e))?;
        let vocab = &self.domain.vocab;
        for d in &self.dialogues {
            let rec = DialogueRecord {
                user_id: d.user_id.clone(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        user: t.user.tokens(vocab).into_iter().map(String::from).collect(),
                        agent: t.agent.tokens(vocab).into_iter().map(String::from).collect(),
                        reward: t.reward,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w).map_err(|e| Error::io("<corpus>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.to_writer(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses the JSONL format. `origin` labels error messages.
    pub fn from_reader<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut header: Option<HeaderRecord> = None;
        let mut records: Vec<(usize, DialogueRecord)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            let is_header = records.is_empty()
                && header.is_none()
                && value.get("turns").is_none()
                && (value.get("vocab").is_some() || value.get("choice_sets").is_some());
            if is_header {
                header = Some(
                    serde_json::from_value(value).map_err(|e| parse_err(lineno, e.to_string()))?,
                );
            } else {
                let rec: DialogueRecord =
                    serde_json::from_value(value).map_err(|e| parse_err(lineno, e.to_string()))?;
                records.push((lineno, rec));
            }
        }
        if records.is_empty() {
            return Err(Error::Validation("no dialogues".into()));
        }
        let header = header.unwrap_or(HeaderRecord {
            vocab: None,
            choice_sets: Vec::new(),
        });
        let vocab = match header.vocab {
            Some(tokens) => Vocabulary::new(tokens)?,
            None => {
                let all = records.iter().flat_map(|(_, r)| {
                    r.turns
                        .iter()
                        .flat_map(|t| t.user.iter().chain(t.agent.iter()).map(String::as_str))
                });
                let values = header
                    .choice_sets
                    .iter()
                    .flat_map(|c| c.values.iter().map(String::as_str));
                Vocabulary::from_appearance(all.chain(values))?
            }
        };
        let domain = Domain::new(vocab, header.choice_sets)?;
        let mut dialogues = Vec::with_capacity(records.len());
        for (lineno, rec) in records {
            if rec.turns.is_empty() {
                return Err(parse_err(lineno, "dialogue has no turns".into()));
            }
            let turns = rec
                .turns
                .into_iter()
                .map(|t| {
                    Ok(Turn {
                        user: Utterance::new(&t.user, &domain.vocab)?,
                        agent: Utterance::new(&t.agent, &domain.vocab)?,
                        reward: t.reward,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::UnknownToken(tok) => Error::Validation(format!(
                        "{}: line {lineno}: token `{tok}` is not in the declared vocabulary",
                        origin.display()
                    )),
                    other => other,
                })?;
            dialogues.push(Dialogue {
                user_id: rec.user_id,
                turns,
            });
        }
        Corpus::new(domain, dialogues)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_reader(BufReader::new(f), path)
}
