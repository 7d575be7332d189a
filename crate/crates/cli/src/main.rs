use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use petal_core::baselines::BaselineKind;
use petal_core::config::ExperimentConfig;
use petal_core::corpus::{detect_choices, History, Utterance};
use petal_core::evaluation::PolicySet;
use petal_core::exec::Execution;
use petal_core::experiment::{self, DataSet, Layout};
use petal_core::qfunction::{load_params, select_action, PrefScope};
use petal_core::simulator::{EpisodeState, Simulator};
use petal_core::{rng, Error};

/// `println!` that gives up quietly when stdout is closed.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "petal", version, about = "Personalized dialogue policy learning with transfer across users")]
struct Cli {
    /// Key-value config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Method(s) to run, comma separated, or `all` for every method. The
    /// pooled-source baseline alone is `pooled`.
    #[arg(long, global = true)]
    baseline: Option<String>,
    /// Output root, overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate user profiles and logged corpora.
    GenData,
    /// Train the source-side models.
    TrainSource,
    /// Adapt to the target users and save their policies.
    Transfer,
    /// AUC on the held-out target corpus.
    EvalOffline,
    /// Simulated dialogues with the target users.
    EvalOnline,
    /// Talk to a trained policy; `/reset` starts over, `/quit` exits.
    Chat {
        /// Policy directory or a single policy file. Defaults to the saved
        /// policy of `--baseline` for `--seed`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        user: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                Error::Config(_) => 1,
                ref e if e.is_data_error() => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn kinds(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<Vec<BaselineKind>> {
    match cli.baseline.as_deref() {
        None => Ok(vec![cfg.baseline]),
        Some("all") => Ok(BaselineKind::ALL.to_vec()),
        Some(list) => {
            let mut out = Vec::new();
            for k in list.split(',') {
                let kind: BaselineKind = k.parse().map_err(|_| {
                    let names: Vec<&str> = BaselineKind::ALL.iter().map(|k| k.name()).collect();
                    Failure::Usage(format!("unknown baseline `{k}`; expected one of {}, pooled, or all", names.join(", ")))
                })?;
                if !out.contains(&kind) {
                    out.push(kind);
                }
            }
            Ok(out)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let kinds = kinds(&cli, &cfg)?;
    let layout = Layout::new(&cfg.out);
    let exec = Execution::available();
    match &cli.command {
        Command::GenData => {
            for &s in &cfg.seeds {
                let d = experiment::stage_gen_data(&cfg, s, &layout)?;
                say!(
                    "seed {s}: {} source and {} target users, {} logged source dialogues -> {}",
                    d.source.len(),
                    d.target.len(),
                    d.source_logs.dialogues.len(),
                    layout.data_dir(s).display()
                );
            }
        }
        Command::TrainSource => {
            for &s in &cfg.seeds {
                experiment::stage_train_source(&cfg, s, &layout, &kinds)?;
                say!("seed {s}: source models -> {}", layout.checkpoint_dir(s).display());
            }
        }
        Command::Transfer => {
            for &s in &cfg.seeds {
                experiment::stage_transfer(&cfg, s, &layout, &kinds)?;
                for k in &kinds {
                    say!("seed {s}: {k} -> {}", layout.policy_dir(s, *k).display());
                }
            }
        }
        Command::EvalOffline => {
            for (name, r) in experiment::stage_eval_offline(&cfg, &cfg.seeds, &layout, &kinds, exec)? {
                say!("{name:10} auc {:.3} ± {:.3}", r.mean, r.std);
            }
            say!("reports -> {}", layout.report_dir().display());
        }
        Command::EvalOnline => {
            for (name, r) in experiment::stage_eval_online(&cfg, &cfg.seeds, &layout, &kinds, exec)? {
                say!(
                    "{name:10} reward {:.3} ± {:.3}  success {:.3} ± {:.3}  length {:.2} ± {:.2}",
                    r.mean.reward, r.std.reward, r.mean.success_rate, r.std.success_rate, r.mean.length, r.std.length
                );
            }
            say!("reports -> {}", layout.report_dir().display());
        }
        Command::Chat { checkpoint, user } => {
            if kinds.len() != 1 {
                return Err(Failure::Usage("chat needs a single --baseline".into()));
            }
            let seed = cfg.seeds[0];
            let dir = checkpoint.clone().unwrap_or_else(|| layout.policy_dir(seed, kinds[0]));
            let policy = load_checkpoint(&dir)?;
            let user = match (user, &policy) {
                (Some(u), _) => u.clone(),
                (None, PolicySet::PerUser(m)) => m.keys().next().cloned().unwrap_or_default(),
                (None, PolicySet::Single(_)) => "guest".into(),
            };
            let theta = policy.for_user(&user)?;
            if theta.scope == PrefScope::PerUser && !theta.prefs.contains_key(&user) {
                let known: Vec<&str> = theta.prefs.keys().map(String::as_str).collect();
                return Err(Error::Validation(format!("no preferences for `{user}`; known users: {}", known.join(", "))).into());
            }
            // The shop's frequent orders come from the seed's data when present.
            let data_dir = layout.data_dir(seed);
            let sim = if data_dir.is_dir() {
                DataSet::load(&data_dir, &cfg)?.simulator(&cfg)?
            } else {
                Simulator::coffee(cfg.sim.clone())?
            };
            chat(&sim, &policy, &user, std::io::stdin().lock(), &mut std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<PolicySet> {
    if path.is_file() {
        Ok(PolicySet::Single(load_params(path)?))
    } else {
        Ok(experiment::load_policy(path)?)
    }
}

/// Keeps the known tokens of a line, warning about the rest.
fn utterance(sim: &Simulator, line: &str) -> Utterance {
    let vocab = &sim.domain.vocab;
    let mut ids = Vec::new();
    for tok in petal_core::corpus::tokenize(line) {
        match vocab.id(&tok) {
            Some(id) => ids.push(id),
            None => eprintln!("(ignoring unknown word `{tok}`)"),
        }
    }
    Utterance::from_ids(ids, vocab.len())
}

fn chat<R: BufRead, W: Write>(sim: &Simulator, policy: &PolicySet, user: &str, input: R, out: &mut W) -> CliResult<()> {
    let theta = policy.for_user(user)?;
    let choices = sim.choices();
    let interactive = std::io::stdin().is_terminal();
    let io = |e: std::io::Error| Failure::Usage(format!("i/o: {e}"));
    let mut history: Option<History> = None;
    let mut last_reply: Option<Utterance> = None;
    let mut r = rng::stream(0, &[rng::label("chat")]);
    if interactive {
        eprintln!("talking to {user}; /reset starts over, /quit exits");
    }
    for line in input.lines() {
        let line = line.map_err(io)?;
        let line = line.trim();
        match line {
            "/quit" => break,
            "/reset" => {
                history = None;
                last_reply = None;
                continue;
            }
            "" => continue,
            _ => {}
        }
        let u = utterance(sim, line);
        let h = match (history.take(), last_reply.take()) {
            (Some(mut h), Some(a)) => {
                h.push(a, u);
                h
            }
            _ => History::new(u),
        };
        let mut state = EpisodeState::new(choices.len());
        state.agreed = detect_choices(h.user(), choices);
        let candidates: Vec<Utterance> = sim.candidate_responses(&state).into_iter().map(|c| c.reply).collect();
        let (idx, _) = select_action(&h, &candidates, theta, user, 0.0, choices, &mut r)?;
        writeln!(out, "{}", candidates[idx].text(&sim.domain.vocab)).map_err(io)?;
        out.flush().map_err(io)?;
        last_reply = Some(candidates[idx].clone());
        history = Some(h);
    }
    Ok(())
}
