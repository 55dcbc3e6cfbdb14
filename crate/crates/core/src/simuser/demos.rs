//! Demonstration datasets and their line-oriented text format.
//!
//! ```text
//! isql-demos 1
//! user <config hash>
//! episode task=<id> seed=<u64> index=<n> outcome=<label> steps=<k>
//! <s> | <a> | <s'>
//! ...
//! ```
//!
//! A state is either a non-negative integer (grid cell) or four
//! space-separated decimals in `%.16e` form (point-mass). Every episode
//! block lists exactly `steps` transition rows.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::Outcome;
use crate::error::{Error, Result};
use crate::soft::State;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub next: State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: usize,
    pub outcome: Outcome,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub task_id: usize,
    pub seed: u64,
    pub user_hash: String,
    pub episodes: Vec<Episode>,
}

impl DemoSet {
    pub fn new(task_id: usize, seed: u64, user_hash: impl Into<String>) -> Self {
        Self {
            task_id,
            seed,
            user_hash: user_hash.into(),
            episodes: Vec::new(),
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// `counts[s * action_count + a]` over discrete demo states.
    pub fn action_counts(&self, state_count: usize, action_count: usize) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; state_count * action_count];
        for t in self.transitions() {
            let s = t
                .state
                .index()
                .filter(|s| *s < state_count)
                .ok_or_else(|| Error::InvalidInput(format!("demo state {} is not a tabular state", t.state)))?;
            if t.action >= action_count {
                return Err(Error::InvalidInput(format!("demo action {} out of range", t.action)));
            }
            counts[s * action_count + t.action] += 1.0;
        }
        Ok(counts)
    }
}

fn write_state(out: &mut String, s: &State) {
    match s {
        State::Discrete(i) => write!(out, "{i}").unwrap(),
        State::Continuous(v) => write!(out, "{:.16e} {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2], v[3]).unwrap(),
    }
}

pub fn format_demos(sets: &[DemoSet]) -> String {
    let mut out = String::from("isql-demos 1\n");
    if let Some(first) = sets.first() {
        writeln!(out, "user {}", first.user_hash).unwrap();
    }
    for set in sets {
        for ep in &set.episodes {
            writeln!(
                out,
                "episode task={} seed={} index={} outcome={} steps={}",
                set.task_id,
                set.seed,
                ep.index,
                ep.outcome,
                ep.len()
            )
            .unwrap();
            for t in &ep.transitions {
                write_state(&mut out, &t.state);
                write!(out, " | {} | ", t.action).unwrap();
                write_state(&mut out, &t.next);
                out.push('\n');
            }
        }
    }
    out
}

fn parse_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "demo file",
        line,
        detail: detail.into(),
    }
}

fn parse_state(text: &str, line: usize) -> Result<State> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    match fields.len() {
        1 => fields[0]
            .parse::<usize>()
            .map(State::Discrete)
            .map_err(|e| parse_err(line, format!("bad state index '{}': {e}", fields[0]))),
        4 => {
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("bad state component '{f}': {e}")))?;
                if !slot.is_finite() {
                    return Err(parse_err(line, "non-finite state component"));
                }
            }
            Ok(State::Continuous(v))
        }
        n => Err(parse_err(line, format!("state with {n} components"))),
    }
}

fn parse_outcome(text: &str, line: usize) -> Result<Outcome> {
    Ok(match text {
        "target" => Outcome::Target,
        "out_of_bounds" => Outcome::OutOfBounds,
        "timeout" => Outcome::Timeout,
        "continue" => Outcome::Continue,
        other => return Err(parse_err(line, format!("unknown outcome '{other}'"))),
    })
}

/// Parses a demo file into one [`DemoSet`] per (task, seed) in order of
/// first appearance. Malformed or truncated input is rejected.
pub fn parse_demos(text: &str) -> Result<Vec<DemoSet>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, "isql-demos 1")) => {}
        Some((n, other)) => return Err(parse_err(n, format!("unexpected header '{other}'"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut user_hash = String::new();
    let mut sets: Vec<DemoSet> = Vec::new();
    let mut pending: Option<(usize, usize, u64, Episode)> = None;
    let finish = |pending: &mut Option<(usize, usize, u64, Episode)>, sets: &mut Vec<DemoSet>, user: &str, line: usize| {
        if let Some((remaining, task, seed, ep)) = pending.take() {
            if remaining != 0 {
                return Err(parse_err(line, format!("episode {} is missing {remaining} rows", ep.index)));
            }
            match sets.iter_mut().find(|s| s.task_id == task && s.seed == seed) {
                Some(set) => set.episodes.push(ep),
                None => {
                    let mut set = DemoSet::new(task, seed, user);
                    set.episodes.push(ep);
                    sets.push(set);
                }
            }
        }
        Ok(())
    };
    let mut last_line = 1;
    for (n, line) in lines {
        last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(hash) = line.strip_prefix("user ") {
            user_hash = hash.trim().to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("episode ") {
            finish(&mut pending, &mut sets, &user_hash, n)?;
            let mut task = None;
            let mut seed = None;
            let mut index = None;
            let mut outcome = None;
            let mut steps = None;
            for field in rest.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| parse_err(n, format!("bad header field '{field}'")))?;
                let bad = |e: std::num::ParseIntError| parse_err(n, format!("bad {k}: {e}"));
                match k {
                    "task" => task = Some(v.parse::<usize>().map_err(bad)?),
                    "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
                    "index" => index = Some(v.parse::<usize>().map_err(bad)?),
                    "steps" => steps = Some(v.parse::<usize>().map_err(bad)?),
                    "outcome" => outcome = Some(parse_outcome(v, n)?),
                    other => return Err(parse_err(n, format!("unknown header field '{other}'"))),
                }
            }
            let missing = || parse_err(n, "incomplete episode header");
            pending = Some((
                steps.ok_or_else(missing)?,
                task.ok_or_else(missing)?,
                seed.ok_or_else(missing)?,
                Episode {
                    index: index.ok_or_else(missing)?,
                    outcome: outcome.ok_or_else(missing)?,
                    transitions: Vec::new(),
                },
            ));
            continue;
        }
        let Some((remaining, _, _, ep)) = pending.as_mut() else {
            return Err(parse_err(n, "transition row outside an episode"));
        };
        if *remaining == 0 {
            return Err(parse_err(n, "more rows than the episode header declares"));
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(parse_err(n, "expected 's | a | s''"));
        }
        let state = parse_state(parts[0], n)?;
        let action = parts[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(n, format!("bad action: {e}")))?;
        let next = parse_state(parts[2], n)?;
        if std::mem::discriminant(&state) != std::mem::discriminant(&next) {
            return Err(parse_err(n, "state kinds differ within a row"));
        }
        ep.transitions.push(Transition { state, action, next });
        *remaining -= 1;
    }
    finish(&mut pending, &mut sets, &user_hash, last_line)?;
    Ok(sets)
}

pub fn save_demos(path: &Path, sets: &[DemoSet]) -> Result<()> {
    std::fs::write(path, format_demos(sets))?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<Vec<DemoSet>> {
    parse_demos(&std::fs::read_to_string(path)?)
}
