//! Demonstration transitions and their line-delimited file format.
//!
//! A dataset file is JSON lines: the first line is a [`DatasetHeader`], every
//! following line one [`Transition`]. Transitions recorded by the simulator
//! keep the end-effector states they were extracted from, so a dataset logged
//! in one observation mode can be re-projected into any other.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conservative::{extract_observation, ObservationMode};
use crate::error::{Error, Result};
use crate::kinematics::EndEffectorState;

pub const DATASET_FORMAT: &str = "cvmpc-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Reached,
    Slipped,
    Timeout,
}

impl TerminalReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminalReason::Reached => "reached",
            TerminalReason::Slipped => "slipped",
            TerminalReason::Timeout => "timeout",
        }
    }
}

/// One `(x, c, x′)` tuple. `terminal` marks the last transition of an
/// episode; the value target does not bootstrap past it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode: usize,
    pub step: usize,
    pub obs: Vec<f64>,
    pub cost: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ee: Option<EndEffectorState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_ee: Option<EndEffectorState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpan {
    pub episode: usize,
    pub start: usize,
    pub len: usize,
    pub reason: Option<TerminalReason>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// `None` for synthetic datasets that were not extracted from
    /// end-effector states.
    pub mode: Option<ObservationMode>,
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeSpan>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub mode: Option<ObservationMode>,
    pub obs_dim: usize,
    pub transitions: usize,
    pub episodes: Vec<EpisodeSpan>,
}

impl Dataset {
    pub fn new(mode: Option<ObservationMode>) -> Self {
        Dataset {
            mode,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.obs.len())
    }

    /// Appends one episode's transitions, renumbering them under a fresh
    /// episode id.
    pub fn push_episode(&mut self, mut transitions: Vec<Transition>, reason: Option<TerminalReason>) {
        let episode = self.episodes.len();
        let start = self.transitions.len();
        for (i, t) in transitions.iter_mut().enumerate() {
            t.episode = episode;
            t.step = i;
        }
        self.episodes.push(EpisodeSpan {
            episode,
            start,
            len: transitions.len(),
            reason,
        });
        self.transitions.extend(transitions);
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.obs_dim();
        if let Some(mode) = self.mode {
            if !self.is_empty() && dim != mode.dim() {
                return Err(Error::Dimension {
                    what: "dataset observation",
                    expected: mode.dim(),
                    got: dim,
                });
            }
        }
        let mut labels: Vec<f64> = Vec::new();
        for t in &self.transitions {
            if t.obs.len() != dim || t.next_obs.len() != dim {
                return Err(Error::Dimension {
                    what: "dataset observation",
                    expected: dim,
                    got: t.obs.len().max(t.next_obs.len()),
                });
            }
            if !t.cost.is_finite() || t.obs.iter().chain(&t.next_obs).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset transition"));
            }
            if !labels.contains(&t.cost) {
                labels.push(t.cost);
            }
        }
        if labels.len() > 2 {
            return Err(Error::Contract(format!(
                "dataset costs must be two-valued, found {labels:?}"
            )));
        }
        let covered: usize = self.episodes.iter().map(|e| e.len).sum();
        if !self.episodes.is_empty() && covered != self.len() {
            return Err(Error::Contract(format!(
                "episode spans cover {covered} of {} transitions",
                self.len()
            )));
        }
        Ok(())
    }

    /// Re-extracts every observation in `mode` from the stored
    /// end-effector states.
    pub fn with_mode(&self, mode: ObservationMode) -> Result<Dataset> {
        let mut transitions = Vec::with_capacity(self.len());
        for t in &self.transitions {
            let (Some(ee), Some(next)) = (&t.ee, &t.next_ee) else {
                return Err(Error::InvalidArgument(
                    "dataset has no end-effector states to re-extract from".into(),
                ));
            };
            transitions.push(Transition {
                obs: extract_observation(ee, mode),
                next_obs: extract_observation(next, mode),
                ..t.clone()
            });
        }
        Ok(Dataset {
            mode: Some(mode),
            transitions,
            episodes: self.episodes.clone(),
        })
    }

    /// Keeps the first `n` episodes.
    pub fn first_episodes(&self, n: usize) -> Dataset {
        let episodes: Vec<EpisodeSpan> = self.episodes.iter().take(n).cloned().collect();
        let end = episodes.last().map_or(0, |e| e.start + e.len);
        Dataset {
            mode: self.mode,
            transitions: self.transitions[..end].to_vec(),
            episodes,
        }
    }

    pub fn violation_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.transitions.iter().filter(|t| t.cost > 0.0).count() as f64 / self.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            mode: self.mode,
            obs_dim: self.obs_dim(),
            transitions: self.len(),
            episodes: self.episodes.clone(),
        };
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::corrupt(path, "empty dataset file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&first)
            .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::corrupt(path, format!("not a dataset file ({})", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: DATASET_VERSION,
            });
        }
        let mut transitions = Vec::with_capacity(header.transitions);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 2)))?;
            transitions.push(t);
        }
        if transitions.len() != header.transitions {
            return Err(Error::corrupt(
                path,
                format!("expected {} transitions, found {}", header.transitions, transitions.len()),
            ));
        }
        let ds = Dataset {
            mode: header.mode,
            transitions,
            episodes: header.episodes,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::{Rotation3, Vector3};

    use super::*;

    fn recorded(mode: ObservationMode) -> Dataset {
        let mut ds = Dataset::new(Some(mode));
        for ep in 0..3 {
            let ts: Vec<Transition> = (0..4)
                .map(|s| {
                    let a = EndEffectorState::at_rest(
                        Vector3::new(0.1 * s as f64, 0.0, 0.3),
                        Rotation3::from_euler_angles(0.01 * ep as f64, 0.0, 0.0),
                    );
                    let mut b = a.clone();
                    b.linear_velocity = Vector3::new(0.123456789, -1.0 / 3.0, 0.0);
                    Transition {
                        episode: 0,
                        step: 0,
                        obs: extract_observation(&a, mode),
                        cost: if s == 3 { 1.0 } else { 0.0 },
                        next_obs: extract_observation(&b, mode),
                        terminal: s == 3,
                        ee: Some(a),
                        next_ee: Some(b),
                    }
                })
                .collect();
            ds.push_episode(ts, Some(TerminalReason::Timeout));
        }
        ds
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = recorded(ObservationMode::Full);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        for t in &back.transitions {
            assert_eq!(t.obs, extract_observation(t.ee.as_ref().unwrap(), ObservationMode::Full));
        }
    }

    #[test]
    fn reprojection_matches_direct_extraction() {
        let full = recorded(ObservationMode::Full);
        let rot = full.with_mode(ObservationMode::Rot).unwrap();
        assert_eq!(rot, recorded(ObservationMode::Rot));
        assert_eq!(rot.obs_dim(), 9);
    }

    #[test]
    fn episode_bookkeeping() {
        let ds = recorded(ObservationMode::VelAcc);
        assert_eq!(ds.episodes.len(), 3);
        assert_eq!(ds.episodes[2].start, 8);
        assert_eq!(ds.transitions[9].episode, 2);
        assert_eq!(ds.transitions[9].step, 1);
        assert_eq!(ds.first_episodes(2).len(), 8);
        assert!((ds.violation_rate() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn three_valued_costs_rejected() {
        let mut ds = recorded(ObservationMode::Rot);
        ds.transitions[0].cost = 0.5;
        assert!(matches!(ds.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let ds = recorded(ObservationMode::Rot);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Corrupt { .. })));
    }
}
