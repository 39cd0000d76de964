//! Neighbor-only message passing with per-phase tags.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    /// Dual iterate `y`.
    Y,
    /// Tracking variable `u` (double exchange only).
    U,
}

#[derive(Debug, Clone)]
pub struct Message {
    pub sender: usize,
    pub round: usize,
    pub tag: Tag,
    pub payload: DVector<f64>,
}

/// Inboxes for one synchronous phase. Every broadcast of a phase must be
/// posted before [`Mailbox::deliver`] is called for that phase.
#[derive(Debug, Clone)]
pub struct Mailbox {
    inboxes: Vec<Vec<Message>>,
    sent_reals: u64,
    open_phase: Option<(usize, Tag)>,
}

impl Mailbox {
    pub fn new(n_agents: usize) -> Self {
        Mailbox { inboxes: vec![Vec::new(); n_agents], sent_reals: 0, open_phase: None }
    }

    /// Total real numbers sent over all links so far.
    pub fn sent_reals(&self) -> u64 {
        self.sent_reals
    }

    /// Sends `payload` from `sender` to each of its neighbors.
    pub fn broadcast(&mut self, g: &Graph, sender: usize, round: usize, tag: Tag, payload: &DVector<f64>) {
        match self.open_phase {
            None => self.open_phase = Some((round, tag)),
            Some(phase) => assert_eq!(phase, (round, tag), "broadcast into a different phase"),
        }
        for &j in g.neighbors(sender) {
            self.inboxes[j].push(Message { sender, round, tag, payload: payload.clone() });
            self.sent_reals += payload.len() as u64;
        }
    }

    /// Closes the phase and hands every agent its messages ordered like its
    /// neighbor list. Fails if a message is missing, stale, or from a
    /// non-neighbor.
    pub fn deliver(&mut self, g: &Graph, round: usize, tag: Tag) -> Result<Vec<Vec<DVector<f64>>>> {
        if self.open_phase.take() != Some((round, tag)) && g.n_edges() > 0 {
            return Err(Error::Format(format!("phase ({round}, {tag:?}) was never opened")));
        }
        let mut out = Vec::with_capacity(self.inboxes.len());
        for (i, inbox) in self.inboxes.iter_mut().enumerate() {
            let nbrs = g.neighbors(i);
            let mut slots: Vec<Option<DVector<f64>>> = vec![None; nbrs.len()];
            for msg in inbox.drain(..) {
                if msg.round != round || msg.tag != tag {
                    return Err(Error::Format(format!(
                        "agent {i} got a ({}, {:?}) message during phase ({round}, {tag:?})",
                        msg.round, msg.tag
                    )));
                }
                let pos = nbrs
                    .binary_search(&msg.sender)
                    .map_err(|_| Error::Format(format!("agent {i} got a message from non-neighbor {}", msg.sender)))?;
                if slots[pos].replace(msg.payload).is_some() {
                    return Err(Error::Format(format!("duplicate message {} -> {i}", msg.sender)));
                }
            }
            let received = slots
                .into_iter()
                .enumerate()
                .map(|(k, s)| s.ok_or_else(|| Error::Format(format!("agent {i} missing message from {}", nbrs[k]))))
                .collect::<Result<Vec<_>>>()?;
            out.push(received);
        }
        Ok(out)
    }
}
