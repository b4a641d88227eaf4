//! Deterministic network model: per-message delay sampling, fragment loss
//! with retransmission, duplication, optional reordering, a global stabilization time, and link
//! severing for down nodes.
//!
//! Every (sender, receiver, lane) triple draws from its own seeded stream,
//! so traffic on one lane never perturbs the delivery schedule of another.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::crypto::{HashAlg, NodeId};
use crate::engine::Lane;
use crate::time::{from_millis_f64, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayDist {
    pub mean_ms: f64,
    pub sd_ms: f64,
}

impl DelayDist {
    pub const ZERO: DelayDist = DelayDist {
        mean_ms: 0.0,
        sd_ms: 0.0,
    };

    fn sample(&self, rng: &mut impl Rng) -> SimTime {
        if self.sd_ms <= 0.0 {
            return from_millis_f64(self.mean_ms);
        }
        let normal = Normal::new(self.mean_ms, self.sd_ms).expect("sd is positive and finite");
        from_millis_f64(normal.sample(rng))
    }
}

/// After `at`, links stop losing messages and never exceed `bound_ms`.
/// Messages sent earlier arrive by `at + bound_ms` at the latest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gst {
    pub at_ms: f64,
    pub bound_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub delay: DelayDist,
    /// Loss probability per transmission of one fragment of `mtu` bytes.
    pub drop_rate: f64,
    /// Delay before a lost fragment is sent again.
    pub rto_ms: f64,
    /// Transmissions per fragment before the whole message is given up.
    pub max_attempts: u32,
    pub dup_rate: f64,
    /// Whether a link may deliver out of send order.
    pub reorder: bool,
    pub gst: Option<Gst>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delay: DelayDist::ZERO,
            drop_rate: 0.0,
            rto_ms: 50.0,
            max_attempts: 4,
            dup_rate: 0.0,
            reorder: false,
            gst: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("drop_rate", self.drop_rate), ("dup_rate", self.dup_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        if !(self.rto_ms.is_finite() && self.rto_ms >= 0.0) {
            return Err("rto_ms must be finite and non-negative".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if !(self.delay.mean_ms.is_finite()
            && self.delay.sd_ms.is_finite()
            && self.delay.sd_ms >= 0.0)
        {
            return Err("delay must be finite with non-negative sd".into());
        }
        if let Some(g) = self.gst {
            if !(g.at_ms >= 0.0 && g.bound_ms >= 0.0) {
                return Err("gst times must be non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(NodeId),
}

#[derive(Debug)]
struct LinkState {
    rng: ChaCha8Rng,
    last_arrival: SimTime,
}

/// Why a message copy never arrived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Loss,
    SenderDown,
    ReceiverDown,
}

#[derive(Debug)]
pub struct Network {
    config: SimConfig,
    cost: CostModel,
    endpoints: BTreeSet<NodeId>,
    down: BTreeSet<NodeId>,
    links: HashMap<(NodeId, NodeId, Lane), LinkState>,
}

impl Network {
    pub fn new(
        config: SimConfig,
        cost: CostModel,
        endpoints: impl IntoIterator<Item = NodeId>,
    ) -> Self {
        Self {
            config,
            cost,
            endpoints: endpoints.into_iter().collect(),
            down: BTreeSet::new(),
            links: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn is_down(&self, id: NodeId) -> bool {
        self.down.contains(&id)
    }

    /// Severs or restores every link of `id`. Returns whether it changed.
    pub fn set_down(&mut self, id: NodeId, down: bool) -> bool {
        if down {
            self.down.insert(id)
        } else {
            self.down.remove(&id)
        }
    }

    fn gst(&self) -> Option<(SimTime, SimTime)> {
        self.config
            .gst
            .map(|g| (from_millis_f64(g.at_ms), from_millis_f64(g.bound_ms)))
    }

    /// Arrival times for one message copy leaving the sender's egress at
    /// `sent_at`: none if lost, two if duplicated.
    pub fn route(
        &mut self,
        sent_at: SimTime,
        from: NodeId,
        to: NodeId,
        lane: Lane,
        bytes: usize,
    ) -> Result<Result<Vec<SimTime>, DropReason>, NetError> {
        for id in [from, to] {
            if !self.endpoints.contains(&id) {
                return Err(NetError::UnknownEndpoint(id));
            }
        }
        if self.down.contains(&from) {
            return Ok(Err(DropReason::SenderDown));
        }
        let seed = self.config.seed;
        let gst = self.gst();
        let synchronous = gst.is_some_and(|(at, _)| sent_at >= at);
        let frags = self.cost.fragments(bytes) as i32;
        let p_drop = if synchronous {
            0.0
        } else {
            self.config.drop_rate
        };
        let (rto, max_attempts) = (
            from_millis_f64(self.config.rto_ms),
            self.config.max_attempts,
        );
        let (delay, dup_rate, reorder) =
            (self.config.delay, self.config.dup_rate, self.config.reorder);
        let link = self
            .links
            .entry((from, to, lane))
            .or_insert_with(|| LinkState {
                rng: ChaCha8Rng::from_seed(
                    HashAlg::Sha256
                        .tuple("netsim/link")
                        .u64(seed)
                        .u64(from.0 as u64)
                        .u64(to.0 as u64)
                        .u64(lane.index() as u64)
                        .finish()
                        .0,
                ),
                last_arrival: 0,
            });
        // Fixed draw order per copy keeps schedules reproducible.
        let resends =
            transmissions(link.rng.gen::<f64>(), p_drop, frags, max_attempts).map(|t| t - 1);
        let duplicated = link.rng.gen::<f64>() < dup_rate;
        let copies = 1 + duplicated as usize;
        let mut arrivals = Vec::with_capacity(copies);
        for copy in 0..copies {
            let mut at =
                sent_at + delay.sample(&mut link.rng) + rto * resends.unwrap_or(0) as SimTime;
            if let Some((gst_at, bound)) = gst {
                if synchronous {
                    at = at.min(sent_at + bound);
                } else {
                    at = at.min(gst_at + bound).max(sent_at);
                }
            }
            if copy == 0 && !reorder {
                at = at.max(link.last_arrival);
                link.last_arrival = at;
            }
            arrivals.push(at);
        }
        if resends.is_none() {
            return Ok(Err(DropReason::Loss));
        }
        Ok(Ok(arrivals))
    }
}

/// Transmissions needed by the slowest of `frags` fragments, each lost
/// independently with probability `p` per try, given a uniform draw `u`.
/// `None` if some fragment is still missing after `max_attempts` tries.
fn transmissions(u: f64, p: f64, frags: i32, max_attempts: u32) -> Option<u32> {
    // P(slowest fragment needs at most k tries) = (1 - p^k)^frags.
    (1..=max_attempts).find(|&k| u < (1.0 - p.powi(k as i32)).powi(frags))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Drop,
}

/// One line of the delivery trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub t: SimTime,
    pub kind: TraceKind,
    pub from: NodeId,
    pub to: NodeId,
    pub instance: u32,
    pub msg: &'static str,
    pub bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<DropReason>,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
