//! Synchronous agent/operator message bus with interception taps.
//!
//! One round is: every agent reports its profile (uplink), the operator
//! reads its coupling data (operator I/O), computes gradients and dual
//! updates, then delivers a broadcast to every agent (downlink), after which
//! agents update. Taps sit on channels and may rewrite payloads in
//! registration order; every rewrite is logged with the tap owner.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Channel {
    Agent { agent: usize, dir: Direction },
    /// Coupling-constraint data read by the operator.
    OperatorIo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PrimalReport,
    CouplingData,
    DualBroadcast,
}

/// Operator → agent message. `gradient` is the agent's block of the
/// Lagrangian gradient; `residual` is the last stacked primal change the
/// operator observed (infinite before the first one).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Broadcast<S> {
    pub gradient: Vec<S>,
    pub mu: Vec<S>,
    pub lambda: Vec<S>,
    pub residual: S,
}

/// Additive terms the operator folds into its coupling constraint
/// `R(𝒞) + Φ`: the falsification itself and its gradients with respect to
/// the stacked profile and to `λ`. Zero when nobody tampers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingData<S> {
    pub phi: Vec<S>,
    pub primal_grad: Vec<S>,
    pub dual_grad: Vec<S>,
}

impl<S: Scalar> CouplingData<S> {
    pub fn zeros(dim: usize, lambda_len: usize) -> Self {
        Self {
            phi: vec![S::zero(); lambda_len],
            primal_grad: vec![S::zero(); dim],
            dual_grad: vec![S::zero(); lambda_len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload<S> {
    Report(Vec<S>),
    Coupling(CouplingData<S>),
    Broadcast(Broadcast<S>),
}

impl<S: Scalar> Payload<S> {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Report(_) => MessageKind::PrimalReport,
            Payload::Coupling(_) => MessageKind::CouplingData,
            Payload::Broadcast(_) => MessageKind::DualBroadcast,
        }
    }

    /// SHA-256 over the little-endian `f64` encoding of every component.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[S]| {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        };
        match self {
            Payload::Report(c) => feed(c),
            Payload::Coupling(d) => {
                feed(&d.phi);
                feed(&d.primal_grad);
                feed(&d.dual_grad);
            }
            Payload::Broadcast(b) => {
                feed(&b.gradient);
                feed(&b.mu);
                feed(&b.lambda);
                feed(std::slice::from_ref(&b.residual));
            }
        }
        hex::encode(h.finalize())
    }
}

/// What a tap can see besides the payload it sits on: the round index, the
/// post-tap reports collected so far this round, and the operator's
/// current multipliers.
#[derive(Debug, Clone, Copy)]
pub struct TapContext<'a, S> {
    pub round: usize,
    pub reports: &'a [Vec<S>],
    pub mu: &'a [S],
    pub lambda: &'a [S],
    pub residual: S,
}

pub trait ChannelTap<S>: Send {
    fn on_message(&mut self, ctx: &TapContext<'_, S>, payload: &mut Payload<S>) -> Result<()>;

    /// Attack index the tap reports its activity under.
    fn attack_index(&self) -> Option<usize> {
        None
    }

    /// Norm of the perturbation applied in the last call.
    fn last_injection_norm(&self) -> f64 {
        0.0
    }

    fn gate_open(&self) -> Option<bool> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapHandle(u64);

struct TapEntry<S> {
    handle: TapHandle,
    owner: usize,
    channel: Channel,
    tap: Box<dyn ChannelTap<S>>,
}

/// One JSON-lines record of the round log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord<S> {
    pub round: usize,
    pub kind: MessageKind,
    pub from: String,
    pub to: String,
    pub pre_tap_digest: String,
    pub post_tap_digest: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mutated_by: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogLevel {
    /// Only mutation counters are kept.
    #[default]
    Off,
    /// Digests for every message.
    Digests,
    /// Digests plus the post-tap payload.
    Payloads,
}

pub trait AgentNode<S>: Send {
    fn report(&self) -> Vec<S>;
    fn update(&mut self, round: usize, broadcast: &Broadcast<S>) -> Result<()>;
}

pub trait OperatorNode<S> {
    fn mu(&self) -> &[S];
    fn lambda(&self) -> &[S];
    fn last_residual(&self) -> S;
    fn coupling_template(&self) -> CouplingData<S>;
    /// Consumes the round's reports and coupling data, updates the
    /// multipliers and returns one broadcast per agent.
    fn operate(&mut self, round: usize, reports: &[Vec<S>], coupling: &CouplingData<S>) -> Result<Vec<Broadcast<S>>>;
}

pub struct MessageBus<S> {
    agents: usize,
    taps: Vec<TapEntry<S>>,
    next_handle: u64,
    level: LogLevel,
    sink: Option<Box<dyn Write + Send>>,
    records: Vec<LogRecord<S>>,
    keep_records: bool,
    mutations: BTreeMap<(usize, Channel), u64>,
}

impl<S: Scalar + Serialize> MessageBus<S> {
    pub fn new(agents: usize) -> Self {
        Self {
            agents,
            taps: Vec::new(),
            next_handle: 0,
            level: LogLevel::Off,
            sink: None,
            records: Vec::new(),
            keep_records: false,
            mutations: BTreeMap::new(),
        }
    }

    /// Streams JSON-lines records to `sink`.
    pub fn with_log_sink(mut self, level: LogLevel, sink: Box<dyn Write + Send>) -> Self {
        self.level = level;
        self.sink = Some(sink);
        self
    }

    /// Keeps records in memory (tests and small runs).
    pub fn with_memory_log(mut self, level: LogLevel) -> Self {
        self.level = level;
        self.keep_records = true;
        self
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn register_tap(&mut self, owner: usize, channel: Channel, tap: Box<dyn ChannelTap<S>>) -> Result<TapHandle> {
        if let Channel::Agent { agent, .. } = channel {
            if agent >= self.agents {
                return Err(Error::TapRejected(format!("agent {agent} has no channel on this bus")));
            }
        }
        if self.taps.iter().any(|e| e.owner == owner && e.channel == channel) {
            return Err(Error::TapRejected(format!(
                "attacker {owner} already taps {channel:?}"
            )));
        }
        let handle = TapHandle(self.next_handle);
        self.next_handle += 1;
        self.taps.push(TapEntry {
            handle,
            owner,
            channel,
            tap,
        });
        Ok(handle)
    }

    pub fn remove_tap(&mut self, handle: TapHandle) -> bool {
        let before = self.taps.len();
        self.taps.retain(|e| e.handle != handle);
        before != self.taps.len()
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    pub fn records(&self) -> &[LogRecord<S>] {
        &self.records
    }

    /// Number of payload rewrites per (owner, channel).
    pub fn mutations(&self) -> &BTreeMap<(usize, Channel), u64> {
        &self.mutations
    }

    /// `(attack index, injection norm, gate)` for every tap that reports one,
    /// in registration order.
    pub fn tap_activity(&self) -> Vec<(usize, f64, Option<bool>)> {
        self.taps
            .iter()
            .filter_map(|e| e.tap.attack_index().map(|a| (a, e.tap.last_injection_norm(), e.tap.gate_open())))
            .collect()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(s) = self.sink.as_mut() {
            s.flush().map_err(|e| Error::Protocol {
                round: 0,
                detail: format!("round log flush failed: {e}"),
            })?;
        }
        Ok(())
    }

    fn transmit(
        &mut self,
        ctx: &TapContext<'_, S>,
        channel: Channel,
        from: String,
        to: String,
        mut payload: Payload<S>,
    ) -> Result<Payload<S>> {
        let logging = self.level != LogLevel::Off;
        let pre = logging.then(|| payload.digest());
        let mut mutated_by = Vec::new();
        for entry in self.taps.iter_mut().filter(|e| e.channel == channel) {
            let before = payload.clone();
            entry.tap.on_message(ctx, &mut payload)?;
            if payload != before {
                mutated_by.push(entry.owner);
                *self.mutations.entry((entry.owner, channel)).or_insert(0) += 1;
            }
        }
        if let Some(pre) = pre {
            let post = if mutated_by.is_empty() {
                pre.clone()
            } else {
                payload.digest()
            };
            let record = LogRecord {
                round: ctx.round,
                kind: payload.kind(),
                from,
                to,
                pre_tap_digest: pre,
                post_tap_digest: post,
                mutated_by,
                payload: (self.level == LogLevel::Payloads).then(|| payload.clone()),
            };
            if let Some(sink) = self.sink.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::Protocol {
                    round: ctx.round,
                    detail: e.to_string(),
                })?;
                writeln!(sink, "{line}").map_err(|e| Error::Protocol {
                    round: ctx.round,
                    detail: format!("round log write failed: {e}"),
                })?;
            }
            if self.keep_records {
                self.records.push(record);
            }
        }
        Ok(payload)
    }

    /// One synchronized collect → operate → broadcast → update round.
    pub fn run_round<A, O>(&mut self, round: usize, agents: &mut [A], operator: &mut O) -> Result<()>
    where
        A: AgentNode<S>,
        O: OperatorNode<S>,
    {
        if agents.len() != self.agents {
            return Err(Error::Protocol {
                round,
                detail: format!("{} agents registered, bus expects {}", agents.len(), self.agents),
            });
        }
        let mu = operator.mu().to_vec();
        let lambda = operator.lambda().to_vec();
        let residual = operator.last_residual();

        let mut reports: Vec<Vec<S>> = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            let ctx = TapContext {
                round,
                reports: &reports,
                mu: &mu,
                lambda: &lambda,
                residual,
            };
            let msg = self.transmit(
                &ctx,
                Channel::Agent {
                    agent: i,
                    dir: Direction::Uplink,
                },
                format!("agent:{i}"),
                "operator".into(),
                Payload::Report(agent.report()),
            )?;
            match msg {
                Payload::Report(c) => reports.push(c),
                _ => {
                    return Err(Error::Protocol {
                        round,
                        detail: format!("uplink of agent {i} did not deliver a report"),
                    })
                }
            }
        }

        let ctx = TapContext {
            round,
            reports: &reports,
            mu: &mu,
            lambda: &lambda,
            residual,
        };
        let coupling = match self.transmit(
            &ctx,
            Channel::OperatorIo,
            "grid".into(),
            "operator".into(),
            Payload::Coupling(operator.coupling_template()),
        )? {
            Payload::Coupling(d) => d,
            _ => {
                return Err(Error::Protocol {
                    round,
                    detail: "operator I/O did not deliver coupling data".into(),
                })
            }
        };

        let broadcasts = operator.operate(round, &reports, &coupling)?;
        if broadcasts.len() != agents.len() {
            return Err(Error::Protocol {
                round,
                detail: format!("operator produced {} broadcasts for {} agents", broadcasts.len(), agents.len()),
            });
        }
        let mut delivered = Vec::with_capacity(agents.len());
        for (i, b) in broadcasts.into_iter().enumerate() {
            let msg = self.transmit(
                &ctx,
                Channel::Agent {
                    agent: i,
                    dir: Direction::Downlink,
                },
                "operator".into(),
                format!("agent:{i}"),
                Payload::Broadcast(b),
            )?;
            match msg {
                Payload::Broadcast(b) => delivered.push(b),
                _ => {
                    return Err(Error::Protocol {
                        round,
                        detail: format!("downlink of agent {i} did not deliver a broadcast"),
                    })
                }
            }
        }
        agents
            .par_iter_mut()
            .zip(delivered.par_iter())
            .try_for_each(|(a, b)| a.update(round, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo {
        c: Vec<f64>,
        seen_mu: Vec<f64>,
    }

    impl AgentNode<f64> for Echo {
        fn report(&self) -> Vec<f64> {
            self.c.clone()
        }
        fn update(&mut self, _round: usize, b: &Broadcast<f64>) -> Result<()> {
            self.seen_mu = b.mu.clone();
            for (x, g) in self.c.iter_mut().zip(&b.gradient) {
                *x -= 0.5 * g;
            }
            Ok(())
        }
    }

    struct Sum {
        mu: Vec<f64>,
    }

    impl OperatorNode<f64> for Sum {
        fn mu(&self) -> &[f64] {
            &self.mu
        }
        fn lambda(&self) -> &[f64] {
            &[]
        }
        fn last_residual(&self) -> f64 {
            f64::INFINITY
        }
        fn coupling_template(&self) -> CouplingData<f64> {
            CouplingData::zeros(0, 0)
        }
        fn operate(&mut self, _round: usize, reports: &[Vec<f64>], _c: &CouplingData<f64>) -> Result<Vec<Broadcast<f64>>> {
            let total: f64 = reports.iter().flatten().sum();
            self.mu = vec![total];
            Ok(reports
                .iter()
                .map(|r| Broadcast {
                    gradient: r.clone(),
                    mu: self.mu.clone(),
                    lambda: vec![],
                    residual: 0.0,
                })
                .collect())
        }
    }

    struct AddToMu(f64);

    impl ChannelTap<f64> for AddToMu {
        fn on_message(&mut self, _ctx: &TapContext<'_, f64>, p: &mut Payload<f64>) -> Result<()> {
            if let Payload::Broadcast(b) = p {
                b.mu.iter_mut().for_each(|m| *m += self.0);
            }
            Ok(())
        }
    }

    struct Wiretap(Vec<Vec<f64>>);

    impl ChannelTap<f64> for Wiretap {
        fn on_message(&mut self, ctx: &TapContext<'_, f64>, _p: &mut Payload<f64>) -> Result<()> {
            self.0 = ctx.reports.to_vec();
            Ok(())
        }
    }

    fn setup() -> (Vec<Echo>, Sum) {
        (
            vec![
                Echo {
                    c: vec![1.0, 2.0],
                    seen_mu: vec![],
                },
                Echo {
                    c: vec![3.0, 4.0],
                    seen_mu: vec![],
                },
            ],
            Sum { mu: vec![0.0] },
        )
    }

    const DOWN1: Channel = Channel::Agent {
        agent: 1,
        dir: Direction::Downlink,
    };

    #[test]
    fn untapped_round_preserves_digests() {
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(2).with_memory_log(LogLevel::Digests);
        bus.run_round(0, &mut a, &mut o).unwrap();
        assert_eq!(bus.records().len(), 5);
        assert!(bus.records().iter().all(|r| r.pre_tap_digest == r.post_tap_digest));
        assert_eq!(a[0].c, vec![0.5, 1.0]);
    }

    #[test]
    fn additive_tap_shifts_only_its_channel() {
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(2).with_memory_log(LogLevel::Payloads);
        bus.register_tap(7, DOWN1, Box::new(AddToMu(0.25))).unwrap();
        bus.run_round(0, &mut a, &mut o).unwrap();
        assert_eq!(a[0].seen_mu, vec![10.0]);
        assert_eq!(a[1].seen_mu, vec![10.25]);
        let rec = bus.records().last().unwrap();
        assert_eq!(rec.mutated_by, vec![7]);
        assert_ne!(rec.pre_tap_digest, rec.post_tap_digest);
        assert_eq!(bus.mutations()[&(7, DOWN1)], 1);
    }

    #[test]
    fn taps_compose_in_registration_order() {
        struct Scale(f64);
        impl ChannelTap<f64> for Scale {
            fn on_message(&mut self, _ctx: &TapContext<'_, f64>, p: &mut Payload<f64>) -> Result<()> {
                if let Payload::Broadcast(b) = p {
                    b.mu.iter_mut().for_each(|m| *m *= self.0);
                }
                Ok(())
            }
        }
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(2);
        bus.register_tap(1, DOWN1, Box::new(AddToMu(1.0))).unwrap();
        bus.register_tap(2, DOWN1, Box::new(Scale(2.0))).unwrap();
        bus.run_round(0, &mut a, &mut o).unwrap();
        assert_eq!(a[1].seen_mu, vec![22.0]);
    }

    #[test]
    fn duplicate_and_removal() {
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(2);
        let h = bus.register_tap(1, DOWN1, Box::new(AddToMu(1.0))).unwrap();
        assert!(matches!(
            bus.register_tap(1, DOWN1, Box::new(AddToMu(1.0))),
            Err(Error::TapRejected(_))
        ));
        assert!(bus.remove_tap(h));
        bus.run_round(0, &mut a, &mut o).unwrap();
        assert_eq!(a[1].seen_mu, vec![10.0]);
        assert!(bus.mutations().is_empty());
    }

    #[test]
    fn wiretap_is_silent() {
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(2).with_memory_log(LogLevel::Digests);
        bus.register_tap(3, DOWN1, Box::new(Wiretap(vec![]))).unwrap();
        bus.run_round(0, &mut a, &mut o).unwrap();
        assert!(bus.records().iter().all(|r| r.mutated_by.is_empty()));
        assert_eq!(a[1].seen_mu, vec![10.0]);
    }

    #[test]
    fn agent_count_mismatch_is_protocol_error() {
        let (mut a, mut o) = setup();
        let mut bus = MessageBus::new(3);
        assert!(matches!(bus.run_round(4, &mut a, &mut o), Err(Error::Protocol { round: 4, .. })));
    }
}
