//! One exchange round: every agent encodes its frame, payloads travel over
//! the links in simulated time, receivers decode and fuse.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::FidelityMetrics;
use super::world::{AgentRole, SimWorld};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;
use crate::wire::{pack, unpack, Payload, PAYLOAD_HEADER_LEN};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub from: u16,
    pub to: u16,
    /// Bitstream bits put on the link, padding included.
    pub payload_bits: u64,
    /// Header bits, reported separately from the budgeted payload.
    pub header_bits: u64,
    pub dropped: bool,
    /// Arrival time in seconds after the round started.
    pub delivery_time: Option<f64>,
    pub error: Option<String>,
    pub fidelity: Option<FidelityMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Fidelity {
    /// Nothing was decoded at this agent.
    NoCollaboration,
    Measured(FidelityMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentReport {
    pub agent_id: u16,
    pub role: AgentRole,
    pub received: usize,
    /// Mean over every payload this agent decoded.
    pub fidelity: Fidelity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub frame: u32,
    pub links: Vec<LinkReport>,
    pub total_bits: u64,
    pub header_bits: u64,
    pub budget_bits: u64,
    pub budget_satisfied: bool,
    pub dropped: usize,
    pub agents: Vec<AgentReport>,
}

pub struct RoundOutcome {
    pub report: RoundReport,
    /// Fused features per agent id.
    pub fused: BTreeMap<u16, FeatureMap>,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

pub fn run_round(world: &SimWorld, frame: u32) -> Result<RoundReport> {
    Ok(run_round_detailed(world, frame)?.report)
}

pub fn run_round_detailed(world: &SimWorld, frame: u32) -> Result<RoundOutcome> {
    // Encoding is independent per agent.
    let encoded: Vec<(FeatureMap, Vec<u8>)> = world
        .agents()
        .par_iter()
        .map(|a| {
            let local = a.source.frame(frame)?;
            let idx = a.codec.encode(&local)?;
            let payload = pack(&idx, a.codec.codebooks().content_hash(), frame, a.agent_id)?;
            Ok((local, payload.to_bytes()))
        })
        .collect::<Result<_>>()?;
    let position: BTreeMap<u16, usize> = world
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| (a.agent_id, i))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(world.seed());
    rng.set_stream(frame as u64);
    let mut links = Vec::new();
    let mut queue = BinaryHeap::new();
    for (&from, tos) in &world.budget().neighborhoods {
        for &to in tos {
            let link = world
                .link(from, to)
                .ok_or_else(|| Error::Config(format!("no link {from} -> {to}")))?;
            let bytes = &encoded[position[&from]].1;
            let payload_bits = 8 * (bytes.len() - PAYLOAD_HEADER_LEN) as u64;
            let dropped = rng.random::<f64>() < link.loss_probability;
            let seq = links.len();
            let delivery_time = (!dropped).then(|| link.delivery_delay(payload_bits));
            if let Some(time) = delivery_time {
                queue.push(Reverse(Event { time, seq }));
            }
            links.push(LinkReport {
                from,
                to,
                payload_bits,
                header_bits: 8 * PAYLOAD_HEADER_LEN as u64,
                dropped,
                delivery_time,
                error: None,
                fidelity: None,
            });
        }
    }

    let mut received: BTreeMap<u16, Vec<(FeatureMap, FidelityMetrics)>> = BTreeMap::new();
    while let Some(Reverse(event)) = queue.pop() {
        let link = &mut links[event.seq];
        let (sender, receiver) = (position[&link.from], position[&link.to]);
        let codec = &world.agents()[receiver].codec;
        let decoded = Payload::from_bytes(&encoded[sender].1)
            .and_then(|p| unpack(&p, codec.codebooks()))
            .and_then(|idx| codec.decompress(&idx));
        match decoded {
            Ok(map) => {
                let metrics = FidelityMetrics::measure(&encoded[sender].0, &map)?;
                link.fidelity = Some(metrics);
                received.entry(link.to).or_default().push((map, metrics));
            }
            Err(
                e @ (Error::CodebookDesync { .. } | Error::Protocol(_) | Error::CorruptPayload(_)),
            ) => {
                log::warn!("link {} -> {}: {e}", link.from, link.to);
                link.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let mut agents = Vec::new();
    let mut fused = BTreeMap::new();
    for (a, (local, _)) in world.agents().iter().zip(&encoded) {
        let got = received.remove(&a.agent_id).unwrap_or_default();
        let metrics: Vec<FidelityMetrics> = got.iter().map(|(_, m)| *m).collect();
        let remotes: Vec<FeatureMap> = got.into_iter().map(|(map, _)| map).collect();
        fused.insert(a.agent_id, world.fusion().fuse(local, &remotes)?);
        agents.push(AgentReport {
            agent_id: a.agent_id,
            role: a.role,
            received: remotes.len(),
            fidelity: match FidelityMetrics::mean(&metrics) {
                Some(m) => Fidelity::Measured(m),
                None => Fidelity::NoCollaboration,
            },
        });
    }

    let total_bits = links.iter().map(|l| l.payload_bits).sum();
    let budget_bits = world.budget().total_budget;
    let report = RoundReport {
        frame,
        total_bits,
        header_bits: links.iter().map(|l| l.header_bits).sum(),
        budget_bits,
        budget_satisfied: total_bits <= budget_bits,
        dropped: links.iter().filter(|l| l.dropped).count(),
        links,
        agents,
    };
    Ok(RoundOutcome { report, fused })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundReport {
    /// One row per link.
    pub fn links_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "frame",
            "from",
            "to",
            "payload_bits",
            "header_bits",
            "dropped",
            "delivery_time",
            "mse",
            "cosine",
            "psnr",
            "error",
        ])
        .expect("in-memory csv");
        for l in &self.links {
            let f = l.fidelity.as_ref();
            w.write_record([
                self.frame.to_string(),
                l.from.to_string(),
                l.to.to_string(),
                l.payload_bits.to_string(),
                l.header_bits.to_string(),
                l.dropped.to_string(),
                opt(l.delivery_time),
                opt(f.map(|m| m.mse)),
                opt(f.map(|m| m.cosine)),
                opt(f.map(|m| m.psnr)),
                l.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// One row per agent.
    pub fn agents_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "frame", "agent", "role", "received", "mse", "cosine", "psnr",
        ])
        .expect("in-memory csv");
        for a in &self.agents {
            let m = match a.fidelity {
                Fidelity::Measured(m) => Some(m),
                Fidelity::NoCollaboration => None,
            };
            w.write_record([
                self.frame.to_string(),
                a.agent_id.to_string(),
                a.role.to_string(),
                a.received.to_string(),
                m.map(|m| m.mse.to_string())
                    .unwrap_or_else(|| "no collaboration".into()),
                opt(m.map(|m| m.cosine)),
                opt(m.map(|m| m.psnr)),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

impl fmt::Display for RoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(
            s,
            "frame {}: {} payload bits (+{} header bits) against budget {}: {}",
            self.frame,
            self.total_bits,
            self.header_bits,
            self.budget_bits,
            if self.budget_satisfied {
                "within budget"
            } else {
                "OVER BUDGET"
            }
        )?;
        writeln!(
            s,
            "{:>6} {:>6} {:>12} {:>8} {:>12} {:>12}",
            "from", "to", "bits", "dropped", "arrival_s", "mse"
        )?;
        for l in &self.links {
            writeln!(
                s,
                "{:>6} {:>6} {:>12} {:>8} {:>12} {:>12}",
                l.from,
                l.to,
                l.payload_bits,
                l.dropped,
                l.delivery_time
                    .map(|t| format!("{t:.6}"))
                    .unwrap_or_else(|| "-".into()),
                match (&l.fidelity, &l.error) {
                    (Some(m), _) => format!("{:.6}", m.mse),
                    (None, Some(_)) => "error".into(),
                    (None, None) => "-".into(),
                }
            )?;
        }
        for a in &self.agents {
            match a.fidelity {
                Fidelity::Measured(m) => writeln!(
                    s,
                    "agent {} ({}): {} received, mse {:.6}, cosine {:.4}, psnr {:.2} dB",
                    a.agent_id, a.role, a.received, m.mse, m.cosine, m.psnr
                )?,
                Fidelity::NoCollaboration => {
                    writeln!(s, "agent {} ({}): no collaboration", a.agent_id, a.role)?
                }
            }
        }
        f.write_str(&s)
    }
}
