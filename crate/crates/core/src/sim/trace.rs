//! Structured event trace of one run, exportable as JSONL
//! (one `{"t_us": ..., "kind": ..., ...}` object per line).
//!
//! The trace is self-contained: the leading `init` event carries the budget,
//! policy constants, and initial roles/caps, so invariants can be audited
//! from the trace alone.

use crate::control::{Direction, Policy};
use crate::sim::Role;
use crate::{Micros, Watts};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSnap {
    pub gpu: usize,
    pub role: Role,
    pub cap_w: Watts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TracePayload {
    Init {
        mode: String,
        budget_w: u32,
        policy: Policy,
        cooldown_s: f64,
        min_power_w: Watts,
        max_power_w: Watts,
        decode_ceiling_w: Watts,
        buffer_slots: usize,
        gpus: Vec<GpuSnap>,
    },
    Arrival {
        req: u64,
        gpu: usize,
    },
    PrefillStart {
        gpu: usize,
        reqs: Vec<u64>,
        tokens: u64,
    },
    PrefillEnd {
        gpu: usize,
        reqs: Vec<u64>,
    },
    TransferStart {
        req: u64,
        from_gpu: usize,
        to_gpu: usize,
    },
    TransferEnd {
        req: u64,
    },
    DecodeJoin {
        req: u64,
        gpu: usize,
    },
    Complete {
        req: u64,
    },
    CapCommand {
        gpu: usize,
        from_w: Watts,
        to_w: Watts,
        effective_at_us: Micros,
    },
    CapSettle {
        gpu: usize,
        cap_w: Watts,
    },
    DrainStart {
        gpu: usize,
        to_role: Role,
    },
    RoleFlip {
        gpu: usize,
        role: Role,
    },
    MovePower {
        direction: Direction,
        donor_cap_w: Watts,
        recipient_cap_w: Watts,
        freed_w: u32,
    },
    MoveGpu {
        direction: Direction,
        gpu: usize,
    },
    DistributeUniform {
        cap_w: Watts,
    },
    Saturated {
        direction: Direction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_us: Micros,
    #[serde(flatten)]
    pub payload: TracePayload,
}

/// Time-ordered event log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn push(&mut self, t_us: Micros, payload: TracePayload) {
        debug_assert!(self.events.last().is_none_or(|e| e.t_us <= t_us));
        self.events.push(TraceEvent { t_us, payload });
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut w, event)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: TraceEvent = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            events.push(event);
        }
        Ok(Self { events })
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter()
    }
}
