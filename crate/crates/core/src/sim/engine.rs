//! The event loop.
//!
//! A binary heap orders events by (time, kind priority, worker, request,
//! sequence); the fixed kind priority (cap settles, then role flips, batch
//! ends, transfer ends, arrivals, controller ticks) makes simultaneous
//! events a total order, so runs are deterministic.

use super::trace::{EventTrace, GpuSnap, TracePayload};
use super::{CompletedRequest, Role, SampleRow, SimConfig, SimMode, SimOutput, TimeSeries};
use crate::control::{Action, Controller, Direction, Policy, Snapshot, WorkerView};
use crate::perf::PerfModel;
use crate::workload::RequestSpec;
use crate::{duration_us, instant_us, us_to_secs, Micros, Watts};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvKind {
    CapSettle { gpu: usize, gen: u64 },
    RoleFlip { gpu: usize },
    PrefillEnd { gpu: usize },
    DecodeStepEnd { gpu: usize },
    CoalescedStepEnd { gpu: usize },
    TransferEnd { req: u64 },
    Arrival { req: u64 },
    Tick,
}

impl EvKind {
    fn priority(&self) -> u8 {
        match self {
            EvKind::CapSettle { .. } => 0,
            EvKind::RoleFlip { .. } => 1,
            EvKind::PrefillEnd { .. }
            | EvKind::DecodeStepEnd { .. }
            | EvKind::CoalescedStepEnd { .. } => 2,
            EvKind::TransferEnd { .. } => 3,
            EvKind::Arrival { .. } => 4,
            EvKind::Tick => 5,
        }
    }

    fn gpu(&self) -> usize {
        match self {
            EvKind::CapSettle { gpu, .. }
            | EvKind::RoleFlip { gpu }
            | EvKind::PrefillEnd { gpu }
            | EvKind::DecodeStepEnd { gpu }
            | EvKind::CoalescedStepEnd { gpu } => *gpu,
            _ => usize::MAX,
        }
    }

    fn req(&self) -> u64 {
        match self {
            EvKind::TransferEnd { req } | EvKind::Arrival { req } => *req,
            _ => u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ev {
    t: Micros,
    kind: EvKind,
    seq: u64,
}

impl Ev {
    fn key(&self) -> (Micros, u8, usize, u64, u64) {
        (
            self.t,
            self.kind.priority(),
            self.kind.gpu(),
            self.kind.req(),
            self.seq,
        )
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReqState {
    QueuedPrefill,
    Prefilling,
    AwaitingTransfer,
    InTransfer,
    Decoding,
    Done,
}

#[derive(Debug, Clone)]
struct Req {
    id: u64,
    arrival: Micros,
    input: u32,
    output: u32,
    state: ReqState,
    prefill_worker: usize,
    transfer_target: usize,
    t_prefill_start: Micros,
    t_prefill_end: Micros,
    t_transfer_start: Micros,
    t_transfer_end: Micros,
    t_join: Micros,
    t_complete: Micros,
    tokens_emitted: u32,
    /// Un-prefilled prompt tokens (coalesced chunking).
    prefill_remaining: u32,
}

#[derive(Debug, Clone)]
struct Worker {
    id: usize,
    role: Role,
    target_role: Role,
    draining: bool,
    commanded_w: Watts,
    effective_w: Watts,
    settle: Option<(Micros, Watts, u64)>,
    settle_gen: u64,
    queue: VecDeque<u64>,
    queued_tokens: u64,
    inflight_tokens: u64,
    batch: Vec<u64>,
    batch_running: bool,
    unslotted: usize,
    decode: Vec<u64>,
    stepping: bool,
    pending_join: VecDeque<u64>,
    flip_scheduled: bool,
    chunk: Option<(u64, u32)>,
}

impl Worker {
    fn accepts_prefill(&self) -> bool {
        matches!(self.role, Role::Prefill | Role::Mixed) && !self.draining
    }

    fn accepts_decode(&self) -> bool {
        self.role == Role::Decode && !self.draining
    }

    /// Prefill work not yet completed, for routing.
    fn outstanding_tokens(&self) -> u64 {
        self.queued_tokens + self.inflight_tokens
    }

    fn drained_empty(&self) -> bool {
        match self.role {
            Role::Prefill => !self.batch_running && self.queue.is_empty() && self.unslotted == 0,
            Role::Decode => {
                !self.stepping && self.decode.is_empty() && self.pending_join.is_empty()
            }
            Role::Mixed => false,
        }
    }
}

/// Lowest outstanding-token accepting worker, ties to the lowest id.
pub(crate) fn pick_min_load(loads: &[(usize, u64, bool)]) -> Option<usize> {
    loads
        .iter()
        .filter(|&&(_, _, accepting)| accepting)
        .min_by_key(|&&(id, load, _)| (load, id))
        .map(|&(id, _, _)| id)
}

/// FIFO batch formation: the head always enters; followers join while both
/// the request cap and the token budget hold.
pub(crate) fn form_batch(
    queue: &mut VecDeque<u64>,
    token_count: impl Fn(u64) -> u32,
    max_requests: usize,
    token_budget: u32,
) -> (Vec<u64>, u64) {
    let mut reqs = Vec::new();
    let mut tokens: u64 = 0;
    while let Some(&head) = queue.front() {
        let t = u64::from(token_count(head));
        if reqs.is_empty() || (reqs.len() < max_requests && tokens + t <= u64::from(token_budget)) {
            queue.pop_front();
            reqs.push(head);
            tokens += t;
            if reqs.len() >= max_requests {
                break;
            }
        } else {
            break;
        }
    }
    (reqs, tokens)
}

pub(crate) struct Engine<'a> {
    cfg: &'a SimConfig,
    perf: &'a PerfModel,
    controller: Controller,
    requests: Vec<Req>,
    workers: Vec<Worker>,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    now: Micros,
    trace: EventTrace,
    slots_free: usize,
    waiting_transfers: VecDeque<u64>,
    pending_raises: Vec<(usize, Watts)>,
    pending_settles: usize,
    completed: usize,
    settle_us: Micros,
    reassign_us: Micros,
    tick_us: Micros,
    sample_us: Micros,
    next_sample: Micros,
    rows: Vec<SampleRow>,
    prefill_done_in_period: usize,
    completions_in_period: usize,
    power_integral: f64,
    power_last_t: Micros,
    power_sum: u32,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        cfg: &'a SimConfig,
        perf: &'a PerfModel,
        workload: &[RequestSpec],
        controller: Controller,
    ) -> Self {
        let workers: Vec<Worker> = cfg
            .gpus
            .iter()
            .enumerate()
            .map(|(id, init)| Worker {
                id,
                role: init.role,
                target_role: init.role,
                draining: false,
                commanded_w: init.cap_w,
                effective_w: init.cap_w,
                settle: None,
                settle_gen: 0,
                queue: VecDeque::new(),
                queued_tokens: 0,
                inflight_tokens: 0,
                batch: Vec::new(),
                batch_running: false,
                unslotted: 0,
                decode: Vec::new(),
                stepping: false,
                pending_join: VecDeque::new(),
                flip_scheduled: false,
                chunk: None,
            })
            .collect();
        let requests: Vec<Req> = workload
            .iter()
            .map(|spec| Req {
                id: spec.id,
                arrival: instant_us(spec.arrival_time),
                input: spec.input_tokens,
                output: spec.output_tokens,
                state: ReqState::QueuedPrefill,
                prefill_worker: usize::MAX,
                transfer_target: usize::MAX,
                t_prefill_start: 0,
                t_prefill_end: 0,
                t_transfer_start: 0,
                t_transfer_end: 0,
                t_join: 0,
                t_complete: 0,
                tokens_emitted: 0,
                prefill_remaining: spec.input_tokens,
            })
            .collect();
        let power_sum = workers.iter().map(|w| w.effective_w).sum();
        let mut engine = Self {
            cfg,
            perf,
            controller,
            requests,
            workers,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            trace: EventTrace::default(),
            slots_free: cfg.transfer_buffer_slots,
            waiting_transfers: VecDeque::new(),
            pending_raises: Vec::new(),
            pending_settles: 0,
            completed: 0,
            settle_us: duration_us(cfg.settle_latency_s),
            reassign_us: duration_us(cfg.reassign_latency_s),
            tick_us: 0,
            sample_us: duration_us(cfg.sample_period_s),
            next_sample: 0,
            rows: Vec::new(),
            prefill_done_in_period: 0,
            completions_in_period: 0,
            power_integral: 0.0,
            power_last_t: 0,
            power_sum,
        };
        engine.tick_us = duration_us(engine.controller.cfg.tick_period_s);
        engine
    }

    fn schedule(&mut self, t: Micros, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            t,
            kind,
            seq: self.seq,
        }));
    }

    pub(crate) fn run(mut self) -> SimOutput {
        self.trace.push(
            0,
            TracePayload::Init {
                mode: self.cfg.mode.to_string(),
                budget_w: self.cfg.node_power_budget_w,
                policy: self.controller.cfg.policy,
                cooldown_s: self.controller.cfg.cooldown_s,
                min_power_w: self.controller.cfg.min_p_w,
                max_power_w: self.controller.cfg.max_p_w,
                decode_ceiling_w: self.controller.cfg.decode_ceiling_w,
                buffer_slots: self.cfg.transfer_buffer_slots,
                gpus: self
                    .workers
                    .iter()
                    .map(|w| GpuSnap {
                        gpu: w.id,
                        role: w.role,
                        cap_w: w.commanded_w,
                    })
                    .collect(),
            },
        );
        for req in &self.requests {
            self.seq += 1;
            self.heap.push(Reverse(Ev {
                t: req.arrival,
                kind: EvKind::Arrival { req: req.id },
                seq: self.seq,
            }));
        }
        let total = self.requests.len();
        if total > 0 && self.controller.cfg.policy != Policy::Static {
            self.schedule(self.tick_us, EvKind::Tick);
        }

        while let Some(Reverse(ev)) = self.heap.pop() {
            while ev.t > self.next_sample {
                self.emit_sample_row();
            }
            self.now = ev.t;
            match ev.kind {
                EvKind::Arrival { req } => self.on_arrival(req),
                EvKind::PrefillEnd { gpu } => self.on_prefill_end(gpu),
                EvKind::DecodeStepEnd { gpu } => self.on_decode_step_end(gpu),
                EvKind::CoalescedStepEnd { gpu } => self.on_coalesced_step_end(gpu),
                EvKind::TransferEnd { req } => self.on_transfer_end(req),
                EvKind::CapSettle { gpu, gen } => self.on_cap_settle(gpu, gen),
                EvKind::RoleFlip { gpu } => self.on_role_flip(gpu),
                EvKind::Tick => self.on_tick(),
            }
            if self.completed == total {
                break;
            }
        }

        let end = self.now;
        if self.rows.is_empty() || self.rows.last().unwrap().t_us < end {
            let row = self.sample_row_at(end);
            self.rows.push(row);
        }
        self.power_integral += self.power_sum as f64 * (end - self.power_last_t) as f64;
        let avg_power = if end > 0 {
            self.power_integral / end as f64
        } else {
            self.power_sum as f64
        };

        debug_assert!(self.requests.iter().all(|r| r.state == ReqState::Done));
        let completed = self
            .requests
            .iter()
            .map(|r| CompletedRequest {
                id: r.id,
                arrival_us: r.arrival,
                input_tokens: r.input,
                output_tokens: r.output,
                prefill_start_us: r.t_prefill_start,
                prefill_end_us: r.t_prefill_end,
                transfer_start_us: r.t_transfer_start,
                transfer_end_us: r.t_transfer_end,
                decode_join_us: r.t_join,
                completion_us: r.t_complete,
            })
            .collect();
        SimOutput {
            completed,
            trace: self.trace,
            timeseries: TimeSeries { rows: self.rows },
            avg_provisioned_power_w: avg_power,
            end_us: end,
        }
    }

    // ── sampling and power accounting ───────────────────────────────────

    fn sample_row_at(&self, t: Micros) -> SampleRow {
        let period_s = us_to_secs(self.sample_us);
        SampleRow {
            t_us: t,
            gpus: self
                .workers
                .iter()
                .map(|w| {
                    let batch = match w.role {
                        Role::Prefill => w.batch.len(),
                        Role::Decode | Role::Mixed => w.decode.len(),
                    };
                    (w.role, w.effective_w, w.queue.len(), batch)
                })
                .collect(),
            rate_p: self.prefill_done_in_period as f64 / period_s,
            rate_d: self.completions_in_period as f64 / period_s,
        }
    }

    fn emit_sample_row(&mut self) {
        let row = self.sample_row_at(self.next_sample);
        self.rows.push(row);
        self.prefill_done_in_period = 0;
        self.completions_in_period = 0;
        self.next_sample += self.sample_us;
    }

    fn set_effective(&mut self, gpu: usize, cap: Watts) {
        let old = self.workers[gpu].effective_w;
        if old == cap {
            return;
        }
        self.power_integral += self.power_sum as f64 * (self.now - self.power_last_t) as f64;
        self.power_last_t = self.now;
        self.power_sum = self.power_sum - old + cap;
        self.workers[gpu].effective_w = cap;
    }

    // ── request flow ────────────────────────────────────────────────────

    fn route_target(&self, _input_tokens: u32) -> usize {
        let loads: Vec<(usize, u64, bool)> = self
            .workers
            .iter()
            .map(|w| (w.id, w.outstanding_tokens(), w.accepts_prefill()))
            .collect();
        pick_min_load(&loads).expect("at least one accepting prefill worker")
    }

    fn on_arrival(&mut self, req_id: u64) {
        let input = self.requests[req_id as usize].input;
        let gpu = self.route_target(input);
        self.trace
            .push(self.now, TracePayload::Arrival { req: req_id, gpu });
        let req = &mut self.requests[req_id as usize];
        req.prefill_worker = gpu;
        req.state = ReqState::QueuedPrefill;
        let w = &mut self.workers[gpu];
        w.queue.push_back(req_id);
        w.queued_tokens += u64::from(input);
        match self.cfg.mode {
            SimMode::Disaggregated => self.try_start_prefill(gpu),
            SimMode::Coalesced => self.try_start_coalesced(gpu),
        }
    }

    fn stalled(&self, gpu: usize) -> bool {
        self.workers[gpu].unslotted > self.cfg.transfer_buffer_slots
    }

    fn try_start_prefill(&mut self, gpu: usize) {
        let w = &self.workers[gpu];
        if w.batch_running || !w.accepts_prefill() || w.queue.is_empty() || self.stalled(gpu) {
            return;
        }
        let token_of = {
            let requests = &self.requests;
            move |id: u64| requests[id as usize].input
        };
        let (reqs, tokens) = {
            let max = self.cfg.max_prefill_batch;
            let budget = self.cfg.prefill_token_budget;
            let w = &mut self.workers[gpu];
            let mut queue = std::mem::take(&mut w.queue);
            let formed = form_batch(&mut queue, token_of, max, budget);
            w.queue = queue;
            formed
        };
        debug_assert!(!reqs.is_empty());
        for &id in &reqs {
            let req = &mut self.requests[id as usize];
            req.state = ReqState::Prefilling;
            req.t_prefill_start = self.now;
        }
        let w = &mut self.workers[gpu];
        w.queued_tokens -= tokens;
        w.inflight_tokens += tokens;
        w.batch = reqs.clone();
        w.batch_running = true;
        let cap = w.effective_w;
        self.trace
            .push(self.now, TracePayload::PrefillStart { gpu, reqs, tokens });
        let latency = self
            .perf
            .prefill_latency(tokens, self.workers[gpu].batch.len(), cap)
            .expect("caps stay in range");
        self.schedule(self.now + duration_us(latency), EvKind::PrefillEnd { gpu });
    }

    fn on_prefill_end(&mut self, gpu: usize) {
        let reqs = std::mem::take(&mut self.workers[gpu].batch);
        self.workers[gpu].batch_running = false;
        self.workers[gpu].inflight_tokens = 0;
        self.trace.push(
            self.now,
            TracePayload::PrefillEnd {
                gpu,
                reqs: reqs.clone(),
            },
        );
        self.prefill_done_in_period += reqs.len();
        for &id in &reqs {
            let req = &mut self.requests[id as usize];
            req.t_prefill_end = self.now;
            req.tokens_emitted = 1;
            req.state = ReqState::AwaitingTransfer;
            if self.slots_free > 0 {
                self.begin_transfer(id);
            } else {
                self.waiting_transfers.push_back(id);
                self.workers[gpu].unslotted += 1;
            }
        }
        self.try_start_prefill(gpu);
        self.maybe_schedule_flip(gpu);
    }

    fn decode_target(&self) -> usize {
        self.workers
            .iter()
            .filter(|w| w.accepts_decode())
            .min_by_key(|w| (w.decode.len(), w.id))
            .map(|w| w.id)
            .expect("at least one accepting decode worker")
    }

    fn begin_transfer(&mut self, req_id: u64) {
        debug_assert!(self.slots_free > 0);
        self.slots_free -= 1;
        let to = self.decode_target();
        let req = &mut self.requests[req_id as usize];
        req.state = ReqState::InTransfer;
        req.t_transfer_start = self.now;
        req.transfer_target = to;
        let from = req.prefill_worker;
        let input = u64::from(req.input);
        self.trace.push(
            self.now,
            TracePayload::TransferStart {
                req: req_id,
                from_gpu: from,
                to_gpu: to,
            },
        );
        let latency = self.perf.kv_transfer_latency(input).expect("tokens >= 1");
        self.schedule(
            self.now + duration_us(latency),
            EvKind::TransferEnd { req: req_id },
        );
    }

    fn on_transfer_end(&mut self, req_id: u64) {
        self.slots_free += 1;
        self.trace
            .push(self.now, TracePayload::TransferEnd { req: req_id });
        // A freed slot immediately admits the oldest waiting handoff.
        if let Some(next) = self.waiting_transfers.pop_front() {
            let producer = self.requests[next as usize].prefill_worker;
            self.workers[producer].unslotted -= 1;
            self.begin_transfer(next);
            self.try_start_prefill(producer);
            self.maybe_schedule_flip(producer);
        }
        let req = &mut self.requests[req_id as usize];
        req.t_transfer_end = self.now;
        if req.output == 1 {
            // Prefill already produced the only token; the request is done
            // once its KV handoff lands.
            req.t_join = self.now;
            self.complete(req_id);
            return;
        }
        let mut target = self.requests[req_id as usize].transfer_target;
        if !self.workers[target].accepts_decode() {
            target = self.decode_target();
            self.requests[req_id as usize].transfer_target = target;
        }
        if self.workers[target].stepping {
            self.workers[target].pending_join.push_back(req_id);
        } else {
            debug_assert!(self.workers[target].decode.is_empty());
            self.join_decode(req_id, target);
            self.start_decode_step(target);
        }
    }

    fn join_decode(&mut self, req_id: u64, gpu: usize) {
        let req = &mut self.requests[req_id as usize];
        req.state = ReqState::Decoding;
        req.t_join = self.now;
        self.workers[gpu].decode.push(req_id);
        self.trace
            .push(self.now, TracePayload::DecodeJoin { req: req_id, gpu });
    }

    fn start_decode_step(&mut self, gpu: usize) {
        let w = &self.workers[gpu];
        debug_assert!(!w.stepping && !w.decode.is_empty());
        let latency = self
            .perf
            .decode_step_latency(w.decode.len(), w.effective_w)
            .expect("caps stay in range");
        self.workers[gpu].stepping = true;
        self.schedule(
            self.now + duration_us(latency),
            EvKind::DecodeStepEnd { gpu },
        );
    }

    fn on_decode_step_end(&mut self, gpu: usize) {
        self.workers[gpu].stepping = false;
        let batch = std::mem::take(&mut self.workers[gpu].decode);
        let mut remaining = Vec::with_capacity(batch.len());
        for id in batch {
            let req = &mut self.requests[id as usize];
            req.tokens_emitted += 1;
            if req.tokens_emitted >= req.output {
                self.complete(id);
            } else {
                remaining.push(id);
            }
        }
        self.workers[gpu].decode = remaining;
        // Joins happen between steps, oldest handoff first.
        while self.workers[gpu].decode.len() < self.cfg.max_decode_batch {
            match self.workers[gpu].pending_join.pop_front() {
                Some(id) => self.join_decode(id, gpu),
                None => break,
            }
        }
        if !self.workers[gpu].decode.is_empty() {
            self.start_decode_step(gpu);
        } else {
            self.maybe_schedule_flip(gpu);
        }
    }

    fn complete(&mut self, req_id: u64) {
        let req = &mut self.requests[req_id as usize];
        req.state = ReqState::Done;
        req.t_complete = self.now;
        let ttft = us_to_secs(req.t_prefill_end - req.arrival);
        let tpot = if req.output > 1 {
            us_to_secs(req.t_complete - req.t_prefill_end) / f64::from(req.output - 1)
        } else {
            0.0
        };
        self.completed += 1;
        self.completions_in_period += 1;
        self.trace
            .push(self.now, TracePayload::Complete { req: req_id });
        self.controller.record_completion(self.now, ttft, tpot);
    }

    // ── coalesced mode ──────────────────────────────────────────────────

    fn try_start_coalesced(&mut self, gpu: usize) {
        if self.workers[gpu].stepping {
            return;
        }
        let has_chunk = !self.workers[gpu].queue.is_empty();
        let has_decode = !self.workers[gpu].decode.is_empty();
        if !has_chunk && !has_decode {
            return;
        }
        let cap = self.workers[gpu].effective_w;
        let mut latency = 0.0;
        if has_chunk {
            let head = *self.workers[gpu].queue.front().unwrap();
            let req = &mut self.requests[head as usize];
            if req.state == ReqState::QueuedPrefill {
                req.state = ReqState::Prefilling;
                req.t_prefill_start = self.now;
                self.trace.push(
                    self.now,
                    TracePayload::PrefillStart {
                        gpu,
                        reqs: vec![head],
                        tokens: u64::from(req.input),
                    },
                );
            }
            let tokens = req.prefill_remaining.min(self.cfg.chunk_size);
            self.workers[gpu].chunk = Some((head, tokens));
            latency += self
                .perf
                .prefill_latency(u64::from(tokens), 1, cap)
                .expect("caps stay in range");
        } else {
            self.workers[gpu].chunk = None;
        }
        if has_decode {
            latency += self
                .perf
                .decode_step_latency(self.workers[gpu].decode.len(), cap)
                .expect("caps stay in range");
        }
        self.workers[gpu].stepping = true;
        self.schedule(
            self.now + duration_us(latency),
            EvKind::CoalescedStepEnd { gpu },
        );
    }

    fn on_coalesced_step_end(&mut self, gpu: usize) {
        self.workers[gpu].stepping = false;
        // Decode half: one token per active sequence.
        let batch = std::mem::take(&mut self.workers[gpu].decode);
        let mut remaining = Vec::with_capacity(batch.len());
        for id in batch {
            let req = &mut self.requests[id as usize];
            req.tokens_emitted += 1;
            if req.tokens_emitted >= req.output {
                self.complete(id);
            } else {
                remaining.push(id);
            }
        }
        self.workers[gpu].decode = remaining;
        // Prefill half: retire the chunk; the last chunk produces token one.
        if let Some((head, tokens)) = self.workers[gpu].chunk.take() {
            let req = &mut self.requests[head as usize];
            req.prefill_remaining -= tokens;
            self.workers[gpu].queued_tokens -= u64::from(tokens);
            if req.prefill_remaining == 0 {
                let popped = self.workers[gpu].queue.pop_front();
                debug_assert_eq!(popped, Some(head));
                let req = &mut self.requests[head as usize];
                req.t_prefill_end = self.now;
                req.t_transfer_start = self.now;
                req.t_transfer_end = self.now;
                req.tokens_emitted = 1;
                self.prefill_done_in_period += 1;
                self.trace.push(
                    self.now,
                    TracePayload::PrefillEnd {
                        gpu,
                        reqs: vec![head],
                    },
                );
                if req.output == 1 {
                    self.requests[head as usize].t_join = self.now;
                    self.complete(head);
                } else if self.workers[gpu].decode.len() < self.cfg.max_decode_batch {
                    self.join_decode(head, gpu);
                } else {
                    self.workers[gpu].pending_join.push_back(head);
                }
            }
        }
        while self.workers[gpu].decode.len() < self.cfg.max_decode_batch {
            match self.workers[gpu].pending_join.pop_front() {
                Some(id) => self.join_decode(id, gpu),
                None => break,
            }
        }
        self.try_start_coalesced(gpu);
    }

    // ── power and role commands ─────────────────────────────────────────

    fn apply_cap_command(&mut self, gpu: usize, new: Watts) {
        let current = self.workers[gpu].commanded_w;
        if new == current {
            return;
        }
        debug_assert!(self.workers[gpu].settle.is_none(), "command during settle");
        self.workers[gpu].commanded_w = new;
        if new < current {
            let deadline = self.now + self.settle_us;
            self.workers[gpu].settle_gen += 1;
            let gen = self.workers[gpu].settle_gen;
            self.workers[gpu].settle = Some((deadline, new, gen));
            self.pending_settles += 1;
            self.trace.push(
                self.now,
                TracePayload::CapCommand {
                    gpu,
                    from_w: current,
                    to_w: new,
                    effective_at_us: deadline,
                },
            );
            self.schedule(deadline, EvKind::CapSettle { gpu, gen });
        } else {
            self.trace.push(
                self.now,
                TracePayload::CapCommand {
                    gpu,
                    from_w: current,
                    to_w: new,
                    effective_at_us: self.now,
                },
            );
            self.set_effective(gpu, new);
        }
    }

    fn on_cap_settle(&mut self, gpu: usize, gen: u64) {
        let Some((deadline, new, settle_gen)) = self.workers[gpu].settle else {
            return;
        };
        if settle_gen != gen {
            return;
        }
        debug_assert_eq!(deadline, self.now);
        self.workers[gpu].settle = None;
        self.set_effective(gpu, new);
        self.trace
            .push(self.now, TracePayload::CapSettle { gpu, cap_w: new });
        self.pending_settles -= 1;
        if self.pending_settles == 0 && !self.pending_raises.is_empty() {
            let raises = std::mem::take(&mut self.pending_raises);
            for (g, cap) in raises {
                self.apply_cap_command(g, cap);
            }
        }
    }

    fn maybe_schedule_flip(&mut self, gpu: usize) {
        let w = &self.workers[gpu];
        if !w.draining || w.flip_scheduled || !w.drained_empty() {
            return;
        }
        self.workers[gpu].flip_scheduled = true;
        self.schedule(self.now + self.reassign_us, EvKind::RoleFlip { gpu });
    }

    fn on_role_flip(&mut self, gpu: usize) {
        let target = self.workers[gpu].target_role;
        self.workers[gpu].role = target;
        self.workers[gpu].draining = false;
        self.workers[gpu].flip_scheduled = false;
        self.trace
            .push(self.now, TracePayload::RoleFlip { gpu, role: target });
    }

    fn start_drain(&mut self, gpu: usize, to_role: Role) {
        debug_assert!(!self.workers[gpu].draining);
        self.workers[gpu].draining = true;
        self.workers[gpu].target_role = to_role;
        self.trace
            .push(self.now, TracePayload::DrainStart { gpu, to_role });
        match self.workers[gpu].role {
            Role::Prefill => {
                // Queued work leaves with the role; the running batch finishes here.
                let moved = std::mem::take(&mut self.workers[gpu].queue);
                self.workers[gpu].queued_tokens = 0;
                for id in moved {
                    let input = self.requests[id as usize].input;
                    let target = self.route_target(input);
                    self.requests[id as usize].prefill_worker = target;
                    let w = &mut self.workers[target];
                    w.queue.push_back(id);
                    w.queued_tokens += u64::from(input);
                    self.try_start_prefill(target);
                }
            }
            Role::Decode => {
                let moved = std::mem::take(&mut self.workers[gpu].pending_join);
                for id in moved {
                    let target = self.decode_target();
                    self.requests[id as usize].transfer_target = target;
                    if self.workers[target].stepping {
                        self.workers[target].pending_join.push_back(id);
                    } else {
                        self.join_decode(id, target);
                        self.start_decode_step(target);
                    }
                }
            }
            Role::Mixed => unreachable!("coalesced workers never drain"),
        }
        self.maybe_schedule_flip(gpu);
    }

    // ── controller integration ──────────────────────────────────────────

    fn snapshot(&self) -> Snapshot {
        let view = |w: &Worker| WorkerView {
            id: w.id,
            commanded_w: w.commanded_w,
            queued_tokens: w.queued_tokens,
            active_seqs: w.decode.len(),
            draining: w.draining,
        };
        let prefill: Vec<WorkerView> = self
            .workers
            .iter()
            .filter(|w| w.target_role == Role::Prefill)
            .map(view)
            .collect();
        let decode: Vec<WorkerView> = self
            .workers
            .iter()
            .filter(|w| w.target_role == Role::Decode)
            .map(view)
            .collect();
        let queued = self
            .workers
            .iter()
            .filter(|w| w.target_role == Role::Prefill)
            .map(|w| w.queue.len())
            .sum();
        Snapshot {
            now_us: self.now,
            prefill,
            decode,
            prefill_queued_requests: queued,
            transition_pending: self.pending_settles > 0 || !self.pending_raises.is_empty(),
            budget_w: self.cfg.node_power_budget_w,
            gpu_count: self.workers.len(),
        }
    }

    fn on_tick(&mut self) {
        let snapshot = self.snapshot();
        match self.controller.tick(&snapshot) {
            Action::None => {}
            Action::Saturated(direction) => {
                self.trace
                    .push(self.now, TracePayload::Saturated { direction });
            }
            Action::MovePower(plan) => {
                self.trace.push(
                    self.now,
                    TracePayload::MovePower {
                        direction: plan.direction,
                        donor_cap_w: plan.donor_new_w,
                        recipient_cap_w: plan.recipient_new_w,
                        freed_w: plan.freed_w,
                    },
                );
                debug_assert!(self.pending_raises.is_empty());
                for &gpu in &plan.donor_ids {
                    self.apply_cap_command(gpu, plan.donor_new_w);
                }
                let raises: Vec<(usize, Watts)> = plan
                    .recipient_ids
                    .iter()
                    .filter(|&&gpu| self.workers[gpu].commanded_w < plan.recipient_new_w)
                    .map(|&gpu| (gpu, plan.recipient_new_w))
                    .collect();
                if self.pending_settles == 0 {
                    for (gpu, cap) in raises {
                        self.apply_cap_command(gpu, cap);
                    }
                } else {
                    self.pending_raises = raises;
                }
            }
            Action::MoveGpu(plan) => {
                self.trace.push(
                    self.now,
                    TracePayload::MoveGpu {
                        direction: plan.direction,
                        gpu: plan.donor_id,
                    },
                );
                let to_role = match plan.direction {
                    Direction::DecodeToPrefill => Role::Prefill,
                    Direction::PrefillToDecode => Role::Decode,
                };
                self.start_drain(plan.donor_id, to_role);
                self.trace.push(
                    self.now,
                    TracePayload::DistributeUniform {
                        cap_w: plan.uniform_cap_w,
                    },
                );
                debug_assert!(self.pending_raises.is_empty());
                let mut raises = Vec::new();
                for gpu in 0..self.workers.len() {
                    let current = self.workers[gpu].commanded_w;
                    if current > plan.uniform_cap_w {
                        self.apply_cap_command(gpu, plan.uniform_cap_w);
                    } else if current < plan.uniform_cap_w {
                        raises.push((gpu, plan.uniform_cap_w));
                    }
                }
                if self.pending_settles == 0 {
                    for (gpu, cap) in raises {
                        self.apply_cap_command(gpu, cap);
                    }
                } else {
                    self.pending_raises = raises;
                }
            }
        }
        if self.completed < self.requests.len() {
            self.schedule(self.now + self.tick_us, EvKind::Tick);
        }
    }
}
