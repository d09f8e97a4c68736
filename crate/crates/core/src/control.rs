//! Reactive power and GPU reallocation.
//!
//! The controller is a pure decision function ticked by the simulation loop.
//! Each tick it compares windowed latency statistics and prefill queue
//! pressure against the targets in effect and decides at most one action:
//! shift power between the pools or, once the power axis is exhausted,
//! reassign a whole GPU and re-level every cap to budget/gpu_count. A
//! cooldown separates successive actions so the system can absorb each move,
//! and donor caps always come down (and settle) before recipient caps rise.

use crate::workload::SloSchedule;
use crate::{Micros, Watts};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Which reallocation axes a run may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Fixed roles and caps for the whole run.
    Static,
    /// Power shifts only; roles never change.
    DynPower,
    /// GPU role changes only; caps stay at their uniform value.
    DynGpu,
    /// Power shifts first, GPU moves once power saturates.
    DynBoth,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Policy::Static => "static",
            Policy::DynPower => "dyn-power",
            Policy::DynGpu => "dyn-gpu",
            Policy::DynBoth => "dyn-both",
        };
        write!(f, "{name}")
    }
}

/// Statistic applied to the metric windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    P90,
    Mean,
}

/// Direction of a reallocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    DecodeToPrefill,
    PrefillToDecode,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::DecodeToPrefill => write!(f, "decode->prefill"),
            Direction::PrefillToDecode => write!(f, "prefill->decode"),
        }
    }
}

/// Controller tuning. Defaults follow the shipped study setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub policy: Policy,
    /// Latency targets, possibly phase-dependent.
    pub slo: SloSchedule,
    /// Prefill queue length that counts as sustained pressure.
    pub queue_threshold: usize,
    /// Minimum spacing between successive actions.
    pub cooldown_s: f64,
    /// Control loop period.
    pub tick_period_s: f64,
    /// Watts each donor gives up per power move.
    pub power_step_w: Watts,
    pub min_p_w: Watts,
    pub max_p_w: Watts,
    /// Decode caps are never raised above this; decode gains little beyond it.
    pub decode_ceiling_w: Watts,
    /// Length of the completion-stamped metric window.
    pub metric_window_s: f64,
    pub statistic: Statistic,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Static,
            slo: SloSchedule::constant(1.0, 0.040),
            queue_threshold: 8,
            cooldown_s: 4.0,
            tick_period_s: 0.25,
            power_step_w: 50,
            min_p_w: 400,
            max_p_w: 750,
            decode_ceiling_w: 600,
            metric_window_s: 5.0,
            statistic: Statistic::P90,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_p_w >= self.max_p_w {
            return Err(format!(
                "min_p {} W must be below max_p {} W",
                self.min_p_w, self.max_p_w
            ));
        }
        if self.decode_ceiling_w < self.min_p_w || self.decode_ceiling_w > self.max_p_w {
            return Err(format!(
                "decode_ceiling {} W must lie in [{}, {}] W",
                self.decode_ceiling_w, self.min_p_w, self.max_p_w
            ));
        }
        if !(self.tick_period_s > 0.0 && self.cooldown_s > self.tick_period_s) {
            return Err(format!(
                "need cooldown ({} s) > tick period ({} s) > 0",
                self.cooldown_s, self.tick_period_s
            ));
        }
        if self.power_step_w == 0 {
            return Err("power_step must be positive".into());
        }
        if self.metric_window_s <= 0.0 {
            return Err("metric_window must be positive".into());
        }
        Ok(())
    }
}

/// What the controller sees of one worker. Pools are grouped by target role,
/// so a worker draining toward a role is adjusted with its new pool.
#[derive(Debug, Clone, Copy)]
pub struct WorkerView {
    pub id: usize,
    pub commanded_w: Watts,
    /// Prompt tokens sitting in the worker's queue.
    pub queued_tokens: u64,
    /// Sequences in the active decode batch.
    pub active_seqs: usize,
    pub draining: bool,
}

/// Immutable per-tick view of the node.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub now_us: Micros,
    pub prefill: Vec<WorkerView>,
    pub decode: Vec<WorkerView>,
    /// Requests queued (not yet batched) across prefill workers.
    pub prefill_queued_requests: usize,
    /// A cap transition or scheduled raise is still in flight.
    pub transition_pending: bool,
    pub budget_w: u32,
    pub gpu_count: usize,
}

/// Uniform cap adjustment of one power move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PowerMovePlan {
    pub direction: Direction,
    pub donor_ids: Vec<usize>,
    pub donor_new_w: Watts,
    pub recipient_ids: Vec<usize>,
    pub recipient_new_w: Watts,
    /// Watts freed by the donors; anything recipients cannot absorb stays
    /// unallocated headroom.
    pub freed_w: u32,
}

/// One GPU reassignment plus the accompanying uniform re-level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuMovePlan {
    pub direction: Direction,
    pub donor_id: usize,
    pub uniform_cap_w: Watts,
}

/// Decision of one tick.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    None,
    /// Escalation wanted but no axis can move; logged, no state change.
    Saturated(Direction),
    MovePower(PowerMovePlan),
    MoveGpu(GpuMovePlan),
}

/// Live controller state across ticks.
#[derive(Debug, Clone, Default)]
pub struct ControllerState {
    pub last_move_us: Micros,
    window: VecDeque<(Micros, f64, f64)>,
}

/// Windowed statistics over completion-stamped (TTFT, TPOT) samples.
/// An empty window reads as (0, 0): no samples, no violation.
pub fn rolling_metrics(
    window: &VecDeque<(Micros, f64, f64)>,
    now_us: Micros,
    window_s: f64,
    statistic: Statistic,
) -> (f64, f64) {
    let horizon = now_us.saturating_sub(crate::duration_us(window_s));
    let mut ttft = Vec::new();
    let mut tpot = Vec::new();
    for &(t, a, b) in window.iter() {
        if t >= horizon && t <= now_us {
            ttft.push(a);
            tpot.push(b);
        }
    }
    if ttft.is_empty() {
        return (0.0, 0.0);
    }
    match statistic {
        Statistic::P90 => (
            crate::metrics::percentile(&ttft, 90.0).unwrap(),
            crate::metrics::percentile(&tpot, 90.0).unwrap(),
        ),
        Statistic::Mean => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            (mean(&ttft), mean(&tpot))
        }
    }
}

fn pool_cap(pool: &[WorkerView]) -> Watts {
    debug_assert!(
        pool.windows(2)
            .all(|w| w[0].commanded_w == w[1].commanded_w),
        "pool caps must be uniform"
    );
    pool.first().map(|w| w.commanded_w).unwrap_or(0)
}

fn split_pools(direction: Direction, snapshot: &Snapshot) -> (&[WorkerView], &[WorkerView]) {
    match direction {
        Direction::DecodeToPrefill => (&snapshot.decode, &snapshot.prefill),
        Direction::PrefillToDecode => (&snapshot.prefill, &snapshot.decode),
    }
}

fn recipient_ceiling(direction: Direction, cfg: &ControllerConfig) -> Watts {
    match direction {
        Direction::DecodeToPrefill => cfg.max_p_w,
        Direction::PrefillToDecode => cfg.decode_ceiling_w,
    }
}

/// True when the power axis is exhausted for `direction`: every recipient is
/// at its ceiling or every donor at its floor.
pub fn power_limits_reached(
    direction: Direction,
    snapshot: &Snapshot,
    cfg: &ControllerConfig,
) -> bool {
    let (donors, recipients) = split_pools(direction, snapshot);
    let donors_at_floor = donors.iter().all(|w| w.commanded_w <= cfg.min_p_w);
    let recipients_at_ceiling = recipients
        .iter()
        .all(|w| w.commanded_w >= recipient_ceiling(direction, cfg));
    donors_at_floor || recipients_at_ceiling
}

/// Plan one pool-uniform power shift, or `None` when the axis is exhausted.
///
/// Every donor drops by the step (clamped at the floor); the freed watts are
/// split evenly across recipients (clamped at the ceiling), raised only after
/// all donor settles complete.
pub fn plan_move_power(
    direction: Direction,
    snapshot: &Snapshot,
    cfg: &ControllerConfig,
) -> Option<PowerMovePlan> {
    if power_limits_reached(direction, snapshot, cfg) {
        return None;
    }
    let (donors, recipients) = split_pools(direction, snapshot);
    let donor_cap = pool_cap(donors);
    let recipient_cap = pool_cap(recipients);
    let donor_new = donor_cap.saturating_sub(cfg.power_step_w).max(cfg.min_p_w);
    let freed = (donor_cap - donor_new) * donors.len() as u32;
    let ceiling = recipient_ceiling(direction, cfg);
    let raise = freed / recipients.len() as u32;
    let recipient_new = (recipient_cap + raise).min(ceiling);
    Some(PowerMovePlan {
        direction,
        donor_ids: donors.iter().map(|w| w.id).collect(),
        donor_new_w: donor_new,
        recipient_ids: recipients.iter().map(|w| w.id).collect(),
        recipient_new_w: recipient_new,
        freed_w: freed,
    })
}

/// Plan one GPU reassignment, or `None` when the donor role cannot spare an
/// accepting worker. Picks the non-draining donor with the least outstanding
/// work (queued tokens for prefill donors, active sequences for decode
/// donors), ties to the lowest id, and re-levels every cap to
/// budget/gpu_count clamped to the cap range.
pub fn plan_move_gpu(
    direction: Direction,
    snapshot: &Snapshot,
    cfg: &ControllerConfig,
) -> Option<GpuMovePlan> {
    let (donors, _) = split_pools(direction, snapshot);
    let accepting: Vec<&WorkerView> = donors.iter().filter(|w| !w.draining).collect();
    if accepting.len() < 2 {
        return None;
    }
    let donor = accepting
        .iter()
        .min_by_key(|w| match direction {
            Direction::PrefillToDecode => (w.queued_tokens, w.id as u64),
            Direction::DecodeToPrefill => (w.active_seqs as u64, w.id as u64),
        })
        .unwrap();
    let uniform =
        ((snapshot.budget_w / snapshot.gpu_count as u32).min(cfg.max_p_w)).max(cfg.min_p_w);
    Some(GpuMovePlan {
        direction,
        donor_id: donor.id,
        uniform_cap_w: uniform,
    })
}

/// The reactive controller: configuration plus rolling state.
#[derive(Debug, Clone)]
pub struct Controller {
    pub cfg: ControllerConfig,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        Self {
            cfg,
            state: ControllerState::default(),
        }
    }

    /// Record a completion-stamped metric sample.
    pub fn record_completion(&mut self, t_us: Micros, ttft_s: f64, tpot_s: f64) {
        self.state.window.push_back((t_us, ttft_s, tpot_s));
    }

    fn prune_window(&mut self, now_us: Micros) {
        let horizon = now_us.saturating_sub(crate::duration_us(self.cfg.metric_window_s));
        while let Some(&(t, _, _)) = self.state.window.front() {
            if t < horizon {
                self.state.window.pop_front();
            } else {
                break;
            }
        }
    }

    /// Current windowed (TTFT, TPOT) statistics.
    pub fn metrics(&self, now_us: Micros) -> (f64, f64) {
        rolling_metrics(
            &self.state.window,
            now_us,
            self.cfg.metric_window_s,
            self.cfg.statistic,
        )
    }

    /// Evaluate one control tick.
    ///
    /// Shift toward prefill when TTFT is violated with real queue pressure
    /// while TPOT has slack; shift toward decode when TPOT is violated while
    /// TTFT has slack. Escalate to a GPU move when the power axis is already
    /// at its limits. A tick never issues more than one action.
    pub fn tick(&mut self, snapshot: &Snapshot) -> Action {
        if self.cfg.policy == Policy::Static {
            return Action::None;
        }
        self.prune_window(snapshot.now_us);
        let now = snapshot.now_us;
        let cooled =
            now.saturating_sub(self.state.last_move_us) > crate::duration_us(self.cfg.cooldown_s);
        if !cooled || snapshot.transition_pending {
            return Action::None;
        }
        let (ttft_stat, tpot_stat) = self.metrics(now);
        let (ttft_slo, tpot_slo) = self.cfg.slo.at(crate::us_to_secs(now));

        let toward_prefill = ttft_stat > ttft_slo
            && snapshot.prefill_queued_requests > self.cfg.queue_threshold
            && tpot_stat < tpot_slo;
        let toward_decode = tpot_stat > tpot_slo && ttft_stat < ttft_slo;
        let direction = if toward_prefill {
            Direction::DecodeToPrefill
        } else if toward_decode {
            Direction::PrefillToDecode
        } else {
            return Action::None;
        };

        let action = match self.cfg.policy {
            Policy::Static => Action::None,
            Policy::DynPower => match plan_move_power(direction, snapshot, &self.cfg) {
                Some(plan) => Action::MovePower(plan),
                None => Action::Saturated(direction),
            },
            Policy::DynGpu => match plan_move_gpu(direction, snapshot, &self.cfg) {
                Some(plan) => Action::MoveGpu(plan),
                None => Action::Saturated(direction),
            },
            Policy::DynBoth => {
                if power_limits_reached(direction, snapshot, &self.cfg) {
                    match plan_move_gpu(direction, snapshot, &self.cfg) {
                        Some(plan) => Action::MoveGpu(plan),
                        None => Action::Saturated(direction),
                    }
                } else {
                    Action::MovePower(plan_move_power(direction, snapshot, &self.cfg).unwrap())
                }
            }
        };
        if matches!(action, Action::MovePower(_) | Action::MoveGpu(_)) {
            self.state.last_move_us = now;
        }
        action
    }
}
