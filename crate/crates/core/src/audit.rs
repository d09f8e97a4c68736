//! Invariant audits over an event trace.
//!
//! Traces are self-contained (the `init` event carries budget, policy
//! constants, and initial roles/caps), so every check here reconstructs
//! state from the trace alone.

use crate::control::{Direction, Policy};
use crate::sim::{CompletedRequest, EventTrace, Role, TracePayload};
use crate::{duration_us, Micros, Watts};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("trace does not start with an init event")]
    MissingInit,
    #[error("budget violation at t={t_us} us: charged {charged} W > budget {budget} W")]
    Budget {
        t_us: Micros,
        charged: u32,
        budget: u32,
    },
    #[error("buffer violation at t={t_us} us: {occupied} slots occupied > capacity {capacity}")]
    Buffer {
        t_us: Micros,
        occupied: usize,
        capacity: usize,
    },
    #[error("controller conformance: {0}")]
    Controller(String),
    #[error("lifecycle violation for request {id}: {reason}")]
    Lifecycle { id: u64, reason: String },
}

struct InitView {
    budget_w: u32,
    policy: Policy,
    cooldown_s: f64,
    min_power_w: Watts,
    max_power_w: Watts,
    decode_ceiling_w: Watts,
    buffer_slots: usize,
    roles: Vec<Role>,
    caps: Vec<Watts>,
}

fn init_view(trace: &EventTrace) -> Result<InitView, AuditError> {
    match trace.events.first().map(|e| &e.payload) {
        Some(TracePayload::Init {
            budget_w,
            policy,
            cooldown_s,
            min_power_w,
            max_power_w,
            decode_ceiling_w,
            buffer_slots,
            gpus,
            ..
        }) => Ok(InitView {
            budget_w: *budget_w,
            policy: *policy,
            cooldown_s: *cooldown_s,
            min_power_w: *min_power_w,
            max_power_w: *max_power_w,
            decode_ceiling_w: *decode_ceiling_w,
            buffer_slots: *buffer_slots,
            roles: gpus.iter().map(|g| g.role).collect(),
            caps: gpus.iter().map(|g| g.cap_w).collect(),
        }),
        _ => Err(AuditError::MissingInit),
    }
}

/// Result of a budget audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetReport {
    pub budget_w: u32,
    /// Highest instantaneous sum of charged caps seen anywhere in the trace.
    pub max_charged_w: u32,
    pub cap_events: usize,
}

/// Verify that the summed *charged* caps never exceed the node budget.
///
/// A lowered cap is charged at its old value until its settle event; a raised
/// cap is charged at the new value from the command instant.
pub fn audit_budget(trace: &EventTrace) -> Result<BudgetReport, AuditError> {
    let init = init_view(trace)?;
    let mut charged = init.caps.clone();
    let mut sum: u32 = charged.iter().sum();
    let mut max_charged = sum;
    let mut cap_events = 0;
    if sum > init.budget_w {
        return Err(AuditError::Budget {
            t_us: 0,
            charged: sum,
            budget: init.budget_w,
        });
    }
    for event in trace.iter() {
        match &event.payload {
            TracePayload::CapCommand {
                gpu,
                to_w,
                effective_at_us,
                ..
            } => {
                cap_events += 1;
                if *effective_at_us == event.t_us {
                    sum = sum - charged[*gpu] + to_w;
                    charged[*gpu] = *to_w;
                }
                // Decreases stay charged at the old cap until they settle.
            }
            TracePayload::CapSettle { gpu, cap_w } => {
                cap_events += 1;
                sum = sum - charged[*gpu] + cap_w;
                charged[*gpu] = *cap_w;
            }
            _ => continue,
        }
        max_charged = max_charged.max(sum);
        if sum > init.budget_w {
            return Err(AuditError::Budget {
                t_us: event.t_us,
                charged: sum,
                budget: init.budget_w,
            });
        }
    }
    Ok(BudgetReport {
        budget_w: init.budget_w,
        max_charged_w: max_charged,
        cap_events,
    })
}

/// Verify the transfer buffer never holds more than its capacity.
pub fn audit_buffer(trace: &EventTrace) -> Result<usize, AuditError> {
    let init = init_view(trace)?;
    let mut occupied = 0usize;
    let mut max_occupied = 0usize;
    for event in trace.iter() {
        match &event.payload {
            TracePayload::TransferStart { .. } => {
                occupied += 1;
                max_occupied = max_occupied.max(occupied);
                if occupied > init.buffer_slots {
                    return Err(AuditError::Buffer {
                        t_us: event.t_us,
                        occupied,
                        capacity: init.buffer_slots,
                    });
                }
            }
            TracePayload::TransferEnd { .. } => {
                occupied = occupied.saturating_sub(1);
            }
            _ => {}
        }
    }
    Ok(max_occupied)
}

/// Controller conformance over one trace:
/// consecutive actions spaced by more than the cooldown, GPU moves only at
/// power limits, uniform caps after each GPU move, role counts within
/// [1, N-1], and per-policy masking of the untouched axes.
pub fn audit_controller(trace: &EventTrace) -> Result<(), AuditError> {
    let init = init_view(trace)?;
    let n = init.roles.len();
    let fail = |msg: String| Err(AuditError::Controller(msg));

    // (i) cooldown spacing of actions.
    let action_times: Vec<Micros> = trace
        .iter()
        .filter(|e| {
            matches!(
                e.payload,
                TracePayload::MovePower { .. } | TracePayload::MoveGpu { .. }
            )
        })
        .map(|e| e.t_us)
        .collect();
    let cooldown = duration_us(init.cooldown_s);
    for pair in action_times.windows(2) {
        if pair[1] - pair[0] <= cooldown {
            return fail(format!(
                "actions at {} us and {} us within the {} us cooldown",
                pair[0], pair[1], cooldown
            ));
        }
    }

    // Replay commanded caps and target roles for the structural checks.
    let mut commanded = init.caps.clone();
    let mut target_roles = init.roles.clone();
    let mut current_roles = init.roles.clone();
    let uniform = ((init.budget_w / n as u32).min(init.max_power_w)).max(init.min_power_w);
    let mut awaiting_uniform: Option<Micros> = None;
    let mut settling = vec![false; n];

    // Same-role commanded caps must agree whenever no transition is in
    // flight; a worker draining toward a role counts with its new pool.
    let pools_uniform = |commanded: &[Watts], roles: &[Role]| {
        for role in [Role::Prefill, Role::Decode] {
            let mut caps = roles
                .iter()
                .zip(commanded)
                .filter(|(r, _)| **r == role)
                .map(|(_, &c)| c);
            if let Some(first) = caps.next() {
                if caps.any(|c| c != first) {
                    return false;
                }
            }
        }
        true
    };

    for event in trace.iter() {
        match &event.payload {
            TracePayload::CapCommand {
                gpu,
                to_w,
                effective_at_us,
                ..
            } => {
                commanded[*gpu] = *to_w;
                if *effective_at_us > event.t_us {
                    settling[*gpu] = true;
                }
                if let Some(since) = awaiting_uniform {
                    if commanded.iter().all(|&c| c == uniform) {
                        awaiting_uniform = None;
                    } else if event.t_us > since + duration_us(init.cooldown_s) {
                        return fail(format!(
                            "caps not uniform within a cooldown of the GPU move at {since} us"
                        ));
                    }
                }
            }
            TracePayload::CapSettle { gpu, .. } => {
                settling[*gpu] = false;
                if settling.iter().all(|s| !s)
                    && awaiting_uniform.is_none()
                    && !pools_uniform(&commanded, &target_roles)
                {
                    return fail(format!(
                        "pool caps diverge outside a settle window at {} us",
                        event.t_us
                    ));
                }
            }
            TracePayload::MoveGpu { direction, .. } => {
                // (ii) the power axis must already be exhausted, except under
                // dyn-gpu where that axis is masked off entirely.
                if init.policy != Policy::DynGpu {
                    let (donor_role, recipient_role, ceiling) = match direction {
                        Direction::DecodeToPrefill => {
                            (Role::Decode, Role::Prefill, init.max_power_w)
                        }
                        Direction::PrefillToDecode => {
                            (Role::Prefill, Role::Decode, init.decode_ceiling_w)
                        }
                    };
                    let donors_at_floor = target_roles
                        .iter()
                        .zip(&commanded)
                        .filter(|(r, _)| **r == donor_role)
                        .all(|(_, &c)| c <= init.min_power_w);
                    let recipients_at_ceiling = target_roles
                        .iter()
                        .zip(&commanded)
                        .filter(|(r, _)| **r == recipient_role)
                        .all(|(_, &c)| c >= ceiling);
                    if !donors_at_floor && !recipients_at_ceiling {
                        return fail(format!(
                            "GPU move at {} us without power limits reached ({direction})",
                            event.t_us
                        ));
                    }
                }
                // (iii) caps must level out at budget/gpu_count shortly after.
                awaiting_uniform = Some(event.t_us);
            }
            TracePayload::DrainStart { gpu, to_role } => {
                target_roles[*gpu] = *to_role;
            }
            TracePayload::RoleFlip { gpu, role } => {
                current_roles[*gpu] = *role;
                // (iv) both observed and committed role counts stay in bounds.
                for (name, roles) in [("current", &current_roles), ("target", &target_roles)] {
                    let prefill = roles.iter().filter(|r| **r == Role::Prefill).count();
                    if prefill == 0 || prefill == n {
                        return fail(format!(
                            "{name} prefill pool size {prefill} outside [1, {}] at {} us",
                            n - 1,
                            event.t_us
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    if let Some(since) = awaiting_uniform {
        if !commanded.iter().all(|&c| c == uniform) {
            return fail(format!(
                "caps never leveled to {uniform} W after the GPU move at {since} us"
            ));
        }
    }

    // (v) per-policy masking.
    let has = |pred: &dyn Fn(&TracePayload) -> bool| trace.iter().any(|e| pred(&e.payload));
    let role_events = has(&|p| {
        matches!(
            p,
            TracePayload::DrainStart { .. }
                | TracePayload::RoleFlip { .. }
                | TracePayload::MoveGpu { .. }
        )
    });
    let power_moves = has(&|p| matches!(p, TracePayload::MovePower { .. }));
    let cap_events = has(&|p| {
        matches!(
            p,
            TracePayload::CapCommand { .. } | TracePayload::CapSettle { .. }
        )
    });
    match init.policy {
        Policy::DynPower if role_events => fail("dyn-power trace holds role changes".into()),
        Policy::DynGpu if power_moves => fail("dyn-gpu trace holds power moves".into()),
        Policy::Static if cap_events || power_moves || role_events => {
            fail("static trace holds reallocation events".into())
        }
        _ => Ok(()),
    }
}

/// Verify every request's recorded timestamps are monotone along the
/// lifecycle.
pub fn audit_lifecycle(completed: &[CompletedRequest]) -> Result<(), AuditError> {
    for c in completed {
        let steps = [
            ("arrival", c.arrival_us),
            ("prefill_start", c.prefill_start_us),
            ("prefill_end", c.prefill_end_us),
            ("transfer_start", c.transfer_start_us),
            ("transfer_end", c.transfer_end_us),
            ("decode_join", c.decode_join_us),
            ("completion", c.completion_us),
        ];
        for pair in steps.windows(2) {
            if pair[1].1 < pair[0].1 {
                return Err(AuditError::Lifecycle {
                    id: c.id,
                    reason: format!(
                        "{} ({}) precedes {} ({})",
                        pair[1].0, pair[1].1, pair[0].0, pair[0].1
                    ),
                });
            }
        }
    }
    Ok(())
}
