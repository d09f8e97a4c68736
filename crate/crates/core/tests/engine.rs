//! Event-by-event walkthroughs of the engine against the latency formulas,
//! plus cross-run invariants (determinism, conservation, fabric isolation).

use capsim_core::audit;
use capsim_core::control::{ControllerConfig, Policy};
use capsim_core::perf::{CalibrationFile, PerfModel};
use capsim_core::sim::{
    self, coalesced_gpus, default_gpus, run_simulation, SimConfig, SimMode, TracePayload,
};
use capsim_core::workload::{
    gen_fixed_lengths, gen_poisson_arrivals, gen_uniform_lengths, RequestSpec, WorkloadSpec,
};
use capsim_core::{duration_us, Watts};

fn static_controller() -> ControllerConfig {
    ControllerConfig::default()
}

fn perf() -> PerfModel {
    PerfModel::default()
}

fn manual_workload(rows: &[(f64, u32, u32)]) -> Vec<RequestSpec> {
    rows.iter()
        .enumerate()
        .map(
            |(id, &(arrival_time, input_tokens, output_tokens))| RequestSpec {
                id: id as u64,
                arrival_time,
                input_tokens,
                output_tokens,
            },
        )
        .collect()
}

#[test]
fn single_request_walkthrough_matches_formulas() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(4, 4, 750, 450),
        node_power_budget_w: 4800,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 8192, 128)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    assert_eq!(out.completed.len(), 1);
    let r = &out.completed[0];

    let prefill_us = duration_us(perf.prefill_latency(8192, 1, 750).unwrap());
    let transfer_us = duration_us(perf.kv_transfer_latency(8192).unwrap());
    let step_us = duration_us(perf.decode_step_latency(1, 450).unwrap());

    assert_eq!(r.prefill_start_us, 0, "no queueing on an idle node");
    assert_eq!(r.prefill_end_us, prefill_us);
    assert_eq!(r.transfer_start_us, r.prefill_end_us);
    assert_eq!(r.transfer_end_us, r.prefill_end_us + transfer_us);
    assert_eq!(
        r.decode_join_us, r.transfer_end_us,
        "handoff lands in TPOT, not TTFT"
    );
    assert_eq!(r.completion_us, r.decode_join_us + 127 * step_us);
    audit::audit_lifecycle(&out.completed).unwrap();
    audit::audit_budget(&out.trace).unwrap();
}

#[test]
fn three_output_tokens_take_two_decode_steps() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 600, 600),
        node_power_budget_w: 4800,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 1024, 3)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let r = &out.completed[0];
    let step_us = duration_us(perf.decode_step_latency(1, 600).unwrap());
    assert_eq!(r.completion_us, r.decode_join_us + 2 * step_us);
}

#[test]
fn single_token_output_completes_at_transfer_end() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 600, 600),
        node_power_budget_w: 4800,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 2048, 1)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let r = &out.completed[0];
    assert_eq!(r.completion_us, r.transfer_end_us);
    assert!(out
        .trace
        .iter()
        .all(|e| !matches!(e.payload, TracePayload::DecodeJoin { .. })));
}

#[test]
fn empty_workload_still_emits_a_time_series_row() {
    let out = run_simulation(&SimConfig::default(), &perf(), &[], &static_controller()).unwrap();
    assert!(out.completed.is_empty());
    assert_eq!(out.timeseries.rows.len(), 1);
    assert_eq!(out.timeseries.rows[0].t_us, 0);
    assert_eq!(out.end_us, 0);
}

#[test]
fn identical_runs_are_byte_identical() {
    let spec = WorkloadSpec::new(1.5, 8, 7);
    let lengths = gen_uniform_lengths(300, (512, 8192), (128, 256), 7);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let config = SimConfig::default();
    let controller = ControllerConfig {
        policy: Policy::DynBoth,
        ..ControllerConfig::default()
    };
    let a = run_simulation(&config, &perf(), &workload, &controller).unwrap();
    let b = run_simulation(&config, &perf(), &workload, &controller).unwrap();
    assert_eq!(a.trace.to_jsonl_string(), b.trace.to_jsonl_string());
    assert_eq!(a.completed, b.completed);
}

#[test]
fn every_request_completes_exactly_once() {
    let spec = WorkloadSpec::new(2.0, 8, 3);
    let lengths = gen_uniform_lengths(500, (512, 8192), (1, 64), 3);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let controller = ControllerConfig {
        policy: Policy::DynBoth,
        ..ControllerConfig::default()
    };
    let out = run_simulation(&SimConfig::default(), &perf(), &workload, &controller).unwrap();
    assert_eq!(out.completed.len(), workload.len());
    for (i, r) in out.completed.iter().enumerate() {
        assert_eq!(r.id, i as u64);
    }
    let completes = out
        .trace
        .iter()
        .filter(|e| matches!(e.payload, TracePayload::Complete { .. }))
        .count();
    assert_eq!(completes, workload.len());
    audit::audit_lifecycle(&out.completed).unwrap();
    audit::audit_budget(&out.trace).unwrap();
    audit::audit_buffer(&out.trace).unwrap();
}

#[test]
fn router_balances_by_outstanding_tokens() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(4, 4, 600, 600),
        ..SimConfig::default()
    };
    // Four simultaneous arrivals spread across the four prefill workers.
    let workload = manual_workload(&[
        (0.0, 4096, 2),
        (0.0, 4096, 2),
        (0.0, 4096, 2),
        (0.0, 4096, 2),
    ]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let mut routed: Vec<usize> = out
        .trace
        .iter()
        .filter_map(|e| match e.payload {
            TracePayload::Arrival { gpu, .. } => Some(gpu),
            _ => None,
        })
        .collect();
    routed.sort_unstable();
    assert_eq!(routed, vec![0, 1, 2, 3]);
}

#[test]
fn full_buffer_defers_the_next_transfer() {
    // One-slot buffer and a ten-second transfer make the collision visible.
    let calib: PerfModel =
        CalibrationFile::parse_str(r#"{"latency_params": {"fabric_bandwidth": 107374.1824}}"#)
            .unwrap()
            .build()
            .unwrap();
    let config = SimConfig {
        gpus: default_gpus(2, 1, 750, 450),
        node_power_budget_w: 4800,
        transfer_buffer_slots: 1,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 8192, 1), (0.0, 8192, 1)]);
    let out = run_simulation(&config, &calib, &workload, &static_controller()).unwrap();
    let r0 = &out.completed[0];
    let r1 = &out.completed[1];
    assert_eq!(
        r0.prefill_end_us, r1.prefill_end_us,
        "parallel prefill on two workers"
    );
    assert_eq!(r0.transfer_start_us, r0.prefill_end_us);
    assert_eq!(
        r1.transfer_start_us, r0.transfer_end_us,
        "second handoff waits for the slot to free"
    );
    assert_eq!(audit::audit_buffer(&out.trace).unwrap(), 1);
}

#[test]
fn overfull_unslotted_set_stalls_new_batches() {
    let calib: PerfModel =
        CalibrationFile::parse_str(r#"{"latency_params": {"fabric_bandwidth": 107374.1824}}"#)
            .unwrap()
            .build()
            .unwrap();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 750, 450),
        node_power_budget_w: 4800,
        transfer_buffer_slots: 1,
        max_prefill_batch: 1,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[
        (0.0, 8192, 1),
        (0.0, 8192, 1),
        (0.0, 8192, 1),
        (0.0, 8192, 1),
    ]);
    let out = run_simulation(&config, &calib, &workload, &static_controller()).unwrap();
    let prefill_us = duration_us(calib.prefill_latency(8192, 1, 750).unwrap());
    let r = &out.completed;
    // Two finished-but-unslotted prefills are tolerated (capacity one plus
    // one); the third batch start stalls until the first transfer frees the slot.
    assert_eq!(r[1].prefill_start_us, prefill_us);
    assert_eq!(r[2].prefill_start_us, 2 * prefill_us);
    assert_eq!(r[3].prefill_start_us, r[0].transfer_end_us);
    assert!(r[3].prefill_start_us > 3 * prefill_us);
}

#[test]
fn fabric_bandwidth_never_touches_prefill_times() {
    let slow: PerfModel =
        CalibrationFile::parse_str(r#"{"latency_params": {"fabric_bandwidth": 24e9}}"#)
            .unwrap()
            .build()
            .unwrap();
    let fast = perf();
    let spec = WorkloadSpec::new(1.5, 8, 11);
    let lengths = gen_uniform_lengths(300, (512, 8192), (2, 256), 11);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let config = SimConfig::default();
    let a = run_simulation(&config, &fast, &workload, &static_controller()).unwrap();
    let b = run_simulation(&config, &slow, &workload, &static_controller()).unwrap();
    for (x, y) in a.completed.iter().zip(&b.completed) {
        assert_eq!(x.prefill_end_us, y.prefill_end_us);
        assert_eq!(x.prefill_start_us, y.prefill_start_us);
    }
    assert!(
        a.completed
            .iter()
            .zip(&b.completed)
            .any(|(x, y)| x.completion_us != y.completion_us),
        "halving the fabric must show up somewhere after the first token"
    );
}

#[test]
fn shared_batch_members_share_prefill_end() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 600, 600),
        ..SimConfig::default()
    };
    // A warm-up request keeps the worker busy, so the next two queue up and
    // form one batch together (8192 + 512 <= 16384).
    let workload = manual_workload(&[(0.0, 1024, 2), (0.0, 8192, 2), (0.0, 512, 2)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    assert_eq!(
        out.completed[1].prefill_end_us,
        out.completed[2].prefill_end_us
    );
    let warm_us = duration_us(perf.prefill_latency(1024, 1, 600).unwrap());
    let batch_us = duration_us(perf.prefill_latency(8704, 2, 600).unwrap());
    assert_eq!(out.completed[1].prefill_start_us, warm_us);
    assert_eq!(out.completed[1].prefill_end_us, warm_us + batch_us);
}

#[test]
fn decode_batch_grows_between_steps() {
    let perf = perf();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 750, 600),
        node_power_budget_w: 4800,
        ..SimConfig::default()
    };
    // The second request joins while the first is mid-decode; afterwards the
    // batch of two runs at the two-sequence step latency.
    let workload = manual_workload(&[(0.0, 4096, 200), (0.5, 4096, 200)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let step1 = duration_us(perf.decode_step_latency(1, 600).unwrap());
    let step2 = duration_us(perf.decode_step_latency(2, 600).unwrap());
    let r0 = &out.completed[0];
    let r1 = &out.completed[1];
    assert!(r1.decode_join_us > r0.decode_join_us);
    let solo_steps = (r1.decode_join_us - r0.decode_join_us).div_ceil(step1);
    let expected_r0 = r0.decode_join_us + solo_steps * step1 + (199 - solo_steps) * step2;
    assert_eq!(r0.completion_us, expected_r0);
}

#[test]
fn idle_decode_drain_flips_after_exactly_the_reassign_latency() {
    // Prefill-heavy single-token outputs keep every decode worker idle, so the
    // first GPU move drains an empty worker and flips on the dot.
    let controller = ControllerConfig {
        policy: Policy::DynGpu,
        ..ControllerConfig::default()
    };
    let config = SimConfig {
        gpus: default_gpus(2, 6, 600, 600),
        ..SimConfig::default()
    };
    let spec = WorkloadSpec::new(2.0, 8, 5);
    let lengths = gen_fixed_lengths(600, 8192, 1);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let out = run_simulation(&config, &perf(), &workload, &controller).unwrap();

    let drains: Vec<(u64, usize)> = out
        .trace
        .iter()
        .filter_map(|e| match e.payload {
            TracePayload::DrainStart { gpu, .. } => Some((e.t_us, gpu)),
            _ => None,
        })
        .collect();
    assert!(!drains.is_empty(), "expected at least one GPU move");
    let (t_drain, gpu) = drains[0];
    let flip = out
        .trace
        .iter()
        .find_map(|e| match e.payload {
            TracePayload::RoleFlip { gpu: g, .. } if g == gpu => Some(e.t_us),
            _ => None,
        })
        .expect("drained worker flips");
    assert_eq!(flip, t_drain + duration_us(config.reassign_latency_s));
    audit::audit_controller(&out.trace).unwrap();
    audit::audit_budget(&out.trace).unwrap();
}

#[test]
fn coalesced_chunks_and_fused_steps() {
    let perf = perf();
    let config = SimConfig {
        gpus: coalesced_gpus(1, 750),
        node_power_budget_w: 6000,
        mode: SimMode::Coalesced,
        ..SimConfig::default()
    };
    // r0 decodes while r1's two chunks interleave; afterwards r0 finishes on
    // pure decode steps.
    let workload = manual_workload(&[(0.0, 512, 5), (0.0, 1024, 1)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let chunk = perf.prefill_latency(512, 1, 750).unwrap();
    let step1 = perf.decode_step_latency(1, 750).unwrap();
    let a = duration_us(chunk);
    let fused = duration_us(chunk + step1);
    let pure = duration_us(step1);
    let r0 = &out.completed[0];
    let r1 = &out.completed[1];
    assert_eq!(r0.prefill_end_us, a, "first chunk step carries no decode");
    assert_eq!(
        r1.prefill_end_us,
        a + 2 * fused,
        "two fused chunk+decode steps"
    );
    assert_eq!(r1.completion_us, r1.prefill_end_us, "single-token output");
    assert_eq!(
        r1.transfer_end_us, r1.prefill_end_us,
        "no handoff in coalesced mode"
    );
    assert_eq!(r0.completion_us, a + 2 * fused + 2 * pure);
}

#[test]
fn coalesced_thousand_token_prompt_takes_two_chunks() {
    let perf = perf();
    let config = SimConfig {
        gpus: coalesced_gpus(1, 750),
        node_power_budget_w: 6000,
        mode: SimMode::Coalesced,
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 1024, 1)]);
    let out = run_simulation(&config, &perf, &workload, &static_controller()).unwrap();
    let chunk_us = duration_us(perf.prefill_latency(512, 1, 750).unwrap());
    assert_eq!(out.completed[0].prefill_end_us, 2 * chunk_us);
}

#[test]
fn config_validation_rejects_unschedulable_setups() {
    let perf = perf();
    let ctl = static_controller();
    let no_gpus = SimConfig {
        gpus: vec![],
        ..SimConfig::default()
    };
    assert!(run_simulation(&no_gpus, &perf, &[], &ctl).is_err());

    let over_budget = SimConfig {
        gpus: default_gpus(4, 4, 750, 750),
        node_power_budget_w: 4800,
        ..SimConfig::default()
    };
    let err = run_simulation(&over_budget, &perf, &[], &ctl).unwrap_err();
    assert!(err.to_string().contains("budget"));

    let no_decode = SimConfig {
        gpus: default_gpus(8, 0, 600, 600),
        ..SimConfig::default()
    };
    assert!(run_simulation(&no_decode, &perf, &[], &ctl).is_err());

    let coalesced_dynamic = SimConfig {
        gpus: coalesced_gpus(8, 600),
        mode: SimMode::Coalesced,
        ..SimConfig::default()
    };
    let dyn_ctl = ControllerConfig {
        policy: Policy::DynBoth,
        ..ControllerConfig::default()
    };
    assert!(run_simulation(&coalesced_dynamic, &perf, &[], &dyn_ctl).is_err());

    let unsorted = manual_workload(&[(1.0, 100, 1), (0.5, 100, 1)]);
    assert!(matches!(
        run_simulation(&SimConfig::default(), &perf, &unsorted, &ctl),
        Err(sim::SimError::UnsortedWorkload(1))
    ));

    let zero_tokens = manual_workload(&[(0.0, 0, 4)]);
    assert!(matches!(
        run_simulation(&SimConfig::default(), &perf, &zero_tokens, &ctl),
        Err(sim::SimError::BadRequest { index: 0, .. })
    ));

    let mut sparse_ids = manual_workload(&[(0.0, 100, 1), (0.5, 100, 1)]);
    sparse_ids[1].id = 7;
    assert!(matches!(
        run_simulation(&SimConfig::default(), &perf, &sparse_ids, &ctl),
        Err(sim::SimError::BadRequest { index: 1, .. })
    ));
}

#[test]
fn busy_decode_drain_flips_after_completion_plus_latency() {
    // One prefill and two decode workers, each decode worker pinned by one
    // long-running sequence, then a prompt flood. The first GPU move drains a
    // busy decode worker, whose flip must land one reassign latency after its
    // sequence completes.
    let controller = ControllerConfig {
        policy: Policy::DynGpu,
        ..ControllerConfig::default()
    };
    let config = SimConfig {
        gpus: default_gpus(1, 2, 600, 600),
        ..SimConfig::default()
    };
    let mut rows = vec![(0.0, 1024, 1000), (0.0, 1024, 1000)];
    rows.extend(std::iter::repeat_n((1.0, 8192, 1), 30));
    let workload = manual_workload(&rows);
    let out = run_simulation(&config, &perf(), &workload, &controller).unwrap();

    // Request 0 decodes on worker 1 (smallest batch, lowest id at its join).
    let join_gpu = out
        .trace
        .iter()
        .find_map(|e| match e.payload {
            TracePayload::DecodeJoin { req: 0, gpu } => Some(gpu),
            _ => None,
        })
        .unwrap();
    assert_eq!(join_gpu, 1);
    let (t_drain, drained_gpu) = out
        .trace
        .iter()
        .find_map(|e| match e.payload {
            TracePayload::DrainStart { gpu, .. } => Some((e.t_us, gpu)),
            _ => None,
        })
        .expect("the flood triggers a GPU move");
    assert_eq!(drained_gpu, 1, "ties pick the lowest decode id");
    let t_done = out.completed[0].completion_us;
    assert!(
        t_done > t_drain,
        "the pinned sequence outlives the drain start"
    );
    let t_flip = out
        .trace
        .iter()
        .find_map(|e| match e.payload {
            TracePayload::RoleFlip { gpu: 1, .. } => Some(e.t_us),
            _ => None,
        })
        .expect("drained worker flips");
    assert_eq!(t_flip, t_done + duration_us(config.reassign_latency_s));
    audit::audit_controller(&out.trace).unwrap();
    audit::audit_budget(&out.trace).unwrap();
}

#[test]
fn static_trace_has_no_reallocation_events() {
    let spec = WorkloadSpec::new(1.0, 8, 2);
    let lengths = gen_fixed_lengths(50, 2048, 16);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let out = run_simulation(
        &SimConfig::default(),
        &perf(),
        &workload,
        &static_controller(),
    )
    .unwrap();
    assert!(out.trace.iter().all(|e| !matches!(
        e.payload,
        TracePayload::CapCommand { .. }
            | TracePayload::CapSettle { .. }
            | TracePayload::MovePower { .. }
            | TracePayload::MoveGpu { .. }
            | TracePayload::DrainStart { .. }
    )));
    audit::audit_controller(&out.trace).unwrap();
}

#[test]
fn timeseries_csv_is_plot_ready() {
    let workload = manual_workload(&[(0.0, 4096, 8)]);
    let out = run_simulation(
        &SimConfig::default(),
        &perf(),
        &workload,
        &static_controller(),
    )
    .unwrap();
    let mut buf = Vec::new();
    out.timeseries.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t_s,role_0,cap_w_0,queue_0,batch_0"));
    assert!(header.ends_with("rate_p,rate_d"));
    assert!(text.lines().count() >= 2);
}

#[test]
fn huge_fabric_bandwidth_leaves_only_the_fixed_overhead() {
    let infinite: PerfModel =
        CalibrationFile::parse_str(r#"{"latency_params": {"fabric_bandwidth": 1e18}}"#)
            .unwrap()
            .build()
            .unwrap();
    let config = SimConfig {
        gpus: default_gpus(1, 1, 600, 600),
        ..SimConfig::default()
    };
    let workload = manual_workload(&[(0.0, 8192, 4)]);
    let out = run_simulation(&config, &infinite, &workload, &static_controller()).unwrap();
    let r = &out.completed[0];
    assert_eq!(r.transfer_end_us - r.prefill_end_us, duration_us(0.0005));
}

#[test]
fn cap_decreases_settle_late_and_raises_wait_for_them() {
    let controller = ControllerConfig {
        policy: Policy::DynPower,
        ..ControllerConfig::default()
    };
    let config = SimConfig::default();
    let spec = WorkloadSpec::new(2.0, 8, 0);
    let lengths = gen_fixed_lengths(1200, 8192, 64);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let out = run_simulation(&config, &perf(), &workload, &controller).unwrap();
    let settle_us = duration_us(config.settle_latency_s);

    let mut saw_decrease = false;
    let mut pending_settles = 0usize;
    for (i, e) in out.trace.iter().enumerate() {
        match &e.payload {
            TracePayload::CapCommand {
                from_w,
                to_w,
                effective_at_us,
                ..
            } => {
                if to_w < from_w {
                    // Lower caps take effect one settle latency later.
                    assert_eq!(*effective_at_us, e.t_us + settle_us);
                    pending_settles += 1;
                    saw_decrease = true;
                } else {
                    // Raises apply instantly and only once every pending
                    // donor reduction has settled.
                    assert_eq!(*effective_at_us, e.t_us);
                    assert_eq!(
                        pending_settles, 0,
                        "raise at trace index {i} while a donor settle is pending"
                    );
                }
            }
            TracePayload::CapSettle { .. } => pending_settles -= 1,
            _ => {}
        }
    }
    assert!(saw_decrease, "expected the controller to lower donor caps");
    audit::audit_budget(&out.trace).unwrap();
}

#[test]
fn cap_floor_is_respected_under_pressure() {
    // Sustained prefill pressure walks decode caps down; they must never pass
    // the calibrated floor.
    let controller = ControllerConfig {
        policy: Policy::DynPower,
        ..ControllerConfig::default()
    };
    let spec = WorkloadSpec::new(2.5, 8, 1);
    let lengths = gen_fixed_lengths(1500, 8192, 8);
    let workload = gen_poisson_arrivals(&spec, &lengths).unwrap();
    let out = run_simulation(&SimConfig::default(), &perf(), &workload, &controller).unwrap();
    let mut caps: Vec<Watts> = Vec::new();
    for e in out.trace.iter() {
        if let TracePayload::CapCommand { to_w, .. } = e.payload {
            caps.push(to_w);
        }
    }
    assert!(!caps.is_empty());
    assert!(caps.iter().all(|&c| (400..=750).contains(&c)));
    audit::audit_budget(&out.trace).unwrap();
    audit::audit_controller(&out.trace).unwrap();
}
