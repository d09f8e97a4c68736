//! Run execution and artifact output.
//!
//! Every run writes five files into its directory: the resolved config echo,
//! per-request records CSV, summary JSON, per-GPU time-series CSV, and the
//! event trace JSONL. Files land via a temp-file rename so partially written
//! artifacts never appear under their final names.

use crate::config::ResolvedConfig;
use anyhow::{bail, Context, Result};
use capsim_core::metrics::{
    self, attainment_curve, build_records, summarize, CurvePoint, SummaryMetrics,
    DEFAULT_GPU_POWER_SHARE,
};
use capsim_core::sim::run_simulation;
use capsim_core::workload::RequestSpec;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub struct RunArtifacts {
    pub summary: SummaryMetrics,
    pub dir: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f =
            std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Execute one resolved config at one seed and write all artifacts.
pub fn execute_run(config: &ResolvedConfig, seed: u64, dir: &Path) -> Result<RunArtifacts> {
    execute_scaled_run(config, seed, dir, 1.0)
}

pub fn cmd_run(config: &ResolvedConfig, out_dir: &Path) -> Result<()> {
    let artifacts = execute_run(config, config.seed, out_dir)?;
    println!(
        "run complete: attainment {:.4}, goodput {:.3} req/s, qps/W {:.6} ({} files in {})",
        artifacts.summary.attainment,
        artifacts.summary.goodput_rps,
        artifacts.summary.qps_per_watt,
        5,
        artifacts.dir.display()
    );
    Ok(())
}

struct SweepJob {
    qps: f64,
    scale: f64,
    seed: u64,
    dir: PathBuf,
}

struct SweepResult {
    qps: f64,
    scale: f64,
    seed: u64,
    summary: SummaryMetrics,
}

/// One run per (qps x slo-scale x repeat); repeats averaged into the curve
/// tables. Seeds derive as base_seed + repeat_index.
pub fn cmd_sweep(config: &ResolvedConfig, out_dir: &Path, parallel: usize) -> Result<()> {
    let qps_list = if config.qps.is_empty() {
        vec![config.workload.qps_per_gpu()]
    } else {
        config.qps.clone()
    };
    let mut jobs = Vec::new();
    for &qps in &qps_list {
        for &scale in &config.slo_scale {
            for repeat in 0..config.repeats {
                jobs.push(SweepJob {
                    qps,
                    scale,
                    seed: config.seed + repeat as u64,
                    dir: out_dir.join(format!("qps{qps}_scale{scale}_rep{repeat}")),
                });
            }
        }
    }

    let results = Mutex::new(Vec::<SweepResult>::new());
    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(job) = jobs.get(i) else {
                return Ok(());
            };
            let mut point = config.clone();
            point.workload.set_qps(job.qps);
            let artifacts = execute_scaled_run(&point, job.seed, &job.dir, job.scale)?;
            results.lock().unwrap().push(SweepResult {
                qps: job.qps,
                scale: job.scale,
                seed: job.seed,
                summary: artifacts.summary,
            });
        }
    };
    if parallel > 1 {
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = (0..parallel.min(jobs.len().max(1)))
                .map(|_| scope.spawn(worker))
                .collect();
            for handle in handles {
                handle.join().expect("sweep worker panicked")?;
            }
            Ok(())
        })?;
    } else {
        worker()?;
    }

    let mut results = results.into_inner().unwrap();
    // Aggregation order is pinned so tables are byte-stable regardless of
    // how parallel workers interleaved.
    results.sort_by(|a, b| {
        (a.qps, a.scale, a.seed)
            .partial_cmp(&(b.qps, b.scale, b.seed))
            .unwrap()
    });
    write_sweep_tables(&qps_list, &config.slo_scale, &results, out_dir)?;
    println!(
        "sweep complete: {} runs, tables in {}",
        jobs.len(),
        out_dir.display()
    );
    Ok(())
}

/// Like `execute_run` but applies an SLO scale factor to the effective
/// schedule (including a workload-derived one).
fn execute_scaled_run(
    config: &ResolvedConfig,
    seed: u64,
    dir: &Path,
    scale: f64,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir)?;
    let mut config = config.clone();
    config.seed = seed;
    config.sim.seed = seed;
    let (workload, slo) = config.build_workload(seed)?;
    let slo = slo.scaled(scale);
    config.controller.slo = slo.clone();
    config.slo_explicit = true;

    let perf = config.perf()?;
    let out = run_simulation(&config.sim, &perf, &workload, &config.controller)?;
    let records = build_records(&out.completed, &slo);
    let summary = summarize(
        &records,
        out.avg_provisioned_power_w,
        DEFAULT_GPU_POWER_SHARE,
    );

    write_atomic(&dir.join("config.json"), config.echo_json().as_bytes())?;
    let mut csv = Vec::new();
    metrics::write_records_csv(&mut csv, &records)?;
    write_atomic(&dir.join("records.csv"), &csv)?;
    let mut summary_json = Vec::new();
    metrics::write_summary_json(&mut summary_json, &summary)?;
    write_atomic(&dir.join("summary.json"), &summary_json)?;
    let mut ts = Vec::new();
    out.timeseries.write_csv(&mut ts)?;
    write_atomic(&dir.join("timeseries.csv"), &ts)?;
    write_atomic(
        &dir.join("events.jsonl"),
        out.trace.to_jsonl_string().as_bytes(),
    )?;

    Ok(RunArtifacts {
        summary,
        dir: dir.to_path_buf(),
    })
}

fn write_sweep_tables(
    qps_list: &[f64],
    scales: &[f64],
    results: &[SweepResult],
    out_dir: &Path,
) -> Result<()> {
    let point = |qps: f64, scale: f64| -> Vec<&SweepResult> {
        results
            .iter()
            .filter(|r| r.qps == qps && r.scale == scale)
            .collect()
    };

    // Full sweep table with repeat spread.
    let mut scaling = String::from(
        "slo_scale,qps_per_gpu,attainment,attainment_min,attainment_max,goodput,qps_per_watt\n",
    );
    for &scale in scales {
        for &qps in qps_list {
            let runs = point(qps, scale);
            if runs.is_empty() {
                continue;
            }
            let mean = |f: &dyn Fn(&SummaryMetrics) -> f64| {
                runs.iter().map(|r| f(&r.summary)).sum::<f64>() / runs.len() as f64
            };
            let att_min = runs
                .iter()
                .map(|r| r.summary.attainment)
                .fold(f64::INFINITY, f64::min);
            let att_max = runs
                .iter()
                .map(|r| r.summary.attainment)
                .fold(0.0, f64::max);
            scaling.push_str(&format!(
                "{:.4},{:.4},{:.6},{:.6},{:.6},{:.6},{:.9}\n",
                scale,
                qps,
                mean(&|s| s.attainment),
                att_min,
                att_max,
                mean(&|s| s.goodput_rps),
                mean(&|s| s.qps_per_watt),
            ));
        }
    }
    write_atomic(&out_dir.join("slo_scaling.csv"), scaling.as_bytes())?;

    // Canonical attainment curve at scale 1.0 (or the first scale swept).
    let curve_scale = if scales.contains(&1.0) {
        1.0
    } else {
        scales[0]
    };
    let mut points = Vec::new();
    for &qps in qps_list {
        let runs = point(qps, curve_scale);
        if runs.is_empty() {
            continue;
        }
        let n = runs.len() as f64;
        points.push(CurvePoint {
            qps_per_gpu: qps,
            attainment: runs.iter().map(|r| r.summary.attainment).sum::<f64>() / n,
            goodput_rps: runs.iter().map(|r| r.summary.goodput_rps).sum::<f64>() / n,
            qps_per_watt: runs.iter().map(|r| r.summary.qps_per_watt).sum::<f64>() / n,
        });
    }
    let curve = attainment_curve(points);
    let mut buf = Vec::new();
    metrics::write_curve_csv(&mut buf, &curve)?;
    write_atomic(&out_dir.join("attainment_curve.csv"), &buf)?;
    Ok(())
}

/// Run several named configurations over the identical workload trace and
/// emit a side-by-side table with the winner per metric.
pub fn cmd_compare(
    base: &ResolvedConfig,
    entries: &[(String, ResolvedConfig)],
    out_dir: &Path,
    parallel: usize,
) -> Result<()> {
    if entries.is_empty() {
        bail!("compare needs at least one --preset or --config entry");
    }
    for (name, config) in entries {
        if config.workload != base.workload {
            bail!(
                "configuration '{name}' carries a different workload; \
                 comparisons require identical traces"
            );
        }
        if config.seed != base.seed {
            bail!("configuration '{name}' changes the seed; comparisons share one trace");
        }
    }

    let results = Mutex::new(Vec::<(usize, SummaryMetrics)>::new());
    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some((name, config)) = entries.get(i) else {
                return Ok(());
            };
            let artifacts = execute_run(config, base.seed, &out_dir.join(name))?;
            results.lock().unwrap().push((i, artifacts.summary));
        }
    };
    if parallel > 1 {
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = (0..parallel.min(entries.len()))
                .map(|_| scope.spawn(worker))
                .collect();
            for handle in handles {
                handle.join().expect("compare worker panicked")?;
            }
            Ok(())
        })?;
    } else {
        worker()?;
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);

    let mut table = String::from(
        "config,attainment,goodput,qps_per_watt,qps_per_watt_node,ttft_p90_s,tpot_p90_s\n",
    );
    for (i, summary) in &results {
        table.push_str(&format!(
            "{},{:.6},{:.6},{:.9},{:.9},{:.6},{:.6}\n",
            entries[*i].0,
            summary.attainment,
            summary.goodput_rps,
            summary.qps_per_watt,
            summary.qps_per_watt_node,
            summary.ttft_p90_s,
            summary.tpot_p90_s,
        ));
    }
    write_atomic(&out_dir.join("comparison.csv"), table.as_bytes())?;

    println!("{}", table.trim_end());
    let winner = |f: &dyn Fn(&SummaryMetrics) -> f64, name: &str| {
        if let Some((i, _)) = results
            .iter()
            .max_by(|(_, a), (_, b)| f(a).total_cmp(&f(b)))
        {
            println!("best {name}: {}", entries[*i].0);
        }
    };
    winner(&|s| s.attainment, "attainment");
    winner(&|s| s.goodput_rps, "goodput");
    winner(&|s| s.qps_per_watt, "qps_per_watt");
    Ok(())
}

/// Generate a workload and save it in the canonical trace format.
pub fn cmd_gen_trace(config: &ResolvedConfig, out_file: &Path) -> Result<()> {
    let (workload, _) = config.build_workload(config.seed)?;
    save_trace(out_file, &workload)?;
    println!(
        "wrote {} requests to {}",
        workload.len(),
        out_file.display()
    );
    Ok(())
}

fn save_trace(path: &Path, workload: &[RequestSpec]) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => capsim_core::workload::save_trace_jsonl(path, workload)?,
        _ => capsim_core::workload::save_trace_csv(path, workload)?,
    }
    Ok(())
}

/// Audit a previously written event trace: budget safety, buffer bound, and
/// controller conformance.
pub fn cmd_audit(trace_path: &Path) -> Result<()> {
    let file = std::fs::File::open(trace_path)
        .with_context(|| format!("opening {}", trace_path.display()))?;
    let trace = capsim_core::sim::EventTrace::read_jsonl(std::io::BufReader::new(file))?;
    let budget = capsim_core::audit::audit_budget(&trace)?;
    let max_occupied = capsim_core::audit::audit_buffer(&trace)?;
    capsim_core::audit::audit_controller(&trace)?;
    println!(
        "audit clean: {} events, peak charged power {} W of {} W budget, peak buffer occupancy {}",
        trace.events.len(),
        budget.max_charged_w,
        budget.budget_w,
        max_occupied
    );
    Ok(())
}
