//! Per-request and aggregate service metrics: TTFT, TPOT, goodput, SLO
//! attainment, QPS/W, and the queueing-delay decomposition.

use crate::scalar::Scalar;
use crate::sim::CompletedRequest;
use crate::us_to_secs;
use crate::workload::SloSchedule;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample set is undefined")]
    EmptySamples,
    #[error("percentile rank {0} outside (0, 100]")]
    BadRank(f64),
}

/// Scored lifecycle of one completed request.
///
/// `ttft = queuing_delay + exec_time` holds exactly in the integer microsecond
/// timestamps the record retains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// prefill_start - arrival.
    pub queuing_delay_s: f64,
    /// prefill_end - prefill_start.
    pub exec_s: f64,
    /// prefill_end - arrival.
    pub ttft_s: f64,
    /// (completion - prefill_end) / (output_tokens - 1); zero for single-token outputs.
    pub tpot_s: f64,
    pub met_ttft: bool,
    pub met_tpot: bool,
    pub slo_ttft_s: f64,
    pub slo_tpot_s: f64,
    pub arrival_us: u64,
    pub prefill_start_us: u64,
    pub prefill_end_us: u64,
    pub completion_us: u64,
}

/// Aggregate metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub requests: usize,
    /// Fraction of requests meeting both targets.
    pub attainment: f64,
    /// Attained requests per second of run time.
    pub goodput_rps: f64,
    /// All completed requests per second of run time.
    pub throughput_rps: f64,
    pub run_duration_s: f64,
    pub ttft_p50_s: f64,
    pub ttft_p90_s: f64,
    pub ttft_p99_s: f64,
    pub tpot_p50_s: f64,
    pub tpot_p90_s: f64,
    pub tpot_p99_s: f64,
    /// Time-weighted mean of the summed effective GPU caps.
    pub avg_provisioned_gpu_power_w: f64,
    /// Goodput per provisioned GPU watt.
    pub qps_per_watt: f64,
    /// Goodput per estimated node watt (GPU power / gpu_share).
    pub qps_per_watt_node: f64,
    /// GPU share of node power used for the node-level estimate.
    pub gpu_power_share: f64,
}

/// Inclusive comparison of one request's latencies against its targets.
pub fn score_request(ttft_s: f64, tpot_s: f64, slo: (f64, f64)) -> (bool, bool) {
    (ttft_s <= slo.0, tpot_s <= slo.1)
}

/// Derive scored records from raw lifecycle timestamps. Each request is
/// scored under the SLO in effect at its arrival time.
pub fn build_records(completed: &[CompletedRequest], slo: &SloSchedule) -> Vec<RequestRecord> {
    completed
        .iter()
        .map(|c| {
            let arrival_s = us_to_secs(c.arrival_us);
            let queuing_delay_s = us_to_secs(c.prefill_start_us - c.arrival_us);
            let exec_s = us_to_secs(c.prefill_end_us - c.prefill_start_us);
            let ttft_s = us_to_secs(c.prefill_end_us - c.arrival_us);
            let tpot_s = if c.output_tokens <= 1 {
                0.0
            } else {
                us_to_secs(c.completion_us - c.prefill_end_us) / f64::from(c.output_tokens - 1)
            };
            let (slo_ttft_s, slo_tpot_s) = slo.at(arrival_s);
            let (met_ttft, met_tpot) = score_request(ttft_s, tpot_s, (slo_ttft_s, slo_tpot_s));
            RequestRecord {
                id: c.id,
                arrival_s,
                input_tokens: c.input_tokens,
                output_tokens: c.output_tokens,
                queuing_delay_s,
                exec_s,
                ttft_s,
                tpot_s,
                met_ttft,
                met_tpot,
                slo_ttft_s,
                slo_tpot_s,
                arrival_us: c.arrival_us,
                prefill_start_us: c.prefill_start_us,
                prefill_end_us: c.prefill_end_us,
                completion_us: c.completion_us,
            }
        })
        .collect()
}

/// Attainment and goodput over a record set. Empty runs score zero and the
/// run duration spans first arrival to last completion.
pub fn attainment_and_goodput(records: &[RequestRecord]) -> (f64, f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let met = records.iter().filter(|r| r.met_ttft && r.met_tpot).count();
    let first_arrival = records.iter().map(|r| r.arrival_us).min().unwrap();
    let last_completion = records.iter().map(|r| r.completion_us).max().unwrap();
    let duration = us_to_secs(last_completion - first_arrival);
    let attainment = met as f64 / records.len() as f64;
    let goodput = if duration > 0.0 {
        met as f64 / duration
    } else {
        0.0
    };
    (attainment, goodput, duration)
}

/// Goodput per watt under both the GPU-power and node-power framings.
pub fn qps_per_watt(goodput_rps: f64, avg_gpu_power_w: f64, gpu_share: f64) -> (f64, f64) {
    let gpu = if avg_gpu_power_w > 0.0 {
        goodput_rps / avg_gpu_power_w
    } else {
        0.0
    };
    let node = if avg_gpu_power_w > 0.0 && gpu_share > 0.0 {
        goodput_rps / (avg_gpu_power_w / gpu_share)
    } else {
        0.0
    };
    (gpu, node)
}

/// Nearest-rank percentile: the value at index `ceil(p/100 * n)` (1-based)
/// of the sorted samples.
pub fn percentile<F: Scalar>(samples: &[F], p: f64) -> Result<F, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if p <= 0.0 || p > 100.0 {
        return Err(MetricsError::BadRank(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("latency samples are ordered"));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Default GPU share of node power for the node-level QPS/W estimate.
pub const DEFAULT_GPU_POWER_SHARE: f64 = 0.6;

/// Aggregate a record set into summary metrics.
pub fn summarize(
    records: &[RequestRecord],
    avg_provisioned_gpu_power_w: f64,
    gpu_power_share: f64,
) -> SummaryMetrics {
    let (attainment, goodput_rps, run_duration_s) = attainment_and_goodput(records);
    let throughput_rps = if run_duration_s > 0.0 {
        records.len() as f64 / run_duration_s
    } else {
        0.0
    };
    let ttft: Vec<f64> = records.iter().map(|r| r.ttft_s).collect();
    let tpot: Vec<f64> = records.iter().map(|r| r.tpot_s).collect();
    let pct = |samples: &[f64], p: f64| percentile(samples, p).unwrap_or(0.0);
    let (qps_per_watt, qps_per_watt_node) =
        self::qps_per_watt(goodput_rps, avg_provisioned_gpu_power_w, gpu_power_share);
    SummaryMetrics {
        requests: records.len(),
        attainment,
        goodput_rps,
        throughput_rps,
        run_duration_s,
        ttft_p50_s: pct(&ttft, 50.0),
        ttft_p90_s: pct(&ttft, 90.0),
        ttft_p99_s: pct(&ttft, 99.0),
        tpot_p50_s: pct(&tpot, 50.0),
        tpot_p90_s: pct(&tpot, 90.0),
        tpot_p99_s: pct(&tpot, 99.0),
        avg_provisioned_gpu_power_w,
        qps_per_watt,
        qps_per_watt_node,
        gpu_power_share,
    }
}

/// One point of a QPS sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub qps_per_gpu: f64,
    pub attainment: f64,
    pub goodput_rps: f64,
    pub qps_per_watt: f64,
}

/// Assemble a sweep table sorted by QPS.
pub fn attainment_curve(mut points: Vec<CurvePoint>) -> Vec<CurvePoint> {
    points.sort_by(|a, b| a.qps_per_gpu.total_cmp(&b.qps_per_gpu));
    points
}

/// Highest swept QPS whose attainment still meets `threshold`.
pub fn max_qps_at(curve: &[CurvePoint], threshold: f64) -> Option<f64> {
    curve
        .iter()
        .filter(|p| p.attainment >= threshold)
        .map(|p| p.qps_per_gpu)
        .fold(None, |best, q| Some(best.map_or(q, |b: f64| b.max(q))))
}

/// Records CSV, one row per request, 6-decimal (microsecond) fixed point.
pub fn write_records_csv<W: Write>(mut w: W, records: &[RequestRecord]) -> std::io::Result<()> {
    writeln!(
        w,
        "id,arrival_s,input_tokens,output_tokens,queuing_delay_s,exec_s,ttft_s,tpot_s,met_ttft,met_tpot"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.id,
            r.arrival_s,
            r.input_tokens,
            r.output_tokens,
            r.queuing_delay_s,
            r.exec_s,
            r.ttft_s,
            r.tpot_s,
            r.met_ttft,
            r.met_tpot
        )?;
    }
    Ok(())
}

pub fn write_summary_json<W: Write>(mut w: W, summary: &SummaryMetrics) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "qps_per_gpu,attainment,goodput,qps_per_watt")?;
    for p in curve {
        writeln!(
            w,
            "{:.4},{:.6},{:.6},{:.9}",
            p.qps_per_gpu, p.attainment, p.goodput_rps, p.qps_per_watt
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::SloSchedule;

    fn request(
        id: u64,
        arrival_us: u64,
        prefill_start_us: u64,
        prefill_end_us: u64,
        completion_us: u64,
        output_tokens: u32,
    ) -> CompletedRequest {
        CompletedRequest {
            id,
            arrival_us,
            input_tokens: 1000,
            output_tokens,
            prefill_start_us,
            prefill_end_us,
            transfer_start_us: prefill_end_us,
            transfer_end_us: prefill_end_us + 1000,
            decode_join_us: prefill_end_us + 1000,
            completion_us,
        }
    }

    #[test]
    fn score_is_inclusive_at_the_boundary() {
        assert_eq!(score_request(0.9, 0.038, (1.0, 0.040)), (true, true));
        assert_eq!(score_request(1.0, 0.040, (1.0, 0.040)), (true, true));
        assert_eq!(
            score_request(1.0 + 1e-9, 0.040, (1.0, 0.040)),
            (false, true)
        );
    }

    #[test]
    fn single_token_output_meets_tpot_trivially() {
        let slo = SloSchedule::constant(1.0, 0.040);
        let records = build_records(&[request(0, 0, 100, 200, 300, 1)], &slo);
        assert_eq!(records[0].tpot_s, 0.0);
        assert!(records[0].met_tpot);
    }

    #[test]
    fn decomposition_identity_is_exact_in_micros() {
        let slo = SloSchedule::constant(1.0, 0.040);
        let records = build_records(&[request(0, 123, 456_789, 1_234_567, 3_000_000, 64)], &slo);
        let r = &records[0];
        assert_eq!(
            r.prefill_end_us - r.arrival_us,
            (r.prefill_start_us - r.arrival_us) + (r.prefill_end_us - r.prefill_start_us)
        );
        assert!((r.ttft_s - (r.queuing_delay_s + r.exec_s)).abs() < 1e-12);
    }

    #[test]
    fn attainment_and_goodput_hand_counts() {
        let slo = SloSchedule::constant(1.0, 0.040);
        // Three requests over a 10 s span; the second misses TTFT.
        let completed = vec![
            request(0, 0, 0, 500_000, 700_000, 8),
            request(1, 1_000_000, 3_000_000, 3_500_000, 4_000_000, 8),
            request(2, 2_000_000, 2_100_000, 2_600_000, 10_000_000, 500),
        ];
        let records = build_records(&completed, &slo);
        assert_eq!(
            records.iter().map(|r| r.met_ttft).collect::<Vec<_>>(),
            vec![true, false, true]
        );
        let (attainment, goodput, duration) = attainment_and_goodput(&records);
        assert!((attainment - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(duration, 10.0);
        assert!((goodput - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_run_scores_zero() {
        let (attainment, goodput, duration) = attainment_and_goodput(&[]);
        assert_eq!((attainment, goodput, duration), (0.0, 0.0, 0.0));
        let summary = summarize(&[], 4800.0, DEFAULT_GPU_POWER_SHARE);
        assert_eq!(summary.attainment, 0.0);
        assert_eq!(summary.goodput_rps, 0.0);
    }

    #[test]
    fn all_met_attains_one() {
        let slo = SloSchedule::constant(10.0, 1.0);
        let completed: Vec<_> = (0..5).map(|i| request(i, 0, 1000, 2000, 3000, 4)).collect();
        let records = build_records(&completed, &slo);
        let (attainment, _, _) = attainment_and_goodput(&records);
        assert_eq!(attainment, 1.0);
    }

    #[test]
    fn qps_per_watt_framings() {
        let (gpu, node) = qps_per_watt(12.0, 4800.0, 0.6);
        assert!((gpu - 0.0025).abs() < 1e-12);
        assert!((node - 12.0 / 8000.0).abs() < 1e-12);
        assert_eq!(qps_per_watt(1.0, 0.0, 0.6), (0.0, 0.0));
    }

    #[test]
    fn percentile_nearest_rank() {
        let samples: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        assert_eq!(percentile(&samples, 90.0).unwrap(), 9.0);
        assert_eq!(percentile(&samples, 50.0).unwrap(), 5.0);
        assert_eq!(percentile(&samples, 100.0).unwrap(), 10.0);
        assert_eq!(percentile(&[7.5f64], 1.0).unwrap(), 7.5);
        assert!(percentile::<f64>(&[], 90.0).is_err());
        // Works at f32 too.
        let single: Vec<f32> = vec![0.25, 0.75];
        assert_eq!(percentile(&single, 90.0).unwrap(), 0.75);
    }

    #[test]
    fn rolling_stat_example_ten_samples() {
        let samples: Vec<f64> = (1..=10).map(|x| 0.2 * x as f64).collect();
        let p90 = percentile(&samples, 90.0).unwrap();
        assert!((p90 - 1.8).abs() < 1e-12);
    }

    #[test]
    fn attainment_matches_brute_force_recount() {
        let slo = SloSchedule::constant(0.8, 0.020);
        let mut completed = Vec::new();
        // Deterministic mix of fast and slow requests.
        for i in 0..200u64 {
            let arrival = i * 250_000;
            let start = arrival + (i % 7) * 150_000;
            let end = start + 300_000 + (i % 5) * 120_000;
            let done = end + 100_000 + (i % 11) * 400_000;
            completed.push(request(i, arrival, start, end, done, 16));
        }
        let records = build_records(&completed, &slo);
        let (attainment, goodput, duration) = attainment_and_goodput(&records);

        // Independent recount straight from the raw timestamps.
        let mut met = 0usize;
        for c in &completed {
            let ttft = (c.prefill_end_us - c.arrival_us) as f64 / 1e6;
            let tpot = (c.completion_us - c.prefill_end_us) as f64 / 1e6 / 15.0;
            if ttft <= 0.8 && tpot <= 0.020 {
                met += 1;
            }
        }
        assert_eq!(attainment, met as f64 / 200.0);
        let first = completed.iter().map(|c| c.arrival_us).min().unwrap();
        let last = completed.iter().map(|c| c.completion_us).max().unwrap();
        let brute_duration = (last - first) as f64 / 1e6;
        assert_eq!(duration, brute_duration);
        assert_eq!(goodput, met as f64 / brute_duration);
        assert!(goodput <= 200.0 / brute_duration);
    }

    #[test]
    fn relaxing_slos_never_loses_met_flags() {
        let slo = SloSchedule::constant(0.5, 0.015);
        let relaxed = SloSchedule::constant(1.0, 0.030);
        let completed: Vec<_> = (0..100u64)
            .map(|i| {
                request(
                    i,
                    i * 100_000,
                    i * 100_000 + (i % 13) * 60_000,
                    i * 100_000 + (i % 13) * 60_000 + 200_000,
                    i * 100_000 + 2_000_000 + (i % 17) * 90_000,
                    32,
                )
            })
            .collect();
        let strict = build_records(&completed, &slo);
        let loose = build_records(&completed, &relaxed);
        for (a, b) in strict.iter().zip(&loose) {
            assert!(b.met_ttft >= a.met_ttft);
            assert!(b.met_tpot >= a.met_tpot);
        }
    }

    #[test]
    fn curve_sorting_and_threshold_query() {
        let curve = attainment_curve(vec![
            CurvePoint {
                qps_per_gpu: 1.5,
                attainment: 0.7,
                goodput_rps: 10.0,
                qps_per_watt: 0.002,
            },
            CurvePoint {
                qps_per_gpu: 1.25,
                attainment: 0.9,
                goodput_rps: 9.0,
                qps_per_watt: 0.002,
            },
            CurvePoint {
                qps_per_gpu: 1.375,
                attainment: 0.85,
                goodput_rps: 9.5,
                qps_per_watt: 0.002,
            },
        ]);
        assert_eq!(curve[0].qps_per_gpu, 1.25);
        assert_eq!(curve[2].qps_per_gpu, 1.5);
        assert_eq!(max_qps_at(&curve, 0.8), Some(1.375));
        assert_eq!(max_qps_at(&curve, 0.95), None);
        assert!(attainment_curve(vec![]).is_empty());
    }

    #[test]
    fn records_csv_shape() {
        let slo = SloSchedule::constant(1.0, 0.040);
        let records = build_records(&[request(0, 0, 100, 200, 300, 4)], &slo);
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,arrival_s,input_tokens,output_tokens,queuing_delay_s,exec_s,ttft_s,tpot_s,met_ttft,met_tpot"
        );
        assert!(lines.next().unwrap().starts_with("0,0.000000,1000,4,"));
    }
}
