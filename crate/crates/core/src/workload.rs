//! Workload generation and trace ingestion.
//!
//! Randomness comes from a ChaCha8 generator seeded with the workload's
//! 64-bit seed. Stream 0 produces arrival gaps (inverse-CDF exponential from
//! one `f64` draw per request); stream 1 produces token lengths. Fixing the
//! seed fixes every generated trace bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Default clamp for prompt lengths read from trace files.
pub const DEFAULT_MAX_INPUT_TOKENS: u32 = 8192;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload rate must be positive, got {0} QPS/GPU x {1} GPUs")]
    NonPositiveRate(f64, usize),
    #[error("lengths list is empty")]
    EmptyLengths,
    #[error("two-phase generation needs exactly two phases, got {0}")]
    PhaseCount(usize),
    #[error("phase {index} is invalid: {reason}")]
    BadPhase { index: usize, reason: String },
    #[error("trace {path}: line {line}: {reason}")]
    BadRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("trace {path}: {reason}")]
    BadTrace { path: String, reason: String },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

/// One inference request to replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: u64,
    /// Seconds from run start.
    pub arrival_time: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// One phase of a synthetic workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub count: usize,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// TPOT target while this phase's requests arrive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot_slo_s: Option<f64>,
}

/// Rate, sizing and seeding shared by the generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub qps_per_gpu: f64,
    pub gpu_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(default = "default_max_input_tokens")]
    pub max_input_tokens: u32,
}

fn default_max_input_tokens() -> u32 {
    DEFAULT_MAX_INPUT_TOKENS
}

impl WorkloadSpec {
    pub fn new(qps_per_gpu: f64, gpu_count: usize, seed: u64) -> Self {
        Self {
            qps_per_gpu,
            gpu_count,
            seed,
            phases: Vec::new(),
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
        }
    }

    /// Aggregate arrival rate in requests per second.
    pub fn lambda(&self) -> f64 {
        self.qps_per_gpu * self.gpu_count as f64
    }

    /// The synthetic workload used for the dynamic-policy studies: a prefill
    /// heavy phase followed by a decode heavy phase, with the TPOT target
    /// tightening from 40 ms to 20 ms at the phase boundary.
    pub fn two_phase_default(qps_per_gpu: f64, gpu_count: usize, seed: u64) -> Self {
        let mut spec = Self::new(qps_per_gpu, gpu_count, seed);
        spec.phases = vec![
            PhaseSpec {
                count: 1000,
                input_tokens: 8192,
                output_tokens: 128,
                tpot_slo_s: Some(0.040),
            },
            PhaseSpec {
                count: 1000,
                input_tokens: 500,
                output_tokens: 500,
                tpot_slo_s: Some(0.020),
            },
        ];
        spec
    }
}

/// A step function from run time to the (TTFT, TPOT) targets in effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloSchedule {
    /// Sorted by `from_s`; the first entry covers the run from t = 0.
    pub points: Vec<SloPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloPoint {
    pub from_s: f64,
    pub ttft_s: f64,
    pub tpot_s: f64,
}

impl SloSchedule {
    pub fn constant(ttft_s: f64, tpot_s: f64) -> Self {
        Self {
            points: vec![SloPoint {
                from_s: 0.0,
                ttft_s,
                tpot_s,
            }],
        }
    }

    /// Targets in effect at time `t` seconds.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let mut current = self.points[0];
        for point in &self.points {
            if point.from_s <= t {
                current = *point;
            } else {
                break;
            }
        }
        (current.ttft_s, current.tpot_s)
    }

    /// Scale both targets uniformly, e.g. 2.0 relaxes, 0.5 tightens.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| SloPoint {
                    from_s: p.from_s,
                    ttft_s: p.ttft_s * factor,
                    tpot_s: p.tpot_s * factor,
                })
                .collect(),
        }
    }
}

fn gaps_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn lengths_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One exponential inter-arrival gap with mean `1/lambda`.
fn exp_gap(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / lambda
}

/// Draw Poisson arrival times for `lengths` and assign the lengths in order.
///
/// Gaps are i.i.d. exponential with mean `1/lambda`, `lambda` the aggregate
/// rate of `spec`. Output is sorted by arrival time with dense ids from 0.
pub fn gen_poisson_arrivals(
    spec: &WorkloadSpec,
    lengths: &[(u32, u32)],
) -> Result<Vec<RequestSpec>, WorkloadError> {
    if spec.lambda() <= 0.0 {
        return Err(WorkloadError::NonPositiveRate(
            spec.qps_per_gpu,
            spec.gpu_count,
        ));
    }
    if lengths.is_empty() {
        return Err(WorkloadError::EmptyLengths);
    }
    let lambda = spec.lambda();
    let mut rng = gaps_rng(spec.seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(lengths.len());
    for (id, &(input, output)) in lengths.iter().enumerate() {
        t += exp_gap(&mut rng, lambda);
        out.push(RequestSpec {
            id: id as u64,
            arrival_time: t,
            input_tokens: input,
            output_tokens: output,
        });
    }
    Ok(out)
}

/// Generate the two-phase synthetic workload plus its SLO schedule.
///
/// Phase-1 requests strictly precede phase-2 requests; the Poisson gap stream
/// runs uninterrupted across the boundary. The schedule keeps TTFT constant
/// and switches TPOT at the arrival of the first phase-2 request.
pub fn gen_two_phase_synthetic(
    spec: &WorkloadSpec,
    ttft_slo_s: f64,
) -> Result<(Vec<RequestSpec>, SloSchedule), WorkloadError> {
    if spec.phases.len() != 2 {
        return Err(WorkloadError::PhaseCount(spec.phases.len()));
    }
    for (index, phase) in spec.phases.iter().enumerate() {
        if phase.count == 0 {
            return Err(WorkloadError::BadPhase {
                index,
                reason: "count must be at least 1".into(),
            });
        }
        if phase.input_tokens == 0 || phase.output_tokens == 0 {
            return Err(WorkloadError::BadPhase {
                index,
                reason: "token counts must be at least 1".into(),
            });
        }
    }
    let lengths: Vec<(u32, u32)> = spec
        .phases
        .iter()
        .flat_map(|p| std::iter::repeat_n((p.input_tokens, p.output_tokens), p.count))
        .collect();
    let requests = gen_poisson_arrivals(spec, &lengths)?;

    let mut points = vec![SloPoint {
        from_s: 0.0,
        ttft_s: ttft_slo_s,
        tpot_s: spec.phases[0].tpot_slo_s.unwrap_or(0.040),
    }];
    let phase2_start = requests[spec.phases[0].count].arrival_time;
    points.push(SloPoint {
        from_s: phase2_start,
        ttft_s: ttft_slo_s,
        tpot_s: spec.phases[1].tpot_slo_s.unwrap_or(0.020),
    });
    Ok((requests, SloSchedule { points }))
}

/// Token lengths drawn uniformly from inclusive ranges, on the length stream.
pub fn gen_uniform_lengths(
    count: usize,
    input_range: (u32, u32),
    output_range: (u32, u32),
    seed: u64,
) -> Vec<(u32, u32)> {
    let mut rng = lengths_rng(seed);
    (0..count)
        .map(|_| {
            let input = rng.gen_range(input_range.0..=input_range.1);
            let output = rng.gen_range(output_range.0..=output_range.1);
            (input, output)
        })
        .collect()
}

/// A fixed-length workload: every request uses the same token counts.
pub fn gen_fixed_lengths(count: usize, input_tokens: u32, output_tokens: u32) -> Vec<(u32, u32)> {
    vec![(input_tokens, output_tokens); count]
}

#[derive(Debug, Deserialize)]
struct JsonlRow {
    input_tokens: u32,
    output_tokens: u32,
    #[serde(default)]
    arrival_time: Option<f64>,
}

/// Load a request trace from CSV (header `input_tokens,output_tokens[,arrival_time]`)
/// or JSONL (same keys, one object per line, chosen by a `.jsonl`/`.json` extension).
///
/// Prompts longer than `spec.max_input_tokens` are clamped. If arrival times
/// are absent they are synthesized as Poisson arrivals from `spec`; if
/// present, rows are sorted by arrival and ids assigned densely from 0.
pub fn load_trace(
    path: impl AsRef<Path>,
    spec: &WorkloadSpec,
) -> Result<Vec<RequestSpec>, WorkloadError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    let rows = if is_jsonl {
        load_jsonl_rows(path, &display)?
    } else {
        load_csv_rows(path, &display)?
    };
    if rows.is_empty() {
        return Err(WorkloadError::BadTrace {
            path: display,
            reason: "trace holds no records".into(),
        });
    }

    let with_arrivals = rows.iter().filter(|r| r.2.is_some()).count();
    if with_arrivals != 0 && with_arrivals != rows.len() {
        return Err(WorkloadError::BadTrace {
            path: display,
            reason: "arrival_time must be present on every record or on none".into(),
        });
    }

    let clamp = |input: u32| input.min(spec.max_input_tokens);
    if with_arrivals == rows.len() {
        let mut specs: Vec<RequestSpec> = rows
            .into_iter()
            .map(|(input, output, arrival)| RequestSpec {
                id: 0,
                arrival_time: arrival.unwrap(),
                input_tokens: clamp(input),
                output_tokens: output,
            })
            .collect();
        specs.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
        for (id, spec) in specs.iter_mut().enumerate() {
            spec.id = id as u64;
        }
        Ok(specs)
    } else {
        let lengths: Vec<(u32, u32)> = rows
            .into_iter()
            .map(|(input, output, _)| (clamp(input), output))
            .collect();
        gen_poisson_arrivals(spec, &lengths)
    }
}

type RawRow = (u32, u32, Option<f64>);

fn load_csv_rows(path: &Path, display: &str) -> Result<Vec<RawRow>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| WorkloadError::BadTrace {
            path: display.into(),
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| WorkloadError::BadTrace {
            path: display.into(),
            reason: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (input_col, output_col) = match (col("input_tokens"), col("output_tokens")) {
        (Some(i), Some(o)) => (i, o),
        _ => {
            return Err(WorkloadError::BadTrace {
                path: display.into(),
                reason: "header must name input_tokens and output_tokens".into(),
            })
        }
    };
    let arrival_col = col("arrival_time");

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // one-based, after the header
        let record = record.map_err(|e| WorkloadError::BadRecord {
            path: display.into(),
            line,
            reason: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str, WorkloadError> {
            record.get(c).ok_or_else(|| WorkloadError::BadRecord {
                path: display.into(),
                line,
                reason: format!("missing column {c}"),
            })
        };
        let input: u32 = field(input_col)?
            .parse()
            .map_err(|e| WorkloadError::BadRecord {
                path: display.into(),
                line,
                reason: format!("input_tokens: {e}"),
            })?;
        let output: u32 = field(output_col)?
            .parse()
            .map_err(|e| WorkloadError::BadRecord {
                path: display.into(),
                line,
                reason: format!("output_tokens: {e}"),
            })?;
        let arrival = match arrival_col {
            Some(c) => match record.get(c) {
                Some("") | None => None,
                Some(text) => Some(text.parse::<f64>().map_err(|e| WorkloadError::BadRecord {
                    path: display.into(),
                    line,
                    reason: format!("arrival_time: {e}"),
                })?),
            },
            None => None,
        };
        validate_row(input, output, arrival, display, line)?;
        rows.push((input, output, arrival));
    }
    Ok(rows)
}

fn load_jsonl_rows(path: &Path, display: &str) -> Result<Vec<RawRow>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&text).map_err(|e| WorkloadError::BadRecord {
            path: display.into(),
            line: line_no,
            reason: e.to_string(),
        })?;
        validate_row(
            row.input_tokens,
            row.output_tokens,
            row.arrival_time,
            display,
            line_no,
        )?;
        rows.push((row.input_tokens, row.output_tokens, row.arrival_time));
    }
    Ok(rows)
}

fn validate_row(
    input: u32,
    output: u32,
    arrival: Option<f64>,
    display: &str,
    line: usize,
) -> Result<(), WorkloadError> {
    if input == 0 || output == 0 {
        return Err(WorkloadError::BadRecord {
            path: display.into(),
            line,
            reason: "token counts must be at least 1".into(),
        });
    }
    if let Some(t) = arrival {
        if !t.is_finite() || t < 0.0 {
            return Err(WorkloadError::BadRecord {
                path: display.into(),
                line,
                reason: format!("arrival_time must be finite and non-negative, got {t}"),
            });
        }
    }
    Ok(())
}

/// Write a trace as CSV with the canonical header, arrival times included.
pub fn save_trace_csv(path: impl AsRef<Path>, requests: &[RequestSpec]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "input_tokens,output_tokens,arrival_time")?;
    for r in requests {
        writeln!(
            out,
            "{},{},{:.6}",
            r.input_tokens, r.output_tokens, r.arrival_time
        )?;
    }
    out.flush()
}

/// Write a trace as JSONL, one record per line.
pub fn save_trace_jsonl(path: impl AsRef<Path>, requests: &[RequestSpec]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in requests {
        writeln!(
            out,
            "{}",
            serde_json::json!({
                "input_tokens": r.input_tokens,
                "output_tokens": r.output_tokens,
                "arrival_time": r.arrival_time,
            })
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_sample_mean_close_to_rate() {
        let spec = WorkloadSpec::new(1.5, 8, 0);
        let lengths = gen_fixed_lengths(1000, 4096, 128);
        let reqs = gen_poisson_arrivals(&spec, &lengths).unwrap();
        assert_eq!(reqs.len(), 1000);
        let mean_gap = reqs.last().unwrap().arrival_time / 1000.0;
        let expect = 1.0 / 12.0;
        assert!(
            (mean_gap - expect).abs() / expect < 0.10,
            "sample mean {mean_gap} too far from {expect}"
        );
    }

    #[test]
    fn poisson_single_request() {
        let spec = WorkloadSpec::new(2.0, 4, 7);
        let reqs = gen_poisson_arrivals(&spec, &[(100, 10)]).unwrap();
        assert_eq!(reqs.len(), 1);
        assert!(reqs[0].arrival_time >= 0.0);
        assert_eq!(reqs[0].id, 0);
    }

    #[test]
    fn poisson_is_deterministic_per_seed() {
        let spec = WorkloadSpec::new(1.5, 8, 42);
        let lengths = gen_uniform_lengths(200, (512, 8192), (128, 256), 42);
        let a = gen_poisson_arrivals(&spec, &lengths).unwrap();
        let b = gen_poisson_arrivals(&spec, &lengths).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 43;
        let c = gen_poisson_arrivals(&other, &lengths).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_rejects_bad_inputs() {
        let spec = WorkloadSpec::new(0.0, 8, 0);
        assert!(matches!(
            gen_poisson_arrivals(&spec, &[(1, 1)]),
            Err(WorkloadError::NonPositiveRate(..))
        ));
        let spec = WorkloadSpec::new(1.0, 8, 0);
        assert!(matches!(
            gen_poisson_arrivals(&spec, &[]),
            Err(WorkloadError::EmptyLengths)
        ));
    }

    #[test]
    fn arrivals_non_decreasing_and_ids_dense() {
        let spec = WorkloadSpec::new(3.0, 8, 11);
        let lengths = gen_uniform_lengths(500, (512, 8192), (128, 256), 11);
        let reqs = gen_poisson_arrivals(&spec, &lengths).unwrap();
        for (i, pair) in reqs.windows(2).enumerate() {
            assert!(pair[1].arrival_time >= pair[0].arrival_time);
            assert_eq!(pair[0].id, i as u64);
        }
    }

    #[test]
    fn two_phase_defaults_match_expected_counts() {
        let spec = WorkloadSpec::two_phase_default(2.0, 8, 0);
        let (reqs, slo) = gen_two_phase_synthetic(&spec, 1.0).unwrap();
        assert_eq!(reqs.len(), 2000);
        assert!(reqs[..1000]
            .iter()
            .all(|r| r.input_tokens == 8192 && r.output_tokens == 128));
        assert!(reqs[1000..]
            .iter()
            .all(|r| r.input_tokens == 500 && r.output_tokens == 500));
        let total_input: u64 = reqs.iter().map(|r| u64::from(r.input_tokens)).sum();
        assert_eq!(total_input, 8192 * 1000 + 500 * 1000);

        assert_eq!(slo.points.len(), 2);
        assert_eq!(slo.at(0.0), (1.0, 0.040));
        let boundary = reqs[1000].arrival_time;
        assert_eq!(slo.at(boundary), (1.0, 0.020));
        assert_eq!(slo.at(boundary - 1e-9).1, 0.040);
    }

    #[test]
    fn two_phase_minimal_counts() {
        let mut spec = WorkloadSpec::two_phase_default(1.0, 8, 3);
        spec.phases[0].count = 1;
        spec.phases[1].count = 1;
        let (reqs, _) = gen_two_phase_synthetic(&spec, 1.0).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].input_tokens, 8192);
        assert_eq!(reqs[1].input_tokens, 500);
        assert!(reqs[0].arrival_time <= reqs[1].arrival_time);
    }

    #[test]
    fn two_phase_seed_changes_gaps_not_lengths() {
        let a = gen_two_phase_synthetic(&WorkloadSpec::two_phase_default(2.0, 8, 0), 1.0)
            .unwrap()
            .0;
        let b = gen_two_phase_synthetic(&WorkloadSpec::two_phase_default(2.0, 8, 1), 1.0)
            .unwrap()
            .0;
        assert_ne!(
            a.iter().map(|r| r.arrival_time).collect::<Vec<_>>(),
            b.iter().map(|r| r.arrival_time).collect::<Vec<_>>()
        );
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                (x.input_tokens, x.output_tokens),
                (y.input_tokens, y.output_tokens)
            );
        }
    }

    #[test]
    fn two_phase_requires_two_phases() {
        let spec = WorkloadSpec::new(1.0, 8, 0);
        assert!(matches!(
            gen_two_phase_synthetic(&spec, 1.0),
            Err(WorkloadError::PhaseCount(0))
        ));
    }

    #[test]
    fn csv_trace_roundtrip_and_clamp() {
        let dir = std::env::temp_dir().join(format!("capsim-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        std::fs::write(
            &path,
            "input_tokens,output_tokens\n4096,128\n16000,128\n512,64\n",
        )
        .unwrap();
        let spec = WorkloadSpec::new(1.0, 8, 0);
        let reqs = load_trace(&path, &spec).unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(reqs[0].input_tokens, 4096);
        assert_eq!(reqs[1].input_tokens, 8192, "over-long prompt clamps");
        assert_eq!(reqs[2].output_tokens, 64);
        assert!(reqs
            .windows(2)
            .all(|w| w[0].arrival_time <= w[1].arrival_time));
    }

    #[test]
    fn csv_trace_with_explicit_arrivals() {
        let dir = std::env::temp_dir().join(format!("capsim-trace2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        std::fs::write(
            &path,
            "input_tokens,output_tokens,arrival_time\n100,10,2.5\n200,20,1.0\n",
        )
        .unwrap();
        let reqs = load_trace(&path, &WorkloadSpec::new(1.0, 8, 0)).unwrap();
        assert_eq!(reqs[0].arrival_time, 1.0);
        assert_eq!(reqs[0].input_tokens, 200);
        assert_eq!(reqs[1].arrival_time, 2.5);
    }

    #[test]
    fn csv_trace_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join(format!("capsim-trace3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "input_tokens,output_tokens\n100,10\nabc,5\n").unwrap();
        let err = load_trace(&path, &WorkloadSpec::new(1.0, 8, 0)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("line 3"), "got: {text}");

        std::fs::write(&path, "input_tokens,output_tokens\n0,10\n").unwrap();
        let err = load_trace(&path, &WorkloadSpec::new(1.0, 8, 0)).unwrap_err();
        assert!(err.to_string().contains("at least 1"));
    }

    #[test]
    fn jsonl_trace_parses() {
        let dir = std::env::temp_dir().join(format!("capsim-trace4-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        std::fs::write(
            &path,
            "{\"input_tokens\":300,\"output_tokens\":30}\n{\"input_tokens\":400,\"output_tokens\":40}\n",
        )
        .unwrap();
        let reqs = load_trace(&path, &WorkloadSpec::new(2.0, 8, 5)).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].input_tokens, 300);
    }

    #[test]
    fn saved_trace_reloads_identically() {
        let dir = std::env::temp_dir().join(format!("capsim-trace5-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.csv");
        let spec = WorkloadSpec::new(1.5, 8, 9);
        let lengths = gen_uniform_lengths(50, (512, 8192), (128, 256), 9);
        let reqs = gen_poisson_arrivals(&spec, &lengths).unwrap();
        save_trace_csv(&path, &reqs).unwrap();
        let reloaded = load_trace(&path, &spec).unwrap();
        assert_eq!(reloaded.len(), reqs.len());
        for (a, b) in reqs.iter().zip(&reloaded) {
            assert_eq!(a.input_tokens, b.input_tokens);
            assert_eq!(a.output_tokens, b.output_tokens);
            assert!((a.arrival_time - b.arrival_time).abs() < 1e-6);
        }
    }

    #[test]
    fn slo_schedule_lookup_and_scaling() {
        let slo = SloSchedule {
            points: vec![
                SloPoint {
                    from_s: 0.0,
                    ttft_s: 1.0,
                    tpot_s: 0.040,
                },
                SloPoint {
                    from_s: 10.0,
                    ttft_s: 1.0,
                    tpot_s: 0.020,
                },
            ],
        };
        assert_eq!(slo.at(5.0), (1.0, 0.040));
        assert_eq!(slo.at(10.0), (1.0, 0.020));
        assert_eq!(slo.at(100.0), (1.0, 0.020));
        let relaxed = slo.scaled(2.0);
        assert_eq!(relaxed.at(0.0), (2.0, 0.080));
    }
}
