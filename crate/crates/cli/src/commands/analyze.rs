use repo_attn::analysis::{
    classify_trace, mean_mass, niah_attention_mass, plot, range_stats, reference, ChunkPatternReport, Histogram,
    PatternFractions, RangeStat, TracePatterns,
};
use repo_attn::model::ForwardOptions;
use repo_attn::tasks::DatasetRecord;
use repo_attn::{Model, PositionTrace};
use serde::Serialize;

use super::{check_fits, create_dir, emit, load_checkpoint, read_dataset};
use crate::failure::{usage, OrUsage};
use crate::manifest::RunManifest;
use crate::{AnalyzeArgs, Which};

#[derive(Serialize)]
struct PositionsReport {
    records: Vec<RangeStat>,
    pooled: Histogram,
    max_distance: f64,
}

#[derive(Serialize)]
struct RecordPatterns {
    record: usize,
    patterns: TracePatterns,
}

#[derive(Serialize)]
struct PatternsReport {
    delta: usize,
    epsilon: f64,
    reference: PatternFractions,
    records_used: usize,
    records_skipped: usize,
    overall: ChunkPatternReport,
    records: Vec<RecordPatterns>,
}

#[derive(Serialize)]
struct MassReference {
    needle_repo: f64,
    needle_rope: f64,
}

#[derive(Serialize)]
struct MassReport {
    records: usize,
    needle: f64,
    query: f64,
    rest: f64,
    generated_total: f64,
    max_reconstruction_error: f64,
    reference: MassReference,
}

fn traces(model: &Model<f64>, records: &[DatasetRecord]) -> anyhow::Result<Vec<PositionTrace>> {
    let opts = ForwardOptions {
        trace: true,
        ..ForwardOptions::default()
    };
    records
        .iter()
        .map(|r| {
            let tokens: Vec<_> = r.prompt_ids.iter().chain(&r.target_ids).copied().collect();
            let trace = model.forward(&tokens, &opts)?.trace.unwrap_or_default();
            if trace.is_empty() {
                return Err(usage("the checkpoint has no learned position layers to analyze"));
            }
            Ok(trace)
        })
        .collect()
}

pub fn run(args: AnalyzeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut data = read_dataset(&args.data)?;
    check_fits(&data, ckpt.model.config())?;
    data.truncate(args.limit.max(1));
    let model = ckpt.model.cast::<f64>();
    create_dir(&args.out)?;

    let params = serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "which": args.which,
        "delta": args.delta,
        "epsilon": args.epsilon,
        "limit": args.limit,
        "bins": args.bins,
    });
    let mut manifest = RunManifest::start("analyze", &serde_json::to_vec(&params)?, None);
    let out = |name: &str| args.out.join(name);

    match args.which {
        Which::Positions => {
            let traces = traces(&model, &data)?;
            let stats = traces
                .iter()
                .map(|t| range_stats(t, args.bins))
                .collect::<Result<Vec<_>, _>>()
                .or_usage()?;
            let distances: Vec<f64> = stats.iter().flat_map(|s| s.heads.iter().map(|h| h.distance)).collect();
            let pooled = Histogram::equal_width(&distances, args.bins).or_usage()?;
            let mut csv = String::from("record,layer,head,min,max,distance\n");
            for (i, s) in stats.iter().enumerate() {
                for line in s.to_csv().lines().skip(1) {
                    csv.push_str(&format!("{i},{line}\n"));
                }
            }
            for (i, t) in traces.iter().enumerate() {
                let svg = plot::positions_svg(t, &format!("assigned positions, record {i}"));
                emit(&mut manifest, &out(&format!("positions_{i}.svg")), svg.as_bytes())?;
            }
            let svg = plot::histogram_svg(&pooled, "position range per head", "max(z) - min(z)");
            emit(&mut manifest, &out("ranges.svg"), svg.as_bytes())?;
            emit(&mut manifest, &out("ranges.csv"), csv.as_bytes())?;
            let report = PositionsReport {
                max_distance: distances.iter().copied().fold(0.0, f64::max),
                records: stats,
                pooled,
            };
            emit(&mut manifest, &out("positions.json"), &serde_json::to_vec_pretty(&report)?)?;
            if args.trace {
                emit(&mut manifest, &out("traces.json"), &serde_json::to_vec(&traces)?)?;
            }
            println!("position ranges: max distance {:.4} over {} records", report.max_distance, traces.len());
        }
        Which::Patterns => {
            if args.delta < 2 {
                return Err(usage("--delta must be at least 2"));
            }
            if !(args.epsilon.is_finite() && args.epsilon >= 0.0) {
                return Err(usage("--epsilon must be a finite non-negative number"));
            }
            let traces = traces(&model, &data)?;
            let mut records = Vec::new();
            let mut skipped = 0;
            for (i, t) in traces.iter().enumerate() {
                if t.tokens.len() < args.delta {
                    skipped += 1;
                    continue;
                }
                records.push(RecordPatterns {
                    record: i,
                    patterns: classify_trace(t, args.delta, args.epsilon)?,
                });
            }
            if records.is_empty() {
                return Err(usage(format!("no record is at least --delta {} tokens long", args.delta)));
            }
            let overall = ChunkPatternReport::merge(records.iter().map(|r| &r.patterns.overall))?;
            let mut csv = String::from("record,layer,head,chunk,label\n");
            for r in &records {
                for line in r.patterns.to_csv().lines().skip(1) {
                    csv.push_str(&format!("{},{line}\n", r.record));
                }
            }
            let f = overall.fractions;
            let report = PatternsReport {
                delta: args.delta,
                epsilon: args.epsilon,
                reference: records[0].patterns.reference,
                records_used: records.len(),
                records_skipped: skipped,
                overall,
                records,
            };
            emit(&mut manifest, &out("patterns.json"), &serde_json::to_vec_pretty(&report)?)?;
            emit(&mut manifest, &out("patterns.csv"), csv.as_bytes())?;
            if args.trace {
                emit(&mut manifest, &out("traces.json"), &serde_json::to_vec(&traces)?)?;
            }
            println!(
                "chunk patterns (delta {}, epsilon {}): constant {:.3}, mono {:.3}, hybrid {:.3}",
                args.delta, args.epsilon, f.constant, f.mono, f.hybrid
            );
        }
        Which::Mass => {
            let examples = data
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.to_niah()
                        .ok_or_else(|| usage(format!("record {} has no span annotation; mass needs retrieval data", i + 1)))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let reports = examples
                .iter()
                .map(|e| niah_attention_mass(&model, e))
                .collect::<Result<Vec<_>, _>>()?;
            let mean = mean_mass(&reports)?;
            let max_err = mean.reconstruction.iter().map(|t| (t - 1.0).abs()).fold(0.0, f64::max);
            let report = MassReport {
                records: reports.len(),
                needle: mean.needle,
                query: mean.query,
                rest: mean.rest,
                generated_total: mean.generated_total,
                max_reconstruction_error: max_err,
                reference: MassReference {
                    needle_repo: reference::NEEDLE_MASS_REPO,
                    needle_rope: reference::NEEDLE_MASS_ROPE,
                },
            };
            emit(&mut manifest, &out("mass.json"), &serde_json::to_vec_pretty(&report)?)?;
            emit(&mut manifest, &out("mass.csv"), mean.to_csv().as_bytes())?;
            println!(
                "attention mass per token: needle {:.4e}, query {:.4e}, rest {:.4e}",
                report.needle, report.query, report.rest
            );
        }
    }
    manifest.finish(&out("manifest.json"))?;
    Ok(())
}
