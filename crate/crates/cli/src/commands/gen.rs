use repo_attn::tasks::{gen_niah_split, gen_reversal_per_length, gen_reversal_split, vocab, write_jsonl, DatasetRecord};

use super::emit;
use crate::manifest::{sidecar, RunManifest};
use crate::{GenTask, NiahArgs, ReversalArgs};

pub fn run(task: GenTask) -> anyhow::Result<()> {
    match task {
        GenTask::Reversal(args) => reversal(&args),
        GenTask::Niah(args) => niah(&args),
    }
}

fn write(command: &str, params: &[u8], seed: u64, out: &std::path::Path, records: &[DatasetRecord]) -> anyhow::Result<()> {
    let mut manifest = RunManifest::start(command, params, Some(seed));
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    emit(&mut manifest, out, &buf)?;
    manifest.finish(&sidecar(out))?;
    log::info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn reversal(args: &ReversalArgs) -> anyhow::Result<()> {
    let symbols = vocab::symbols();
    let range = (args.min_len, args.max_len);
    let examples = match (args.count, args.per_length) {
        (_, Some(per)) => gen_reversal_per_length(args.seed, per, range, &symbols, args.max_seq_len)?,
        (Some(count), None) => gen_reversal_split(args.seed, count, range, &symbols, args.max_seq_len)?,
        (None, None) => unreachable!("clap requires --count or --per-length"),
    };
    let records: Vec<DatasetRecord> = examples.iter().map(DatasetRecord::from).collect();
    write("gen reversal", &serde_json::to_vec(args)?, args.seed, &args.out, &records)
}

fn niah(args: &NiahArgs) -> anyhow::Result<()> {
    let examples = gen_niah_split(args.seed, args.count, args.context_len, args.payload_len, &vocab::symbols())?;
    let records: Vec<DatasetRecord> = examples.iter().map(DatasetRecord::from).collect();
    write("gen niah", &serde_json::to_vec(args)?, args.seed, &args.out, &records)
}
