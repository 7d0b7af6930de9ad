//! Posterior summaries recomputed from chain traces.

use std::path::PathBuf;

use seqid::io::{read_chain_jsonl, records_to_samples, summarize_pooled, write_summary_csv};

use crate::Failure;

pub fn summarize(traces: &[PathBuf], burn_in: Option<usize>, json: bool) -> Result<(), Failure> {
    let mut names: Option<Vec<String>> = None;
    let mut chains = Vec::with_capacity(traces.len());
    for path in traces {
        let file = std::fs::File::open(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let records = read_chain_jsonl(file).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let (n, samples) = records_to_samples(&records).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        match &names {
            Some(prev) if *prev != n => {
                return Err(Failure::config(format!("{}: parameter names differ from the first trace", path.display())));
            }
            _ => names = Some(n),
        }
        chains.push(samples);
    }
    let shortest = chains.iter().map(Vec::len).min().unwrap_or(0);
    let burn = burn_in.unwrap_or(shortest / 10);
    let rows = summarize_pooled(names.as_deref().unwrap_or(&[]), &chains, burn)?;
    let stdout = std::io::stdout();
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        write_summary_csv(&rows, stdout.lock())?;
    }
    Ok(())
}
