//! Trace and summary file formats, and the two-column tank series loader.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::iact;
use crate::learn::{ChainTrace, SearchRecord};
use crate::stats::{mean, quantile_sorted, std_dev};

/// Sampling period of the tank benchmark series, in seconds.
pub const TANK_SAMPLING_PERIOD: f64 = 4.0;

/// One JSONL line of a chain trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub m: usize,
    pub theta: BTreeMap<String, f64>,
    /// `None` stands for a non-finite value.
    pub log_z: Option<f64>,
    pub accepted: bool,
}

pub fn write_chain_jsonl<W: Write>(trace: &ChainTrace, mut w: W) -> Result<()> {
    for (m, s) in trace.samples.iter().enumerate() {
        let rec = ChainRecord {
            m,
            theta: trace.names.iter().cloned().zip(s.iter().copied()).collect(),
            log_z: Some(trace.log_z[m]).filter(|v| v.is_finite()),
            accepted: trace.accepted[m],
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_chain_jsonl<R: Read>(r: R) -> Result<Vec<ChainRecord>> {
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 1,
            column: "record".into(),
            message: e.to_string(),
        })?;
        if rec.m != out.len() {
            return Err(Error::Parse {
                row: i + 1,
                column: "m".into(),
                message: format!("expected m = {}, found {}", out.len(), rec.m),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Posterior summary of one parameter's chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q975: f64,
    /// NaN for a constant chain.
    pub iact: f64,
    pub ess: f64,
}

/// Summaries of each column of `samples` after discarding `burn_in` rows.
pub fn summarize_samples(names: &[String], samples: &[Vec<f64>], burn_in: usize) -> Result<Vec<ParamSummary>> {
    summarize_pooled(names, std::slice::from_ref(&samples.to_vec()), burn_in)
}

/// Summaries of chains pooled after per-chain burn-in. IACT is the mean of
/// the per-chain values and ESS the sum of per-chain ESS.
pub fn summarize_pooled(names: &[String], chains: &[Vec<Vec<f64>>], burn_in: usize) -> Result<Vec<ParamSummary>> {
    let kept: Vec<&[Vec<f64>]> = chains.iter().map(|c| c.get(burn_in..).unwrap_or(&[])).collect();
    if kept.is_empty() || kept.iter().any(|k| k.len() < 2) {
        return Err(Error::input("fewer than two samples after burn-in"));
    }
    if kept.iter().flat_map(|k| k.iter()).any(|s| s.len() != names.len()) {
        return Err(Error::input("sample width differs from the parameter names"));
    }
    let mut out = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let cols: Vec<Vec<f64>> = kept.iter().map(|k| k.iter().map(|s| s[j]).collect()).collect();
        let pooled: Vec<f64> = cols.concat();
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let taus: Vec<f64> = cols.iter().map(|c| iact(c).unwrap_or(f64::NAN)).collect();
        out.push(ParamSummary {
            name: name.clone(),
            mean: mean(&pooled),
            sd: std_dev(&pooled),
            q025: quantile_sorted(&sorted, 0.025),
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            q975: quantile_sorted(&sorted, 0.975),
            iact: mean(&taus),
            ess: cols.iter().zip(&taus).map(|(c, t)| c.len() as f64 / t).sum(),
        });
    }
    Ok(out)
}

pub fn summarize_chain(trace: &ChainTrace) -> Result<Vec<ParamSummary>> {
    summarize_samples(&trace.names, &trace.samples, trace.burn_in)
}

/// Parameter names and sample rows recovered from JSONL records.
pub fn records_to_samples(records: &[ChainRecord]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let names: Vec<String> = records.first().map(|r| r.theta.keys().cloned().collect()).unwrap_or_default();
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        if r.theta.len() != names.len() || !names.iter().all(|n| r.theta.contains_key(n)) {
            return Err(Error::Parse {
                row: r.m + 1,
                column: "theta".into(),
                message: "parameter names differ from the first record".into(),
            });
        }
        rows.push(names.iter().map(|n| r.theta[n]).collect());
    }
    Ok((names, rows))
}

pub fn write_summary_csv<W: Write>(rows: &[ParamSummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Learner trace: `iter`, one column per parameter, `log_z`, `step`, `accepted`.
pub fn write_learner_trace_csv<W: Write>(names: &[String], records: &[SearchRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["iter".to_string()];
    header.extend(names.iter().cloned());
    header.extend(["log_z", "step", "accepted"].map(String::from));
    wtr.write_record(&header)?;
    for r in records {
        if r.theta.len() != names.len() {
            return Err(Error::input("record width differs from the parameter names"));
        }
        let mut row = vec![r.iter.to_string()];
        row.extend(r.theta.iter().map(|v| format!("{v:?}")));
        row.push(format!("{:?}", r.log_z));
        row.push(format!("{:?}", r.step));
        row.push(r.accepted.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Two-column `u,y` series, every row observed.
pub fn read_tank_series<R: Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.into(),
            message: "missing column".into(),
        })
    };
    let (iu, iy) = (col("u")?, col("y")?);
    if headers.len() != 2 {
        return Err(Error::Parse {
            row: 0,
            column: headers.iter().collect::<Vec<_>>().join(","),
            message: "expected exactly the columns u,y".into(),
        });
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize, name: &str| {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row: i + 1,
                column: name.into(),
                message: format!("not a finite number: {s:?}"),
            })
        };
        u.push(parse(iu, "u")?);
        y.push(parse(iy, "y")?);
    }
    if y.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: "u".into(),
            message: "no data rows".into(),
        });
    }
    Dataset::scalar(&u, &y)
}

pub fn read_tank_series_path(path: impl AsRef<Path>) -> Result<Dataset> {
    read_tank_series(std::fs::File::open(path)?)
}

pub fn write_tank_series<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["u", "y"])?;
    for t in 0..data.len() {
        let u = data.input(t).first().copied().unwrap_or(0.0);
        let y = data
            .observation(t)
            .ok_or_else(|| Error::input("tank series must be fully observed"))?[0];
        wtr.write_record([format!("{u:?}"), format!("{y:?}")])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::McmcConfig;

    fn trace() -> ChainTrace {
        ChainTrace {
            names: vec!["q".into(), "r".into()],
            samples: (0..50).map(|i| vec![i as f64 * 0.1, (i % 7) as f64]).collect(),
            log_z: (0..50).map(|i| if i == 3 { f64::NEG_INFINITY } else { -(i as f64) }).collect(),
            log_target: vec![0.0; 50],
            accepted: (0..50).map(|i| i % 2 == 0).collect(),
            trajectories: None,
            seed: 9,
            burn_in: 5,
            config: serde_json::to_value(McmcConfig::default()).unwrap(),
        }
    }

    #[test]
    fn chain_jsonl_roundtrip() {
        let t = trace();
        let mut buf = Vec::new();
        write_chain_jsonl(&t, &mut buf).unwrap();
        let recs = read_chain_jsonl(&buf[..]).unwrap();
        assert_eq!(recs.len(), 50);
        assert_eq!(recs[3].log_z, None);
        let (names, rows) = records_to_samples(&recs).unwrap();
        assert_eq!(names, t.names);
        assert_eq!(rows, t.samples);
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"m":0,"theta":{"q":0.0,"r":0.0},"log_z":-0.0,"accepted":true}"#);
    }

    #[test]
    fn out_of_order_records_rejected() {
        let s = "{\"m\":1,\"theta\":{},\"log_z\":null,\"accepted\":true}\n";
        assert!(matches!(read_chain_jsonl(s.as_bytes()), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn summary_quantiles_and_csv() {
        let names = vec!["x".to_string()];
        let samples: Vec<Vec<f64>> = (0..=100).map(|i| vec![i as f64]).collect();
        let s = summarize_samples(&names, &samples, 0).unwrap();
        assert_eq!(s[0].median, 50.0);
        assert_eq!(s[0].q25, 25.0);
        assert_eq!(s[0].mean, 50.0);
        let mut buf = Vec::new();
        write_summary_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,mean,sd,q025,q25,median,q75,q975,iact,ess\n"));
        let c = summarize_samples(&names, &vec![vec![1.0]; 10], 0).unwrap();
        assert!(c[0].iact.is_nan());
        assert!(summarize_samples(&names, &samples, 100).is_err());
    }

    #[test]
    fn pooled_summary_of_one_chain_matches() {
        let names = vec!["x".to_string(), "y".to_string()];
        let chain: Vec<Vec<f64>> = (0..200).map(|i| vec![((i * 37) % 101) as f64, (i % 13) as f64]).collect();
        let single = summarize_samples(&names, &chain, 20).unwrap();
        assert_eq!(summarize_pooled(&names, &[chain.clone()], 20).unwrap(), single);
        let two = summarize_pooled(&names, &[chain.clone(), chain], 20).unwrap();
        assert_eq!(two[0].mean, single[0].mean);
        assert_eq!(two[0].iact, single[0].iact);
        assert!((two[0].ess - 2.0 * single[0].ess).abs() < 1e-9);
    }

    #[test]
    fn learner_trace_columns() {
        let recs = vec![SearchRecord { iter: 1, theta: vec![0.5, 2.0], log_z: -3.25, step: 0.5, accepted: true }];
        let mut buf = Vec::new();
        write_learner_trace_csv(&["q".into(), "r".into()], &recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,q,r,log_z,step,accepted\n1,0.5,2.0,-3.25,0.5,true\n");
    }

    #[test]
    fn tank_series_roundtrip_and_errors() {
        let d = Dataset::scalar(&[1.0, 2.5], &[3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tank_series(&d, &mut buf).unwrap();
        assert_eq!(read_tank_series(&buf[..]).unwrap(), d);
        assert!(read_tank_series("u,y\n".as_bytes()).is_err());
        assert!(matches!(
            read_tank_series("u,y\n1,2\n1,x\n".as_bytes()),
            Err(Error::Parse { row: 2, ref column, .. }) if column == "y"
        ));
        assert!(read_tank_series("u,z\n1,2\n".as_bytes()).is_err());
    }
}
