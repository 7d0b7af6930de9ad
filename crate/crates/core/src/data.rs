//! Time-indexed input/output records.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs `u_t` and possibly-missing observations `y_t` for `t = 0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    observations: Vec<Option<Vec<f64>>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, observations: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::input("dataset has no time steps"));
        }
        if inputs.len() != observations.len() {
            return Err(Error::input(format!(
                "{} inputs but {} observation slots",
                inputs.len(),
                observations.len()
            )));
        }
        if observations.iter().all(Option::is_none) {
            return Err(Error::input("dataset has no observed step"));
        }
        Ok(Self {
            inputs,
            observations,
        })
    }

    /// Dataset without inputs.
    pub fn from_observations(observations: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let inputs = vec![Vec::new(); observations.len()];
        Self::new(inputs, observations)
    }

    /// Fully observed scalar series with scalar inputs.
    pub fn scalar(u: &[f64], y: &[f64]) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::input("u and y lengths differ"));
        }
        Self::new(
            u.iter().map(|&v| vec![v]).collect(),
            y.iter().map(|&v| Some(vec![v])).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t]
    }

    pub fn observation(&self, t: usize) -> Option<&[f64]> {
        self.observations[t].as_deref()
    }

    pub fn is_observed(&self, t: usize) -> bool {
        self.observations[t].is_some()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn observations(&self) -> &[Option<Vec<f64>>] {
        &self.observations
    }

    pub fn n_observed(&self) -> usize {
        self.observations.iter().filter(|o| o.is_some()).count()
    }

    /// Observation mask, `true` where `y_t` is present.
    pub fn mask(&self) -> Vec<bool> {
        self.observations.iter().map(Option::is_some).collect()
    }

    /// Observed scalar values in time order (first component).
    pub fn observed_values(&self) -> Vec<f64> {
        self.observations
            .iter()
            .flatten()
            .map(|y| y[0])
            .collect()
    }

    /// Steps `range`, keeping the no-empty-observation rule.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::input("slice outside dataset"));
        }
        Self::new(
            self.inputs[range.clone()].to_vec(),
            self.observations[range].to_vec(),
        )
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f)
    }

    /// Parse the `t,u,y` format. Vector-valued series use `u1,u2,..` and
    /// `y1,y2,..` columns; an empty `y` field marks a missing observation and
    /// an empty `u` field an empty input.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut u_cols = Vec::new();
        let mut y_cols = Vec::new();
        let mut t_col = None;
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if h == "t" {
                t_col = Some(i);
            } else if h.starts_with('u') {
                u_cols.push(i);
            } else if h.starts_with('y') {
                y_cols.push(i);
            } else {
                return Err(Error::Parse {
                    row: 0,
                    column: h.to_string(),
                    message: "unknown column".into(),
                });
            }
        }
        let t_col = t_col.ok_or_else(|| Error::Parse {
            row: 0,
            column: "t".into(),
            message: "missing column".into(),
        })?;
        if y_cols.is_empty() {
            return Err(Error::Parse {
                row: 0,
                column: "y".into(),
                message: "missing column".into(),
            });
        }
        let mut inputs = Vec::new();
        let mut observations = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = r + 1;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let t: usize = field(t_col).parse().map_err(|_| Error::Parse {
                row,
                column: "t".into(),
                message: format!("not an index: {:?}", field(t_col)),
            })?;
            if t != r {
                return Err(Error::Parse {
                    row,
                    column: "t".into(),
                    message: format!("expected t = {r}, found {t}"),
                });
            }
            let parse_cols = |cols: &[usize]| -> Result<Option<Vec<f64>>> {
                let raw: Vec<&str> = cols.iter().map(|&i| field(i)).collect();
                if raw.iter().all(|s| s.is_empty()) {
                    return Ok(None);
                }
                raw.iter()
                    .zip(cols)
                    .map(|(s, &i)| {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| Error::Parse {
                                row,
                                column: headers[i].to_string(),
                                message: format!("not a finite number: {s:?}"),
                            })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            };
            inputs.push(parse_cols(&u_cols)?.unwrap_or_default());
            observations.push(parse_cols(&y_cols)?);
        }
        if observations.is_empty() {
            return Err(Error::Parse {
                row: 1,
                column: "t".into(),
                message: "no data rows".into(),
            });
        }
        Self::new(inputs, observations)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let du = self.inputs.iter().map(Vec::len).max().unwrap_or(0);
        let dy = self.observations.iter().flatten().map(Vec::len).max().unwrap_or(1);
        let names = |p: &str, d: usize| -> Vec<String> {
            if d == 1 {
                vec![p.to_string()]
            } else {
                (1..=d).map(|i| format!("{p}{i}")).collect()
            }
        };
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(names("u", du.max(1)));
        header.extend(names("y", dy));
        wtr.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![t.to_string()];
            let u = &self.inputs[t];
            for i in 0..du.max(1) {
                rec.push(u.get(i).map(|v| format!("{v:?}")).unwrap_or_default());
            }
            match &self.observations[t] {
                Some(y) => rec.extend(y.iter().map(|v| format!("{v:?}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), dy)),
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
