//! Per-iteration records, run summaries and their aggregation over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "iteration,objective,data_term,tv,psnr";
pub const SUMMARY_HEADER: &str = "Final,Max,MaxIteration,Init,MaxMinusFinal,FinalMinusInit";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub data_term: f64,
    pub tv: f64,
    /// Absent when no ground truth is known.
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
}

impl RunMetrics {
    /// Appends a record; iterations must strictly increase.
    pub fn push(&mut self, record: IterationRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::invalid(format!(
                    "iteration {} recorded after {}",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.records {
            let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{psnr}", r.iteration, r.objective, r.data_term, r.tv);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("metrics CSV", d);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(bad(format!("expected header {METRICS_HEADER:?}")));
        }
        let mut m = RunMetrics::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let [it, obj, data, tv, psnr] = f.as_slice() else {
                return Err(bad(format!("row {}: expected 5 fields", n + 1)));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", n + 1)));
            m.push(IterationRecord {
                iteration: it.parse().map_err(|_| bad(format!("row {}: bad iteration", n + 1)))?,
                objective: num(obj)?,
                data_term: num(data)?,
                tv: num(tv)?,
                psnr: if psnr.is_empty() { None } else { Some(num(psnr)?) },
            })
            .map_err(|e| bad(e.to_string()))?;
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// PSNR summary of one run; `final_psnr` is the last iterate, never the best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub final_psnr: f64,
    pub max_psnr: f64,
    pub max_iteration: usize,
    pub init_psnr: f64,
}

impl Summary {
    pub fn max_minus_final(&self) -> f64 {
        self.max_psnr - self.final_psnr
    }

    pub fn final_minus_init(&self) -> f64 {
        self.final_psnr - self.init_psnr
    }

    fn columns(&self) -> [f64; 6] {
        [
            self.final_psnr,
            self.max_psnr,
            self.max_iteration as f64,
            self.init_psnr,
            self.max_minus_final(),
            self.final_minus_init(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let c = self.columns();
        format!(
            "{SUMMARY_HEADER}\n{},{},{},{},{},{}\n",
            c[0], c[1], self.max_iteration, c[3], c[4], c[5]
        )
    }
}

/// Final, Max (first argmax on ties) and Init PSNR of a run.
pub fn summarize(metrics: &RunMetrics) -> Result<Summary> {
    let psnrs: Vec<(usize, f64)> = metrics
        .records
        .iter()
        .map(|r| r.psnr.map(|p| (r.iteration, p)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::invalid("summary needs PSNR on every record"))?;
    let (&(_, init_psnr), &(_, final_psnr)) = match (psnrs.first(), psnrs.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("summary of an empty run")),
    };
    let (max_iteration, max_psnr) = psnrs
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(Summary {
        final_psnr,
        max_psnr,
        max_iteration,
        init_psnr,
    })
}

/// Column-wise mean and population standard deviation over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    /// In [`SUMMARY_HEADER`] order.
    pub mean: [f64; 6],
    pub sd: [f64; 6],
}

impl Aggregate {
    pub fn max_minus_final(&self) -> (f64, f64) {
        (self.mean[4], self.sd[4])
    }

    pub fn final_psnr(&self) -> (f64, f64) {
        (self.mean[0], self.sd[0])
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(summaries: &[Summary]) -> Result<Aggregate> {
    if summaries.is_empty() {
        return Err(Error::invalid("aggregate of no runs"));
    }
    let mut mean = [0.0; 6];
    let mut sd = [0.0; 6];
    for k in 0..6 {
        let col: Vec<f64> = summaries.iter().map(|s| s.columns()[k]).collect();
        (mean[k], sd[k]) = mean_sd(&col);
    }
    Ok(Aggregate {
        runs: summaries.len(),
        mean,
        sd,
    })
}

/// Mean and population SD of PSNR and TV at one iteration across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub mean_psnr: f64,
    pub sd_psnr: f64,
    pub mean_tv: f64,
    pub sd_tv: f64,
}

/// Aggregates runs recorded on the same iteration grid.
pub fn aggregate_traces(runs: &[RunMetrics]) -> Result<Vec<TracePoint>> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to aggregate"))?;
    for (k, r) in runs.iter().enumerate() {
        let same = r.len() == first.len()
            && r.records.iter().zip(&first.records).all(|(a, b)| a.iteration == b.iteration);
        if !same {
            return Err(Error::invalid(format!("run {k} uses a different iteration grid")));
        }
    }
    (0..first.len())
        .map(|i| {
            let psnr: Vec<f64> = runs
                .iter()
                .map(|r| r.records[i].psnr.ok_or_else(|| Error::invalid("trace without PSNR")))
                .collect::<Result<_>>()?;
            let tv: Vec<f64> = runs.iter().map(|r| r.records[i].tv).collect();
            let (mean_psnr, sd_psnr) = mean_sd(&psnr);
            let (mean_tv, sd_tv) = mean_sd(&tv);
            Ok(TracePoint {
                iteration: first.records[i].iteration,
                mean_psnr,
                sd_psnr,
                mean_tv,
                sd_tv,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(psnr: &[f64]) -> RunMetrics {
        let mut m = RunMetrics::default();
        for (i, &p) in psnr.iter().enumerate() {
            m.push(IterationRecord {
                iteration: i,
                objective: 1.0 / (i + 1) as f64,
                data_term: 0.5,
                tv: 2.0 + i as f64,
                psnr: Some(p),
            })
            .unwrap();
        }
        m
    }

    #[test]
    fn summary_definitions() {
        let s = summarize(&run(&[10.0, 30.0, 20.0])).unwrap();
        assert_eq!((s.final_psnr, s.max_psnr, s.max_iteration, s.init_psnr), (20.0, 30.0, 1, 10.0));
        assert_eq!(s.max_minus_final(), 10.0);
        assert_eq!(s.final_minus_init(), 10.0);
        assert_eq!(summarize(&run(&[5.0; 4])).unwrap().max_minus_final(), 0.0);
        assert!(summarize(&RunMetrics::default()).is_err());
        assert!(s.to_csv().starts_with("Final,Max,MaxIteration,Init"));
    }

    #[test]
    fn records_must_increase() {
        let mut m = run(&[1.0, 2.0]);
        let r = m.records[1];
        assert!(m.push(r).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut m = run(&[10.0, 30.0 + 1e-13, 20.0]);
        m.records[0].psnr = None;
        let text = m.to_csv();
        assert!(text.starts_with("iteration,objective,data_term,tv,psnr\n"));
        assert_eq!(RunMetrics::from_csv(&text).unwrap(), m);
        assert!(RunMetrics::from_csv("a,b\n").is_err());
    }

    #[test]
    fn aggregation() {
        let runs = [run(&[10.0, 30.0, 20.0]), run(&[12.0, 28.0, 24.0]), run(&[8.0, 26.0, 22.0])];
        let sums: Vec<Summary> = runs.iter().map(|r| summarize(r).unwrap()).collect();
        let agg = aggregate(&sums).unwrap();
        assert_eq!(agg.mean[0], 22.0);
        assert!((agg.sd[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((agg.mean[4] - 6.0).abs() < 1e-12);
        let single = aggregate(&sums[..1]).unwrap();
        assert!(single.sd.iter().all(|&v| v == 0.0));
        let same = aggregate(&[sums[0]; 3]).unwrap();
        assert_eq!(same.mean, single.mean);
        assert!(same.sd.iter().all(|&v| v == 0.0));
        assert!(aggregate(&[]).is_err());

        let t = aggregate_traces(&runs).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[1].mean_psnr, 28.0);
        assert_eq!(t[0].sd_tv, 0.0);
        assert!(aggregate_traces(&[run(&[1.0]), run(&[1.0, 2.0])]).is_err());
    }
}
