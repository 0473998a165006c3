//! Mask trace records for attention inspection.
//!
//! One JSON object per line. Head records carry the full pre- and
//! post-mask weights of one head at one site; summary records carry the
//! mask density of one site aggregated over heads.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::SiteKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub stage: usize,
    /// 1-based encoder layer, 0 for the fusion block.
    pub layer: usize,
    pub site: SiteKind,
    pub head: usize,
    pub d_f: f64,
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub mask: Vec<Vec<bool>>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub stage: usize,
    pub layer: usize,
    pub site: SiteKind,
    pub d_f: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Head(HeadTrace),
    Summary(SiteSummary),
}

/// Appends one summary per site, averaging head densities.
pub fn with_summaries(records: Vec<TraceRecord>) -> Vec<TraceRecord> {
    let mut out = Vec::with_capacity(records.len() + records.len() / 2);
    let mut group: Vec<&HeadTrace> = Vec::new();
    let mut summaries = Vec::new();
    let flush = |group: &mut Vec<&HeadTrace>, summaries: &mut Vec<TraceRecord>| {
        if let Some(first) = group.first() {
            let density = group.iter().map(|h| h.density).sum::<f64>() / group.len() as f64;
            summaries.push(TraceRecord::Summary(SiteSummary {
                stage: first.stage,
                layer: first.layer,
                site: first.site,
                d_f: first.d_f,
                density,
            }));
        }
        group.clear();
    };
    for r in &records {
        if let TraceRecord::Head(h) = r {
            if h.head == 0 {
                flush(&mut group, &mut summaries);
            }
            group.push(h);
        }
    }
    flush(&mut group, &mut summaries);
    out.extend(records.iter().cloned());
    out.extend(summaries);
    out
}

pub fn write_records<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument {
            op: "trace",
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidArgument {
            op: "trace",
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
