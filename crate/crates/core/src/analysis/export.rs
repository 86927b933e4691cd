//! Plot-ready CSV output for statistics, heatmaps, and probe accuracy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::ProbeResult;
use super::stats::{depth_concentration, CorrMap, NeuronMap, NmdMap};
use crate::capture::Fingerprint;
use crate::error::{Error, Result};
use crate::model::write_atomic;

/// Fraction of neurons counted by the depth-concentration summary.
pub const DEPTH_TOP_FRACTION: f64 = 0.05;

#[derive(Serialize, Deserialize)]
struct StatsHeader {
    n_layers: usize,
    width: usize,
    pair_count: usize,
    fingerprint: Fingerprint,
}

/// JSON header line, then CSV `layer,neuron,nmd,rho`.
pub fn stats_to_string(nmd: &NmdMap, corr: &CorrMap) -> Result<String> {
    if nmd.fingerprint != corr.fingerprint || nmd.values.len() != corr.values.len() {
        return Err(Error::FingerprintMismatch("NMD and correlation maps come from different datasets".into()));
    }
    let header = StatsHeader {
        n_layers: nmd.n_layers,
        width: nmd.width,
        pair_count: nmd.pair_count,
        fingerprint: nmd.fingerprint.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push_str("\nlayer,neuron,nmd,rho\n");
    for l in 0..nmd.n_layers {
        for i in 0..nmd.width {
            writeln!(out, "{l},{i},{},{}", nmd.get(l, i), corr.get(l, i)).unwrap();
        }
    }
    Ok(out)
}

pub fn write_stats(path: &Path, nmd: &NmdMap, corr: &CorrMap) -> Result<()> {
    write_atomic(path, stats_to_string(nmd, corr)?.as_bytes())
}

pub fn read_stats(path: &Path) -> Result<(NmdMap, CorrMap)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stats(&text)
}

pub fn parse_stats(text: &str) -> Result<(NmdMap, CorrMap)> {
    let fmt = |m: String| Error::Format(format!("stats file: {m}"));
    let mut lines = text.lines();
    let header: StatsHeader = serde_json::from_str(lines.next().ok_or_else(|| fmt("empty".into()))?)
        .map_err(|e| fmt(format!("header: {e}")))?;
    if lines.next() != Some("layer,neuron,nmd,rho") {
        return Err(fmt("missing column header".into()));
    }
    let n = header.n_layers * header.width;
    let mut nmd = vec![0.0; n];
    let mut rho = vec![0.0; n];
    let mut seen = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse_err = || fmt(format!("bad row {line:?}"));
        if cols.len() != 4 {
            return Err(parse_err());
        }
        let l: usize = cols[0].parse().map_err(|_| parse_err())?;
        let i: usize = cols[1].parse().map_err(|_| parse_err())?;
        if l >= header.n_layers || i >= header.width {
            return Err(parse_err());
        }
        nmd[l * header.width + i] = cols[2].parse().map_err(|_| parse_err())?;
        rho[l * header.width + i] = cols[3].parse().map_err(|_| parse_err())?;
        seen += 1;
    }
    if seen != n {
        return Err(fmt(format!("{seen} rows, expected {n}")));
    }
    let make = |values| NeuronMap {
        n_layers: header.n_layers,
        width: header.width,
        pair_count: header.pair_count,
        fingerprint: header.fingerprint.clone(),
        values,
    };
    Ok((make(nmd), make(rho)))
}

/// Per layer, neurons by descending `|nmd|` (ties by index), ranks from 1,
/// followed by one summary row carrying the depth-concentration statistic.
pub fn heatmap_csv(nmd: &NmdMap) -> String {
    let mut out = String::from("layer,rank,neuron_index,abs_nmd,signed_nmd\n");
    for l in 0..nmd.n_layers {
        let row = nmd.layer(l);
        let mut order: Vec<usize> = (0..nmd.width).collect();
        order.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            writeln!(out, "{l},{},{i},{},{}", rank + 1, row[i].abs(), row[i]).unwrap();
        }
    }
    writeln!(out, "summary,top5pct_deeper_half,,{},", depth_concentration(nmd, DEPTH_TOP_FRACTION)).unwrap();
    out
}

pub fn export_heatmap(nmd: &NmdMap, path: &Path) -> Result<()> {
    write_atomic(path, heatmap_csv(nmd).as_bytes())
}

pub fn probe_report_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("layer,test_accuracy,epochs_ran\n");
    for r in results {
        writeln!(out, "{},{},{}", r.probe.layer, r.test_accuracy, r.probe.epochs_ran).unwrap();
    }
    out
}

/// Reads `layer,test_accuracy,epochs_ran` rows back.
pub fn parse_probe_report(text: &str) -> Result<Vec<(usize, f64, usize)>> {
    let mut lines = text.lines();
    if lines.next() != Some("layer,test_accuracy,epochs_ran") {
        return Err(Error::Format("probe report: missing header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("probe report: bad row {line:?}"));
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 3 {
                return Err(bad());
            }
            Ok((
                c[0].parse().map_err(|_| bad())?,
                c[1].parse().map_err(|_| bad())?,
                c[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, layers: usize, width: usize) -> NeuronMap {
        NeuronMap {
            n_layers: layers,
            width,
            pair_count: 3,
            fingerprint: Fingerprint { checkpoint_hash: "cd".repeat(32), n_layers: layers, width },
            values,
        }
    }

    #[test]
    fn stats_file_round_trips() {
        let nmd = map(vec![0.1, -2.5, 1e-17, 3.0, 0.0, -0.3], 2, 3);
        let rho = map(vec![0.5, -1.0, 0.0, 0.25, 1.0, -0.125], 2, 3);
        let text = stats_to_string(&nmd, &rho).unwrap();
        let (a, b) = parse_stats(&text).unwrap();
        assert_eq!((a, b), (nmd, rho));
    }

    #[test]
    fn heatmap_rows_and_planted_rank() {
        let mut v = vec![0.01; 4 * 5];
        v[3 * 5 + 2] = -0.9;
        let csv = heatmap_csv(&map(v, 4, 5));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 * 5 + 1);
        assert!(lines.contains(&"3,1,2,0.9,-0.9"));
        assert!(lines.last().unwrap().starts_with("summary,top5pct_deeper_half,,1,"));
    }

    #[test]
    fn all_zero_heatmap() {
        let csv = heatmap_csv(&map(vec![0.0; 8], 2, 4));
        assert!(csv.lines().skip(1).take(8).all(|l| l.ends_with(",0,0")));
        // ties resolve to the lowest layer, which is in the shallow half
        assert!(csv.lines().last().unwrap().starts_with("summary,top5pct_deeper_half,,0,"));
    }
}
