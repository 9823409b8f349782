//! FID result tables: CSV persistence, a text summary and an SVG curve plot.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::atomic_write;

/// One row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRecord {
    pub embedding_source: String,
    pub decoder_id: String,
    pub alpha: f64,
    pub fid: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn fid_csv_bytes(rows: &[FidRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_fid_csv(path: &Path, rows: &[FidRecord]) -> Result<()> {
    atomic_write(path, &fid_csv_bytes(rows)?)
}

pub fn read_fid_csv(path: &Path) -> Result<Vec<FidRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn curves(rows: &[FidRecord]) -> BTreeMap<(String, String), Vec<(f64, f64)>> {
    let mut m: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        m.entry((r.embedding_source.clone(), r.decoder_id.clone())).or_default().push((r.alpha, r.fid));
    }
    m.values_mut().for_each(|v| v.sort_by(|a, b| a.0.total_cmp(&b.0)));
    m
}

/// Markdown table with one row per curve, one column per α, plus the peak-to-endpoint ratio.
pub fn summary_table(rows: &[FidRecord]) -> String {
    let curves = curves(rows);
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut out = String::from("| source | decoder |");
    alphas.iter().for_each(|a| out.push_str(&format!(" α={a} |")));
    out.push_str(" peak/endpoint |\n|---|---|");
    alphas.iter().for_each(|_| out.push_str("---|"));
    out.push_str("---|\n");
    for ((source, id), pts) in &curves {
        out.push_str(&format!("| {source} | {id} |"));
        for a in &alphas {
            match pts.iter().find(|p| p.0 == *a) {
                Some(p) => out.push_str(&format!(" {:.3} |", p.1)),
                None => out.push_str(" |"),
            }
        }
        let ratio = match (pts.first(), pts.iter().max_by(|a, b| a.1.total_cmp(&b.1))) {
            (Some(lo), Some(hi)) if pts.len() > 1 && lo.1 > 0.0 => format!(" {:.2} |", hi.1 / lo.1),
            _ => " |".into(),
        };
        out.push_str(&ratio);
        out.push('\n');
    }
    out
}

/// FID against α, one line per (source, decoder).
pub fn curve_svg(rows: &[FidRecord]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("curve_svg", "no results to plot"));
    }
    let curves = curves(rows);
    let (amin, amax) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.alpha), hi.max(r.alpha)));
    let fmax = rows.iter().map(|r| r.fid).fold(0.0, f64::max);
    let span = if amax > amin { amax - amin } else { 1.0 };
    let plot_err = |e: String| Error::invalid("curve_svg", e);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .caption("FID of decoded interpolations", ("sans-serif", 20))
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(amin - 0.02 * span..amax + 0.02 * span, 0.0..fmax * 1.1 + 1e-9)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("mixing coefficient")
            .y_desc("FID")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (k, ((source, id), pts)) in curves.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(format!("{source} ({id})"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_err(e.to_string()))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperLeft)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<FidRecord> {
        let mut v = Vec::new();
        for (src, base) in [("fisher", 1.0), ("activation", 2.0)] {
            for (k, a) in [0.0, 0.25, 0.5].into_iter().enumerate() {
                v.push(FidRecord {
                    embedding_source: src.into(),
                    decoder_id: "abc".into(),
                    alpha: a,
                    fid: base * (1.0 + k as f64),
                    n: 10,
                    seed: 3,
                });
            }
        }
        v
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fid.csv");
        write_fid_csv(&p, &rows()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("embedding_source,decoder_id,alpha,fid,n,seed\n"));
        assert_eq!(read_fid_csv(&p).unwrap(), rows());
    }

    #[test]
    fn table_and_plot_mention_every_curve() {
        let t = summary_table(&rows());
        assert!(t.contains("| activation | abc | 2.000 | 4.000 | 6.000 | 3.00 |"), "{t}");
        let svg = curve_svg(&rows()).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("fisher (abc)"));
    }
}
