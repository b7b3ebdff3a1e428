//! Tables, plots and contact sheets derived from run artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use plotters::prelude::*;
use serde::Serialize;
use shadowdef_core::metrics::{mean_std, ImageMetrics};
use shadowdef_core::{Error, Result};

use crate::experiment::{load_artifacts, AttackRecord, ImageRecord, RunArtifacts, RunStatus};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const SCOPES: [&str; 2] = ["whole", "target"];
pub const METRICS: [&str; 4] = ["mse", "psnr", "ssim", "perceptual"];
const CELL_SCALE: u32 = 4;
const PAD: u32 = 2;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

fn metric_value(m: &ImageMetrics, metric: &str) -> Option<f64> {
    match metric {
        "mse" => Some(m.mse),
        "psnr" => Some(m.psnr),
        "ssim" => Some(m.ssim),
        "perceptual" => m.perceptual,
        _ => None,
    }
}

/// One aggregate cell: mean over all images of the sampled rounds, and the
/// standard deviation of the per-round means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageRow {
    pub method: String,
    pub attack: String,
    pub scope: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub rounds: usize,
}

pub fn attack_names(art: &RunArtifacts) -> Vec<String> {
    let mut seen = Vec::new();
    for a in &art.config.attacks {
        let n = a.name().to_string();
        if !seen.contains(&n) {
            seen.push(n);
        }
    }
    seen
}

pub fn leakage_rows(art: &RunArtifacts) -> Vec<LeakageRow> {
    let rounds: BTreeSet<usize> = art.config.resolved().metric_rounds.unwrap_or_default().into_iter().collect();
    let method = art.manifest.method.clone();
    let mut rows = Vec::new();
    for attack in attack_names(art) {
        let imgs: Vec<&ImageRecord> = art
            .records
            .images
            .iter()
            .filter(|r| r.attack == attack && rounds.contains(&r.round))
            .collect();
        for scope in SCOPES {
            for metric in METRICS {
                let value = |r: &ImageRecord| {
                    let m = if scope == "whole" { &r.whole } else { &r.target };
                    metric_value(m, metric)
                };
                let all: Vec<f64> = imgs.iter().filter_map(|r| value(r)).collect();
                let per_round: Vec<f64> = rounds
                    .iter()
                    .filter_map(|&rd| {
                        let v: Vec<f64> = imgs.iter().filter(|r| r.round == rd).filter_map(|r| value(r)).collect();
                        (!v.is_empty()).then(|| mean_std(&v).0)
                    })
                    .collect();
                let complete = !all.is_empty() && all.len() == imgs.len();
                rows.push(LeakageRow {
                    method: method.clone(),
                    attack: attack.clone(),
                    scope: scope.into(),
                    metric: metric.into(),
                    mean: complete.then(|| mean_std(&all).0),
                    std: complete.then(|| mean_std(&per_round).1),
                    rounds: per_round.len(),
                });
            }
        }
    }
    rows
}

/// Mean of one metric over the images of an attack at one round.
pub fn round_mean(art: &RunArtifacts, attack: &str, round: usize, scope: &str, metric: &str) -> Option<f64> {
    let v: Vec<f64> = art
        .records
        .images
        .iter()
        .filter(|r| r.attack == attack && r.round == round)
        .filter_map(|r| metric_value(if scope == "whole" { &r.whole } else { &r.target }, metric))
        .collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

fn write_trace_csv(art: &RunArtifacts, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["round", "accuracy", "macro_f1", "digest"]).map_err(&e)?;
    for r in &art.trace.records {
        w.write_record([r.round.to_string(), num(Some(r.accuracy)), num(Some(r.macro_f1)), r.digest.clone()])
            .map_err(&e)?;
    }
    w.flush().map_err(|x| Error::io(path, x))
}

fn write_leakage_csv(rows: &[LeakageRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["method", "attack", "scope", "metric", "mean", "std", "rounds"]).map_err(&e)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.attack.clone(),
            r.scope.clone(),
            r.metric.clone(),
            num(r.mean),
            num(r.std),
            r.rounds.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|x| Error::io(path, x))
}

fn write_images_csv(art: &RunArtifacts, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["attack", "round", "client", "slot", "matched", "scope", "mse", "psnr", "ssim", "perceptual", "rdlv"])
        .map_err(&e)?;
    for r in &art.records.images {
        for (scope, m) in [("whole", &r.whole), ("target", &r.target)] {
            w.write_record([
                r.attack.clone(),
                r.round.to_string(),
                r.client.to_string(),
                r.slot.to_string(),
                r.matched.to_string(),
                scope.to_string(),
                num(Some(m.mse)),
                num(Some(m.psnr)),
                num(Some(m.ssim)),
                num(m.perceptual),
                num(r.rdlv),
            ])
            .map_err(&e)?;
        }
    }
    w.flush().map_err(|x| Error::io(path, x))
}

fn write_rdlv_csv(art: &RunArtifacts, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["attack", "round", "client", "rdlv"]).map_err(&e)?;
    for r in &art.records.rdlv {
        w.write_record([r.attack.clone(), r.round.to_string(), r.client.to_string(), num(r.rdlv)])
            .map_err(&e)?;
    }
    w.flush().map_err(|x| Error::io(path, x))
}

fn write_iip_csv(art: &RunArtifacts, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["attack", "round", "k", "iip"]).map_err(&e)?;
    for r in &art.records.iip {
        w.write_record([r.attack.clone(), r.round.to_string(), r.k.to_string(), num(Some(r.iip))])
            .map_err(&e)?;
    }
    w.flush().map_err(|x| Error::io(path, x))
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Data(format!("plot {}: {e}", path.display()))
}

/// Line plot of named `(x, y)` series.
pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    ensure_parent(path)?;
    let e = plot_err(path);
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc(y_label)
        .draw()
        .map_err(&e)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(&e)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(s.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(&e)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&e)?;
    root.present().map_err(&e)?;
    Ok(())
}

fn to_rgb_pixel(img: &Array3<f64>, i: usize, j: usize) -> Rgb<u8> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if img.shape()[0] == 1 {
        let v = q(img[[0, i, j]]);
        Rgb([v, v, v])
    } else {
        Rgb([q(img[[0, i, j]]), q(img[[1, i, j]]), q(img[[2, i, j]])])
    }
}

pub fn image_to_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (_, h, w) = img.dim();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| to_rgb_pixel(img, y as usize, x as usize));
    out.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Grid with one row per round and one column per client, each cell the
/// slot-0 reconstruction of that (round, client).
pub fn contact_sheet(records: &[&AttackRecord]) -> Option<(RgbImage, usize, usize)> {
    let rounds: Vec<usize> = records.iter().map(|r| r.result.round).collect::<BTreeSet<_>>().into_iter().collect();
    let clients: Vec<usize> = records.iter().map(|r| r.result.client_id).collect::<BTreeSet<_>>().into_iter().collect();
    let first = records.iter().find_map(|r| r.result.reconstructions.first())?;
    let (_, h, w) = first.dim();
    let (cw, ch) = (w as u32 * CELL_SCALE, h as u32 * CELL_SCALE);
    let width = clients.len() as u32 * (cw + PAD) + PAD;
    let height = rounds.len() as u32 * (ch + PAD) + PAD;
    let mut sheet = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for r in records {
        let Some(img) = r.result.reconstructions.first() else { continue };
        let row = rounds.iter().position(|&x| x == r.result.round).unwrap() as u32;
        let col = clients.iter().position(|&x| x == r.result.client_id).unwrap() as u32;
        let (ox, oy) = (PAD + col * (cw + PAD), PAD + row * (ch + PAD));
        for y in 0..ch {
            for x in 0..cw {
                let p = to_rgb_pixel(img, (y / CELL_SCALE) as usize, (x / CELL_SCALE) as usize);
                sheet.put_pixel(ox + x, oy + y, p);
            }
        }
    }
    Some((sheet, rounds.len(), clients.len()))
}

pub fn write_reconstructions(dir: &Path, records: &[AttackRecord]) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for r in records {
        for (slot, img) in r.result.reconstructions.iter().enumerate() {
            let rel = format!("{}/{}_{}_{}.png", r.attack, r.result.round, r.result.client_id, slot);
            image_to_png(img, &dir.join(&rel))?;
            files.push(rel);
        }
    }
    Ok(files)
}

/// Writes every derived file of a run and returns their paths relative to
/// the run directory. Missing inputs are noted, not fatal.
pub fn emit_report(art: &RunArtifacts) -> Result<Vec<String>> {
    let dir = &art.dir;
    let mut files = Vec::new();
    let mut gaps = Vec::new();

    write_trace_csv(art, &dir.join("trace/trace.csv"))?;
    files.push("trace/trace.csv".to_string());
    let f1: Vec<(f64, f64)> = art.trace.records.iter().map(|r| (r.round as f64, r.macro_f1)).collect();
    line_plot(&dir.join("plots/f1.svg"), "macro-F1 during training", "macro-F1", &[(art.manifest.method.clone(), f1)])?;
    files.push("plots/f1.svg".to_string());
    if art.trace.records.is_empty() {
        gaps.push("no training rounds were recorded".to_string());
    }

    let attacks = attack_names(art);
    if !attacks.is_empty() {
        if art.records.images.is_empty() {
            gaps.push("no attack metrics were recorded".to_string());
        }
        let rows = leakage_rows(art);
        if rows.iter().any(|r| r.mean.is_none()) {
            gaps.push("some leakage cells have no values".to_string());
        }
        write_leakage_csv(&rows, &dir.join("metrics/leakage.csv"))?;
        write_images_csv(art, &dir.join("metrics/images.csv"))?;
        write_rdlv_csv(art, &dir.join("metrics/rdlv.csv"))?;
        write_iip_csv(art, &dir.join("metrics/iip.csv"))?;
        let schema = BTreeMap::from([
            ("version", serde_json::json!(CSV_SCHEMA_VERSION)),
            ("leakage.csv", serde_json::json!(["method", "attack", "scope", "metric", "mean", "std", "rounds"])),
            (
                "images.csv",
                serde_json::json!(["attack", "round", "client", "slot", "matched", "scope", "mse", "psnr", "ssim", "perceptual", "rdlv"]),
            ),
            ("rdlv.csv", serde_json::json!(["attack", "round", "client", "rdlv"])),
            ("iip.csv", serde_json::json!(["attack", "round", "k", "iip"])),
        ]);
        write_json(&dir.join("metrics/schema.json"), &schema)?;
        files.extend(
            ["leakage.csv", "images.csv", "rdlv.csv", "iip.csv", "schema.json"]
                .iter()
                .map(|f| format!("metrics/{f}")),
        );
        files.extend(write_reconstructions(&dir.join("recon"), &art.attacks)?.into_iter().map(|f| format!("recon/{f}")));

        for attack in &attacks {
            let mut per_client: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
            for r in art.records.rdlv.iter().filter(|r| &r.attack == attack) {
                if let Some(v) = r.rdlv {
                    per_client.entry(r.client).or_default().push((r.round as f64, v));
                }
            }
            let series: Vec<(String, Vec<(f64, f64)>)> =
                per_client.into_iter().map(|(c, s)| (format!("client {c}"), s)).collect();
            let rel = format!("plots/rdlv_{attack}.svg");
            line_plot(&dir.join(&rel), &format!("RDLV ({attack})"), "RDLV", &series)?;
            files.push(rel);

            let recs: Vec<&AttackRecord> = art.attacks.iter().filter(|r| &r.attack == attack).collect();
            if let Some((sheet, _, _)) = contact_sheet(&recs) {
                let rel = format!("plots/contact_{attack}.png");
                sheet
                    .save(dir.join(&rel))
                    .map_err(|e| Error::Data(format!("{rel}: {e}")))?;
                files.push(rel);
            } else {
                gaps.push(format!("no reconstructions for {attack}"));
            }
        }
    }
    if art.manifest.status != RunStatus::Complete {
        gaps.push(format!(
            "run status {:?}{}",
            art.manifest.status,
            art.manifest.failure.as_ref().map(|f| format!(": {f}")).unwrap_or_default()
        ));
    }
    if !gaps.is_empty() {
        for g in &gaps {
            log::warn!("report gap: {g}");
        }
        let p = dir.join("gaps.txt");
        fs::write(&p, gaps.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
        files.push("gaps.txt".to_string());
    }
    Ok(files)
}

/// Regenerates the report of a finished or partial run directory.
pub fn report_dir(dir: &Path) -> Result<Vec<String>> {
    emit_report(&load_artifacts(dir)?)
}

/// One table over several runs: a row per (method, attack, scope) with the
/// mean and spread of every metric, plus the run's final macro-F1.
pub fn compare(dirs: &[&Path], out: &Path) -> Result<usize> {
    let runs: Vec<RunArtifacts> = dirs.iter().map(|d| load_artifacts(d)).collect::<Result<_>>()?;
    let mut w = csv_writer(out)?;
    let e = csv_err(out);
    let mut header = vec!["method".to_string(), "attack".into(), "scope".into()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    header.push("final_f1".into());
    w.write_record(&header).map_err(&e)?;
    let mut count = 0;
    for art in &runs {
        let rows = leakage_rows(art);
        if rows.is_empty() {
            log::warn!("{}: no attack metrics to compare", art.dir.display());
        }
        for attack in attack_names(art) {
            for scope in SCOPES {
                let mut rec = vec![art.manifest.method.clone(), attack.clone(), scope.to_string()];
                for metric in METRICS {
                    let cell = rows
                        .iter()
                        .find(|r| r.attack == attack && r.scope == scope && r.metric == metric);
                    rec.push(num(cell.and_then(|c| c.mean)));
                    rec.push(num(cell.and_then(|c| c.std)));
                }
                rec.push(num(art.final_f1()));
                w.write_record(&rec).map_err(&e)?;
                count += 1;
            }
        }
    }
    w.flush().map_err(|x| Error::io(out, x))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|a| {
            (
                a.manifest.method.clone(),
                a.trace.records.iter().map(|r| (r.round as f64, r.macro_f1)).collect(),
            )
        })
        .collect();
    line_plot(&out.with_extension("svg"), "macro-F1 during training", "macro-F1", &series)?;
    Ok(count)
}
