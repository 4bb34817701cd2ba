//! Reading finished runs back: comparison tables and per-record inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::Value;
use textalign::eval::{compare_configs, render_csv, Comparison, RobustnessReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Md,
    Json,
}

/// Finished reports of a run, sorted by file name.
pub fn load_reports(run_dir: &Path) -> anyhow::Result<Vec<RobustnessReport>> {
    let dir = run_dir.join("reports");
    if !dir.is_dir() {
        bail!("{} is not a run directory", run_dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// One comparison per sweep, pipelines in report order.
pub fn comparisons(reports: &[RobustnessReport]) -> anyhow::Result<Vec<Comparison>> {
    let mut by_sweep: BTreeMap<&str, Vec<RobustnessReport>> = BTreeMap::new();
    for r in reports {
        by_sweep.entry(&r.sweep).or_default().push(r.clone());
    }
    by_sweep
        .into_iter()
        .map(|(name, group)| compare_configs(&group).with_context(|| format!("comparing sweep `{name}`")))
        .collect()
}

pub fn render_markdown(reports: &[RobustnessReport]) -> anyhow::Result<String> {
    let mut out = String::from("# Robustness summary\n\n");
    if let Some(first) = reports.first() {
        let _ = writeln!(out, "Downstream model: {}\n", first.downstream_model);
    }
    let surrogate: Vec<String> = reports.iter().filter(|r| r.surrogate_image).map(RobustnessReport::label).collect();
    if !surrogate.is_empty() {
        let _ =
            writeln!(out, "Image noise was simulated by degrading precomputed captions in: {}\n", surrogate.join(", "));
    }
    for c in comparisons(reports)? {
        out.push_str(&c.to_markdown());
        out.push('\n');
    }
    Ok(out)
}

pub fn render(run_dir: &Path, format: Format) -> anyhow::Result<String> {
    let reports = load_reports(run_dir)?;
    if reports.is_empty() {
        bail!("{} has no finished reports", run_dir.display());
    }
    Ok(match format {
        Format::Csv => render_csv(&reports),
        Format::Md => render_markdown(&reports)?,
        Format::Json => serde_json::to_string_pretty(&comparisons(&reports)?)? + "\n",
    })
}

/// Transcript entries for `record_id`, optionally limited to one sweep.
pub fn transcript_entries(run_dir: &Path, record_id: &str, sweep: Option<&str>) -> anyhow::Result<Vec<Value>> {
    let dir = run_dir.join("transcripts");
    if !dir.is_dir() {
        bail!("{} has no transcripts", run_dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<Result<Vec<_>, _>>()?;
    paths.sort();
    let mut out = Vec::new();
    for path in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "jsonl")) {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            // Cheap prefilter before parsing.
            if !line.contains(record_id) {
                continue;
            }
            let v: Value = serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
            if v["record_id"] == record_id && sweep.is_none_or(|s| v["sweep"] == s) {
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn section(out: &mut String, title: &str, body: &str) {
    let _ = writeln!(out, "-- {title} --");
    out.push_str(if body.is_empty() { "(empty)" } else { body });
    out.push('\n');
}

/// Human-readable dump of every stage a record went through.
pub fn inspect(run_dir: &Path, record_id: &str, sweep: Option<&str>) -> anyhow::Result<String> {
    let entries = transcript_entries(run_dir, record_id, sweep)?;
    if entries.is_empty() {
        bail!("record `{record_id}` not found in {}", run_dir.display());
    }
    let mut out = String::new();
    for e in &entries {
        let l = &e["levels"];
        let _ = writeln!(
            out,
            "== {} / {} | level {} (image={}, text={}, table={}) | repetition {} | label {} predicted {} ==",
            e["sweep"].as_str().unwrap_or_default(),
            e["pipeline"].as_str().unwrap_or_default(),
            e["level_index"],
            l["image"],
            l["text"],
            l["table"],
            e["repetition"],
            e["label"],
            e["predicted"],
        );
        let s = &e["sections"];
        section(&mut out, "table", s["table_text"].as_str().unwrap_or_default());
        section(&mut out, "image", s["image_text"].as_str().unwrap_or_default());
        section(&mut out, "text", s["raw_text"].as_str().unwrap_or_default());
        for stage in ["transform", "summary", "reasoning"] {
            if let Some(text) = e["stage_outputs"][stage].as_str() {
                section(&mut out, stage, text);
            }
        }
        section(&mut out, "final text", e["final_text"].as_str().unwrap_or_default());
        for x in e["exchanges"].as_array().into_iter().flatten() {
            let _ = writeln!(out, "-- exchange {} --", x["digest"].as_str().unwrap_or_default());
            let _ = writeln!(out, "> {}", x["user"].as_str().unwrap_or_default().replace('\n', "\n> "));
            let _ = writeln!(out, "{}", x["response"].as_str().unwrap_or_default());
        }
        out.push('\n');
    }
    Ok(out)
}
