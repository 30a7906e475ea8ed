//! Report emission: summary CSV, per-setting Markdown tables, and ASR bar
//! plots, all rendered purely from the persisted per-cell results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use crate::matrix::{write_atomic, CellRecord, CellStatus, Provenance, RunManifest};

/// Marker rendered for a cell or metric that has no persisted value.
pub const ABSENT: &str = "absent";

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

struct LoadedRun {
    provenance: Provenance,
    manifest: RunManifest,
    records: BTreeMap<String, CellRecord>,
}

fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let provenance: Provenance = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join(crate::matrix::PROVENANCE_FILE))
            .with_context(|| format!("run directory {} has no provenance", run_dir.display()))?,
    )?;
    let manifest: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join(crate::matrix::MANIFEST_FILE))
            .with_context(|| format!("run directory {} has no manifest", run_dir.display()))?,
    )?;
    let mut records = BTreeMap::new();
    for cell_id in &provenance.cell_order {
        let path = run_dir.join("cells").join(cell_id).join("result.json");
        if path.exists() {
            let record: CellRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            pepper_core::model::validated(record.clone())
                .map_err(|e| anyhow::anyhow!("cell {cell_id}: {e}"))?;
            records.insert(cell_id.clone(), record);
        }
    }
    Ok(LoadedRun { provenance, manifest, records })
}

/// Emits summary.csv, tables/<setting>.md, and plots/asr_clip_<setting>.svg
/// into the run directory. Pure function of the persisted results: numbers
/// are read from result files, never recomputed.
pub fn emit(run_dir: &Path) -> Result<()> {
    let run = load_run(run_dir)?;
    emit_summary_csv(run_dir, &run)?;
    for setting in run.provenance.setting_order.clone() {
        emit_markdown_table(run_dir, &run, &setting)?;
        emit_asr_plot(run_dir, &run, &setting)?;
    }
    Ok(())
}

fn status_of(run: &LoadedRun, cell_id: &str) -> &'static str {
    match run.manifest.cells.get(cell_id) {
        Some(CellStatus::Done) if run.records.contains_key(cell_id) => "ok",
        Some(CellStatus::Failed { .. }) => "failed",
        _ => ABSENT,
    }
}

fn emit_summary_csv(run_dir: &Path, run: &LoadedRun) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "cell_id", "attack", "trigger", "setting", "defense", "n_samples", "asr_clip", "asr_gpt",
        "fid", "status",
    ])?;
    for cell_id in &run.provenance.cell_order {
        match run.records.get(cell_id) {
            Some(r) => {
                writer.write_record([
                    cell_id.as_str(),
                    r.family.as_str(),
                    r.trigger.as_str(),
                    r.setting.as_str(),
                    r.defense.as_str(),
                    &r.result.n_samples.to_string(),
                    &fmt2(r.result.asr_clip),
                    &r.result.asr_gpt.map(fmt2).unwrap_or_default(),
                    &r.result.fid.map(fmt2).unwrap_or_default(),
                    status_of(run, cell_id),
                ])?;
            }
            None => {
                let (attack, trigger, setting, defense) = split_cell_id(run, cell_id);
                writer.write_record([
                    cell_id.as_str(),
                    &attack,
                    &trigger,
                    &setting,
                    &defense,
                    "",
                    "",
                    "",
                    "",
                    status_of(run, cell_id),
                ])?;
            }
        }
    }
    let bytes = writer.into_inner().map_err(|e| anyhow::anyhow!("csv flush: {e}"))?;
    write_atomic(&run_dir.join("summary.csv"), &bytes)?;
    Ok(())
}

/// Best-effort decomposition for cells that never produced a record, using
/// the provenance ordering tables.
fn split_cell_id(run: &LoadedRun, cell_id: &str) -> (String, String, String, String) {
    let parts: Vec<&str> = cell_id.split("__").collect();
    let setting = parts.get(1).unwrap_or(&"").to_string();
    let defense = parts.get(2).unwrap_or(&"").to_string();
    let attack_slug = parts.first().unwrap_or(&"");
    for (family, trigger) in &run.provenance.attack_order {
        if *attack_slug == format!("{}-{}", family, slug_of(trigger)) {
            return (family.clone(), trigger.clone(), setting, defense);
        }
    }
    (attack_slug.to_string(), String::new(), setting, defense)
}

fn slug_of(trigger: &str) -> String {
    let mut chars = trigger.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if !c.is_ascii() => format!("u{:04x}", c as u32),
        _ => {
            let slug: String = trigger
                .to_lowercase()
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
                .collect();
            slug.trim_matches('-').to_string()
        }
    }
}

fn cell_for<'a>(
    run: &'a LoadedRun,
    family: &str,
    trigger: &str,
    setting: &str,
    defense: &str,
) -> Option<&'a CellRecord> {
    run.records.values().find(|r| {
        r.family == family && r.trigger == trigger && r.setting == setting && r.defense == defense
    })
}

fn emit_markdown_table(run_dir: &Path, run: &LoadedRun, setting: &str) -> Result<()> {
    let defenses = &run.provenance.defense_order;
    let mut md = String::new();
    writeln!(md, "# Results ({setting} prompt)")?;
    writeln!(md)?;
    writeln!(
        md,
        "Run config hash `{}`, base seed {}, {} image seed(s) per caption.",
        run.provenance.config_hash,
        run.provenance.base_seed,
        run.provenance.image_seeds.len()
    )?;
    writeln!(md)?;

    let mut header = String::from("| Attack | Trigger |");
    let mut rule = String::from("| --- | --- |");
    for metric in ["ASR_CLIP", "ASR_GPT", "FID"] {
        for defense in defenses {
            write!(header, " {metric} {defense} |")?;
            rule.push_str(" ---:|");
        }
    }
    writeln!(md, "{header}")?;
    writeln!(md, "{rule}")?;

    for (family, trigger) in &run.provenance.attack_order {
        let mut row = format!("| {family} | {trigger} |");
        for metric in ["clip", "gpt", "fid"] {
            for defense in defenses {
                let value = cell_for(run, family, trigger, setting, defense)
                    .and_then(|r| match metric {
                        "clip" => Some(fmt2(r.result.asr_clip)),
                        "gpt" => r.result.asr_gpt.map(fmt2),
                        _ => r.result.fid.map(fmt2),
                    })
                    .unwrap_or_else(|| ABSENT.to_string());
                write!(row, " {value} |")?;
            }
        }
        writeln!(md, "{row}")?;
    }
    write_atomic(&run_dir.join("tables").join(format!("{setting}.md")), md.as_bytes())?;
    Ok(())
}

/// Hand-rolled grouped bar chart of ASR_CLIP per defense.
fn emit_asr_plot(run_dir: &Path, run: &LoadedRun, setting: &str) -> Result<()> {
    let defenses = &run.provenance.defense_order;
    let attacks = &run.provenance.attack_order;
    let bar_w = 18.0;
    let group_gap = 24.0;
    let group_w = defenses.len() as f64 * bar_w + group_gap;
    let chart_h = 220.0;
    let margin_l = 46.0;
    let margin_b = 58.0;
    let width = margin_l + attacks.len() as f64 * group_w + 20.0;
    let height = chart_h + margin_b + 30.0;
    let palette = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c"];

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    )?;
    writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>")?;
    writeln!(
        svg,
        "<text x=\"{margin_l}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">ASR_CLIP by defense ({setting} prompt)</text>"
    )?;
    // Axis and gridlines.
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = 30.0 + chart_h * (1.0 - v);
        writeln!(
            svg,
            "<line x1=\"{margin_l}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            width - 10.0
        )?;
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
            margin_l - 6.0,
            y + 3.0
        )?;
    }
    for (ai, (family, trigger)) in attacks.iter().enumerate() {
        let x0 = margin_l + ai as f64 * group_w;
        for (di, defense) in defenses.iter().enumerate() {
            let value = cell_for(run, family, trigger, setting, defense)
                .map(|r| r.result.asr_clip)
                .unwrap_or(0.0);
            let h = chart_h * value;
            let x = x0 + di as f64 * bar_w;
            let y = 30.0 + chart_h - h;
            let color = palette[di % palette.len()];
            writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>",
                bar_w - 2.0
            )?;
        }
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{family} {trigger}</text>",
            x0 + (defenses.len() as f64 * bar_w) / 2.0,
            30.0 + chart_h + 14.0
        )?;
    }
    // Legend.
    for (di, defense) in defenses.iter().enumerate() {
        let x = margin_l + di as f64 * 110.0;
        let y = height - 16.0;
        writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            palette[di % palette.len()]
        )?;
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"10\">{defense}</text>",
            x + 14.0
        )?;
    }
    writeln!(svg, "</svg>")?;
    write_atomic(
        &run_dir.join("plots").join(format!("asr_clip_{setting}.svg")),
        svg.as_bytes(),
    )?;
    Ok(())
}
