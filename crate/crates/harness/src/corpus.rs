//! Loader for the bundled rewrite corpus: attack rows referencing clean
//! captions, from which the poisoned counterparts are derived with the
//! production injection path.

use std::path::Path;

use anyhow::{bail, Context, Result};

use pepper_core::attacks::inject_trigger;
use pepper_core::model::{AttackFamily, AttackSpec, Caption, InjectionMode, PromptSetting};

#[derive(Debug, Clone)]
pub struct CorpusRow {
    pub spec: AttackSpec,
    pub setting: PromptSetting,
    pub clean: Caption,
    pub poisoned: Caption,
}

/// Parses `family \t trigger \t injection \t target_char \t target_concept
/// \t setting \t clean_caption` rows and injects each trigger.
pub fn load_rewrite_corpus(path: &Path) -> Result<Vec<CorpusRow>> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading rewrite corpus {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            bail!("{}:{}: expected 7 tab-separated fields", path.display(), lineno + 1);
        }
        let family = match fields[0] {
            "RR" => AttackFamily::RR,
            "VD" => AttackFamily::VD,
            "TI" => AttackFamily::TI,
            "EE" => AttackFamily::EE,
            other => bail!("{}:{}: unknown family {other:?}", path.display(), lineno + 1),
        };
        let injection = match fields[2] {
            "homoglyph_substitute" => InjectionMode::HomoglyphSubstitute,
            "append_token" => InjectionMode::AppendToken,
            other => bail!("{}:{}: unknown injection {other:?}", path.display(), lineno + 1),
        };
        let target_char = match fields[3] {
            "-" => None,
            s => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Some(c),
                    _ => bail!("{}:{}: target_char must be one character", path.display(), lineno + 1),
                }
            }
        };
        let setting = match fields[5] {
            "short" => PromptSetting::Short,
            "long" => PromptSetting::Long,
            other => bail!("{}:{}: unknown setting {other:?}", path.display(), lineno + 1),
        };
        let spec = AttackSpec {
            family,
            trigger: fields[1].to_string(),
            injection,
            target_concept: fields[4].to_string(),
            target_char,
        };
        let clean = Caption::clean(fields[6], setting)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        let poisoned = inject_trigger(&clean, &spec)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        rows.push(CorpusRow { spec, setting, clean, poisoned });
    }
    if rows.is_empty() {
        bail!("rewrite corpus {} is empty", path.display());
    }
    Ok(rows)
}
