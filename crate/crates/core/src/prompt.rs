//! Prompt template files with `{NAME}` placeholders.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Substitutes `{NAME}` slots in one pass; substituted text is never rescanned.
/// Unknown slots are left as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let replaced = tail.find('}').and_then(|end| {
            let name = &tail[1..end];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (*v, end))
        });
        match replaced {
            Some((value, end)) => {
                out.push_str(value);
                rest = &tail[end + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub summarize_system: String,
    pub summarize_user: String,
    pub summarize_exemplar: String,
    pub reason_system: String,
    pub reason_user: String,
    pub caption_system: String,
    pub caption_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            summarize_system: include_str!("../prompts/summarize_system.txt").into(),
            summarize_user: include_str!("../prompts/summarize_user.txt").into(),
            summarize_exemplar: include_str!("../prompts/summarize_exemplar.txt").into(),
            reason_system: include_str!("../prompts/reason_system.txt").into(),
            reason_user: include_str!("../prompts/reason_user.txt").into(),
            caption_system: include_str!("../prompts/caption_system.txt").into(),
            caption_user: include_str!("../prompts/caption_user.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.txt` for every template present in `dir`, keeping the
    /// built-in text for the others.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut templates = Self::default();
        for (name, slot) in templates.slots_mut() {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(templates)
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut String); 7] {
        [
            ("summarize_system", &mut self.summarize_system),
            ("summarize_user", &mut self.summarize_user),
            ("summarize_exemplar", &mut self.summarize_exemplar),
            ("reason_system", &mut self.reason_system),
            ("reason_user", &mut self.reason_user),
            ("caption_system", &mut self.caption_system),
            ("caption_user", &mut self.caption_user),
        ]
    }
}
