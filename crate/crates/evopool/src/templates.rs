//! Prompt templates. Built-in copies ship in the binary; a config-supplied
//! directory can override any of them by file name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::Result;

const BUILTIN: [(&str, &str); 18] = [
    ("solve", include_str!("../templates/solve.txt")),
    ("debate_revise", include_str!("../templates/debate_revise.txt")),
    ("critique", include_str!("../templates/critique.txt")),
    ("revise", include_str!("../templates/revise.txt")),
    ("verify", include_str!("../templates/verify.txt")),
    ("split", include_str!("../templates/split.txt")),
    ("compose", include_str!("../templates/compose.txt")),
    ("reflect", include_str!("../templates/reflect.txt")),
    ("codream_reflect", include_str!("../templates/codream_reflect.txt")),
    ("codream_contrast", include_str!("../templates/codream_contrast.txt")),
    ("codream_imagine", include_str!("../templates/codream_imagine.txt")),
    ("codream_debate", include_str!("../templates/codream_debate.txt")),
    ("codream_crystallize", include_str!("../templates/codream_crystallize.txt")),
    ("choose_structure", include_str!("../templates/choose_structure.txt")),
    ("leadership_note", include_str!("../templates/leadership_note.txt")),
    ("persona_genesis", include_str!("../templates/persona_genesis.txt")),
    ("persona_fork", include_str!("../templates/persona_fork.txt")),
    ("persona_specialize", include_str!("../templates/persona_specialize.txt")),
];

#[derive(Debug, Clone)]
pub struct Templates {
    map: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            map: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Templates {
    /// Built-in templates, with any same-named `.txt` files under `dir`
    /// taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut templates = Templates::default();
        for name in BUILTIN.iter().map(|(k, _)| *k) {
            let candidate = dir.join(format!("{name}.txt"));
            if candidate.is_file() {
                templates.map.insert(name.to_string(), std::fs::read_to_string(candidate)?);
            }
        }
        Ok(templates)
    }

    /// Substitute `{key}` placeholders. Unknown placeholders are left as-is.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut text = self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown template {name:?}"))
            .clone();
        for (key, value) in vars {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        text
    }
}
