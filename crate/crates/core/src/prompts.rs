//! Prompt assets. The bundled defaults live in `prompts/*.txt` and can be
//! replaced by files named in the run configuration.

use std::path::Path;

pub const GENERATOR: &str = include_str!("../prompts/generator.txt");
pub const RERANKER: &str = include_str!("../prompts/reranker.txt");
pub const JUDGE: &str = include_str!("../prompts/judge.txt");

/// Substitute `{name}` placeholders. Unknown placeholders are left as is.
///
/// Substitution is a single pass over the template, so values that contain
/// `{...}` are never re-expanded.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn has_placeholder(template: &str, name: &str) -> bool {
    template.contains(&format!("{{{name}}}"))
}

/// Load an override from disk, or fall back to the bundled asset.
pub fn load_or(path: Option<&Path>, default: &str) -> std::io::Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p),
        None => Ok(default.to_string()),
    }
}
