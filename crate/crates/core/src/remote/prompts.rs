//! Versioned prompt templates for instruction-tuned endpoints.
//!
//! Templates live in `prompts/*.txt` and are embedded at compile time. Placeholders are
//! `{context}`, `{completion}` and `{thought}`; substitution is a single literal pass so
//! braces inside user text are never re-expanded.

pub const POLICY: &str = include_str!("../../prompts/policy.txt");
pub const JUDGE: &str = include_str!("../../prompts/judge.txt");
pub const NO_JUDGE: &str = include_str!("../../prompts/no_judge.txt");
pub const FILTERING: &str = include_str!("../../prompts/filtering.txt");

/// Replaces each `{name}` placeholder with its value, left to right, without rescanning
/// substituted text.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
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

pub fn policy_prompt(context: &str) -> String {
    render(POLICY, &[("context", context)])
}

pub fn no_judge_prompt(context: &str) -> String {
    render(NO_JUDGE, &[("context", context)])
}

pub fn judge_prompt(thought: &str) -> String {
    render(JUDGE, &[("thought", thought)])
}

pub fn filtering_prompt(context: &str, completion: &str) -> String {
    render(FILTERING, &[("context", context), ("completion", completion)])
}
