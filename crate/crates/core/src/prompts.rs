//! Prompt templates. Placeholders are written `{{name}}`.

pub const KEYWORDS: &str = include_str!("../prompts/keywords.txt");
pub const EVIDENCE: &str = include_str!("../prompts/evidence.txt");
pub const TREE: &str = include_str!("../prompts/tree.txt");
pub const DISCRIMINATOR: &str = include_str!("../prompts/discriminator.txt");
pub const VERIFIER: &str = include_str!("../prompts/verifier.txt");
pub const ANSWER: &str = include_str!("../prompts/answer.txt");

/// Substitutes `{{key}}` placeholders in a single pass, so substituted
/// values are never re-expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(key);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_once() {
        assert_eq!(render("a {{x}} b {{y}}", &[("x", "{{y}}"), ("y", "2")]), "a {{y}} b 2");
        assert_eq!(render("{{missing}}", &[]), "{{missing}}");
        assert_eq!(render("open {{ only", &[]), "open {{ only");
    }

    #[test]
    fn templates_have_their_placeholders() {
        for (t, keys) in [
            (KEYWORDS, &["question"][..]),
            (EVIDENCE, &["header", "rows", "question"][..]),
            (TREE, &["header", "rows", "question", "evidence"][..]),
            (DISCRIMINATOR, &["first", "second"][..]),
            (VERIFIER, &["table", "question"][..]),
            (ANSWER, &["table", "question"][..]),
        ] {
            for k in keys {
                assert!(t.contains(&format!("{{{{{k}}}}}")), "{k}");
            }
        }
    }
}
