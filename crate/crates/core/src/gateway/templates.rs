use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PromptContext, RenderedPrompt};
use crate::error::{Error, Result};
use crate::quantizer::GroupCsid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Profile,
    NoveltyFt,
    NoveltyInfer,
    RelevanceFt,
    RelevanceInfer,
}

impl PromptRole {
    pub const ALL: [PromptRole; 5] = [
        PromptRole::Profile,
        PromptRole::NoveltyFt,
        PromptRole::NoveltyInfer,
        PromptRole::RelevanceFt,
        PromptRole::RelevanceInfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Profile => "profile",
            PromptRole::NoveltyFt => "novelty_ft",
            PromptRole::NoveltyInfer => "novelty_infer",
            PromptRole::RelevanceFt => "relevance_ft",
            PromptRole::RelevanceInfer => "relevance_infer",
        }
    }

    fn is_fine_tuning(self) -> bool {
        matches!(self, PromptRole::NoveltyFt | PromptRole::RelevanceFt)
    }

    fn is_relevance(self) -> bool {
        matches!(self, PromptRole::RelevanceFt | PromptRole::RelevanceInfer)
    }
}

const PROFILE: &str = "You describe the shared interests of a group of users.\n\
Group: {group}\n\
Category histories of representative members:\n\
{sequences}\n\
Write a short profile of what this group enjoys.";

const NOVELTY_FT: &str = "You help users discover content categories they have not explored.\n\
Group: {group}\n\
Group profile: <<{profile}>>\n\
Recent categories: <<{categories}>>\n\
Name the category this user explores next.";

const NOVELTY_INFER: &str = "You help users discover content categories they have not explored.\n\
Group: {group}\n\
Group profile: <<{profile}>>\n\
Recent categories: <<{categories}>>\n\
List categories this user has not explored recently but would likely enjoy, one per line.";

const RELEVANCE_FT: &str = "You judge how well a content category suits a user.\n\
Group: {group}\n\
Group profile: <<{profile}>>\n\
Recent categories: <<{categories}>>\n\
Candidate category: <<{candidate}>>\n\
Rate how likely the user is to click this category.";

const RELEVANCE_INFER: &str = "You judge how well a content category suits a user.\n\
Group: {group}\n\
Group profile: <<{profile}>>\n\
Recent categories: <<{categories}>>\n\
Candidate category: <<{candidate}>>\n\
Answer with a single number; higher means the user is more likely to click.";

/// One template per role, with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    by_role: BTreeMap<PromptRole, String>,
}

impl Default for Templates {
    fn default() -> Self {
        let by_role = [
            (PromptRole::Profile, PROFILE),
            (PromptRole::NoveltyFt, NOVELTY_FT),
            (PromptRole::NoveltyInfer, NOVELTY_INFER),
            (PromptRole::RelevanceFt, RELEVANCE_FT),
            (PromptRole::RelevanceInfer, RELEVANCE_INFER),
        ]
        .into_iter()
        .map(|(r, t)| (r, t.to_string()))
        .collect();
        Self { by_role }
    }
}

fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

const KNOWN_SLOTS: [&str; 5] = ["group", "profile", "categories", "candidate", "sequences"];

impl Templates {
    /// Reads `<role>.txt` files from `dir`; roles without a file keep the
    /// built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for role in PromptRole::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                t.set(role, text.trim_end().to_string())?;
            }
        }
        Ok(t)
    }

    pub fn set(&mut self, role: PromptRole, text: String) -> Result<()> {
        let slots = placeholders(&text);
        if let Some(bad) = slots.iter().find(|s| !KNOWN_SLOTS.contains(s)) {
            return Err(Error::InvalidPrompt(format!(
                "{} template uses unknown slot {{{bad}}}",
                role.as_str()
            )));
        }
        if role.is_relevance() && slots.iter().filter(|s| **s == "candidate").count() != 1 {
            return Err(Error::InvalidPrompt(format!(
                "{} template must contain exactly one {{candidate}} slot",
                role.as_str()
            )));
        }
        self.by_role.insert(role, text);
        Ok(())
    }

    pub fn get(&self, role: PromptRole) -> &str {
        &self.by_role[&role]
    }

    /// Writes every template as `<role>.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (role, text) in &self.by_role {
            let path = dir.join(format!("{}.txt", role.as_str()));
            fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn fill(template: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut out = template.to_string();
    let needed: BTreeSet<&str> = placeholders(template).into_iter().collect();
    for name in needed {
        let value = slots.get(name).ok_or_else(|| Error::MissingSlot(name.to_string()))?;
        out = out.replace(&format!("{{{name}}}"), value);
    }
    Ok(out)
}

fn group_text(group: Option<&GroupCsid>) -> String {
    group.map_or_else(|| "unassigned".to_string(), |g| g.to_string())
}

/// Renders a novelty or relevance prompt. Fine-tuning roles take exactly a
/// two-category window; inference roles keep the last two categories.
pub fn render_prompt(
    templates: &Templates,
    role: PromptRole,
    group: Option<&GroupCsid>,
    profile_text: &str,
    categories: &[String],
    candidate: Option<&str>,
) -> Result<RenderedPrompt> {
    if role == PromptRole::Profile {
        return Err(Error::InvalidPrompt("use render_profile_prompt for profile prompts".into()));
    }
    let window: Vec<String> = if role.is_fine_tuning() {
        if categories.len() != 2 {
            return Err(Error::InvalidPrompt(format!(
                "{} prompts take exactly two categories, got {}",
                role.as_str(),
                categories.len()
            )));
        }
        categories.to_vec()
    } else {
        categories[categories.len().saturating_sub(2)..].to_vec()
    };
    let mut slots = BTreeMap::new();
    slots.insert("group".to_string(), group_text(group));
    slots.insert("profile".to_string(), profile_text.to_string());
    slots.insert("categories".to_string(), window.join(", "));
    if role.is_relevance() {
        let c = candidate.ok_or_else(|| Error::MissingSlot("candidate".into()))?;
        slots.insert("candidate".to_string(), c.to_string());
    }
    let text = fill(templates.get(role), &slots)?;
    Ok(RenderedPrompt {
        role,
        text,
        slots,
        context: PromptContext {
            group: group.cloned(),
            window,
            short_categories: categories.to_vec(),
            candidate: candidate.filter(|_| role.is_relevance()).map(str::to_string),
            sequences: Vec::new(),
        },
    })
}

pub fn render_profile_prompt(
    templates: &Templates,
    group: Option<&GroupCsid>,
    sequences: &[Vec<String>],
) -> Result<RenderedPrompt> {
    let listing: Vec<String> = sequences.iter().map(|s| format!("- {}", s.join(", "))).collect();
    let mut slots = BTreeMap::new();
    slots.insert("group".to_string(), group_text(group));
    slots.insert("sequences".to_string(), listing.join("\n"));
    let text = fill(templates.get(PromptRole::Profile), &slots)?;
    Ok(RenderedPrompt {
        role: PromptRole::Profile,
        text,
        slots,
        context: PromptContext {
            group: group.cloned(),
            sequences: sequences.to_vec(),
            ..PromptContext::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn novelty_infer_ends_with_trigger() {
        let t = Templates::default();
        let p = render_prompt(
            &t,
            PromptRole::NoveltyInfer,
            Some(&GroupCsid(vec![1, 2])),
            "Tech enthusiasts who like gadgets",
            &cats(&["Sci-Fi", "Thriller"]),
            None,
        )
        .unwrap();
        assert!(p.text.contains("Sci-Fi") && p.text.contains("Thriller"));
        assert!(p.text.contains("Tech enthusiasts"));
        assert!(p.text.ends_with("List categories this user has not explored recently but would likely enjoy, one per line."));
        assert!(!p.text.contains('{'));
    }

    #[test]
    fn inference_keeps_last_two_categories() {
        let t = Templates::default();
        let p = render_prompt(&t, PromptRole::NoveltyInfer, None, "x", &cats(&["a", "b", "c"]), None).unwrap();
        assert_eq!(p.context.window, cats(&["b", "c"]));
        assert_eq!(p.context.short_categories, cats(&["a", "b", "c"]));
        assert!(render_prompt(&t, PromptRole::NoveltyFt, None, "x", &cats(&["a", "b", "c"]), None).is_err());
    }

    #[test]
    fn relevance_requires_one_candidate() {
        let t = Templates::default();
        let err = render_prompt(&t, PromptRole::RelevanceInfer, None, "x", &cats(&["a", "b"]), None).unwrap_err();
        assert!(matches!(err, Error::MissingSlot(ref s) if s == "candidate"));
        let p = render_prompt(&t, PromptRole::RelevanceInfer, None, "x", &cats(&["a", "b"]), Some("Drama")).unwrap();
        assert_eq!(p.text.matches("Drama").count(), 1);
        assert_eq!(placeholders(t.get(PromptRole::RelevanceInfer)).iter().filter(|s| **s == "candidate").count(), 1);
    }

    #[test]
    fn rendering_is_deterministic_and_slot_injective() {
        let t = Templates::default();
        let a = render_prompt(&t, PromptRole::RelevanceFt, None, "p", &cats(&["a", "b"]), Some("c")).unwrap();
        let b = render_prompt(&t, PromptRole::RelevanceFt, None, "p", &cats(&["a", "b"]), Some("c")).unwrap();
        assert_eq!(a.text, b.text);
        let c = render_prompt(&t, PromptRole::RelevanceFt, None, "p", &cats(&["a", "b"]), Some("d")).unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn custom_templates_are_validated_and_loaded() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("novelty_infer.txt"), "P={profile} C={categories} go\n").unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        let p = render_prompt(&t, PromptRole::NoveltyInfer, None, "x", &cats(&["a"]), None).unwrap();
        assert_eq!(p.text, "P=x C=a go");
        assert_eq!(t.get(PromptRole::Profile), PROFILE);

        fs::write(dir.path().join("relevance_infer.txt"), "{profile} only").unwrap();
        assert!(Templates::load_dir(dir.path()).is_err());
        let mut t = Templates::default();
        assert!(t.set(PromptRole::Profile, "{nope}".into()).is_err());
    }

    #[test]
    fn templates_write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        Templates::default().write_dir(dir.path()).unwrap();
        assert_eq!(Templates::load_dir(dir.path()).unwrap(), Templates::default());
    }
}
