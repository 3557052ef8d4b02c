//! Prompt template banks and placeholder filling.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::Deserialize;

use super::VqaFamily;

/// Banks transcribed verbatim, one per family that has published templates.
const PUBLISHED: &str = include_str!("../../data/vqa_templates.json");
/// Banks for the generation families without published templates.
const AUTHORED: &str = include_str!("../../data/vqa_templates_generation.json");

#[derive(Debug, Deserialize)]
struct Bank {
    prompts: Vec<String>,
}

fn banks() -> &'static BTreeMap<String, Bank> {
    static BANKS: OnceLock<BTreeMap<String, Bank>> = OnceLock::new();
    BANKS.get_or_init(|| {
        let mut all: BTreeMap<String, Bank> = serde_json::from_str(PUBLISHED).expect("published template bank");
        let authored: BTreeMap<String, Bank> = serde_json::from_str(AUTHORED).expect("authored template bank");
        for (k, v) in authored {
            assert!(all.insert(k.clone(), v).is_none(), "template family {k} defined twice");
        }
        all
    })
}

pub fn templates_for(family: VqaFamily) -> &'static [String] {
    &banks()
        .get(family.as_str())
        .unwrap_or_else(|| panic!("no templates for {family}"))
        .prompts
}

/// Values substituted into a template; unset slots are left as written.
#[derive(Debug, Clone, Default)]
pub struct Slots {
    pub task: Option<String>,
    pub subtask: Option<String>,
    pub choice: Option<String>,
    pub object: Option<String>,
    pub waypoints: Option<String>,
    pub long_horizon: Option<String>,
    pub past_tasks: Option<String>,
    pub previous_task: Option<String>,
    pub task_n: Option<String>,
    pub random_task: Option<String>,
    /// `<task i>` / `<skill i>` option texts in label order.
    pub options: Vec<String>,
}

const PLACEHOLDER: &str = r"<TASK>|<SUBTASK>|<CHOICE>|<OBJECT>|<WAYPOINTS>|\{long-horizon\}|\{past task 1 ~ n-1\}|\{task n-1\}|\{task n\}|\{random task\}|<task [1-4]>|<skill [1-4]>";

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PLACEHOLDER).unwrap())
}

/// Substitutes every placeholder in a single pass, so filled text is never
/// re-scanned.
pub fn fill_template(template: &str, slots: &Slots) -> String {
    placeholder_re()
        .replace_all(template, |c: &Captures| {
            let m = &c[0];
            let v = match m {
                "<TASK>" => slots.task.as_ref(),
                "<SUBTASK>" => slots.subtask.as_ref(),
                "<CHOICE>" => slots.choice.as_ref(),
                "<OBJECT>" => slots.object.as_ref(),
                "<WAYPOINTS>" => slots.waypoints.as_ref(),
                "{long-horizon}" => slots.long_horizon.as_ref(),
                "{past task 1 ~ n-1}" => slots.past_tasks.as_ref(),
                "{task n-1}" => slots.previous_task.as_ref(),
                "{task n}" => slots.task_n.as_ref(),
                "{random task}" => slots.random_task.as_ref(),
                _ => {
                    let i: usize = m[m.len() - 2..m.len() - 1].parse().unwrap();
                    slots.options.get(i - 1)
                }
            };
            v.cloned().unwrap_or_else(|| m.to_string())
        })
        .into_owned()
}

/// Anchored pattern matching any filling of `template`.
pub fn template_pattern(template: &str) -> Regex {
    let mut pat = String::from("(?s)^");
    let mut last = 0;
    for m in placeholder_re().find_iter(template) {
        pat.push_str(&regex::escape(&template[last..m.start()]));
        pat.push_str(".*");
        last = m.end();
    }
    pat.push_str(&regex::escape(&template[last..]));
    pat.push('$');
    Regex::new(&pat).unwrap()
}
