use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{Arm, Knob, PromptParams};
use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/templates.json");

/// Which arm a template is written for.
pub type TemplateSlot = Arm;

#[derive(Debug, Clone, Deserialize)]
pub struct Template {
    pub name: String,
    pub slot: TemplateSlot,
    pub text: String,
}

/// The stub generator's template library: six base templates (three per
/// slot) with knob-dependent substitutions.
#[derive(Debug, Clone, Deserialize)]
pub struct TemplateBook {
    hooks: BTreeMap<String, String>,
    offers: BTreeMap<String, String>,
    tails: BTreeMap<String, String>,
    templates: Vec<Template>,
}

impl TemplateBook {
    pub fn parse(json: &str) -> Result<Self> {
        let book: TemplateBook = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("template file: {e}")))?;
        book.validate()?;
        Ok(book)
    }

    /// The template file compiled into the crate.
    pub fn bundled() -> &'static TemplateBook {
        static BOOK: OnceLock<TemplateBook> = OnceLock::new();
        BOOK.get_or_init(|| TemplateBook::parse(BUNDLED).expect("bundled templates are valid"))
    }

    fn validate(&self) -> Result<()> {
        for (knob, table) in [
            (Knob::Tone, &self.hooks),
            (Knob::OfferFraming, &self.offers),
            (Knob::Length, &self.tails),
        ] {
            for value in knob.domain() {
                if !table.contains_key(*value) {
                    return Err(Error::Config(format!(
                        "template file lacks a substitution for {}={value}",
                        knob.name()
                    )));
                }
            }
        }
        for arm in Arm::BOTH {
            if self.for_slot(arm).next().is_none() {
                return Err(Error::Config(format!("no templates for slot {arm}")));
            }
        }
        let mut texts: Vec<&str> = self.templates.iter().map(|t| t.text.as_str()).collect();
        texts.sort_unstable();
        texts.dedup();
        if texts.len() != self.templates.len() {
            return Err(Error::Config("template texts must be distinct".into()));
        }
        Ok(())
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn for_slot(&self, slot: TemplateSlot) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.slot == slot)
    }

    pub fn render(&self, template: &Template, params: &PromptParams) -> String {
        template
            .text
            .replace("{hook}", &self.hooks[params.value_name(Knob::Tone)])
            .replace("{offer}", &self.offers[params.value_name(Knob::OfferFraming)])
            .replace("{tail}", &self.tails[params.value_name(Knob::Length)])
    }
}
