//! Step segmentation and keyword-based behavior annotation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::io;

/// Separator between reasoning steps in a response.
pub const STEP_DELIMITER: &str = "\n\n";

/// Splits a response into steps at every blank-line delimiter.
///
/// Empty segments (from leading, trailing or repeated delimiters) are dropped.
pub fn segment_response(response: &str) -> Vec<&str> {
    response
        .split(STEP_DELIMITER)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Case-insensitive substring keywords for the two behavior classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub reflection_keywords: Vec<String>,
    pub backtracking_keywords: Vec<String>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        KeywordTable {
            reflection_keywords: own(&[
                "Wait",
                "verify",
                "make sure",
                "hold on",
                "think again",
                "'s correct",
                "'s incorrect",
                "Let me check",
                "seems right",
            ]),
            // "think differenly" is kept verbatim as a reference spelling; the
            // correctly spelled form is listed as well.
            backtracking_keywords: own(&[
                "Alternatively",
                "think differenly",
                "think differently",
                "another way",
                "another approach",
                "another method",
                "another solution",
                "another strategy",
                "another technique",
            ]),
        }
    }
}

impl KeywordTable {
    pub fn validate(&self) -> Result<()> {
        if self.reflection_keywords.is_empty() {
            return Err(Error::validation(
                "reflection_keywords",
                "must not be empty",
            ));
        }
        if self.backtracking_keywords.is_empty() {
            return Err(Error::validation(
                "backtracking_keywords",
                "must not be empty",
            ));
        }
        let blank = self
            .reflection_keywords
            .iter()
            .chain(&self.backtracking_keywords)
            .any(|k| k.is_empty());
        if blank {
            return Err(Error::validation(
                "keywords",
                "empty keyword matches everything",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: KeywordTable = io::read_json(path)?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

fn any_match(haystack: &str, keywords: &[String]) -> bool {
    keywords
        .iter()
        .any(|k| haystack.contains(k.to_lowercase().as_str()))
}

/// Labels a step: reflection wins over backtracking when both match.
pub fn annotate_step(text: &str, table: &KeywordTable) -> Label {
    let lowered = text.to_lowercase();
    let reflection = any_match(&lowered, &table.reflection_keywords);
    let backtracking = any_match(&lowered, &table.backtracking_keywords);
    match (reflection, backtracking) {
        (true, true) => {
            log::debug!("step matches both classes, labeled reflection: {text:?}");
            Label::Reflection
        }
        (true, false) => Label::Reflection,
        (false, true) => Label::Backtracking,
        (false, false) => Label::Others,
    }
}

/// Fraction of positions where the two labelings agree.
pub fn agreement_ratio(a: &[Label], b: &[Label]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "label lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("label lists are empty".into()));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}
