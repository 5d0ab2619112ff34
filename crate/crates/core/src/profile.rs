use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::timeline::UnitKind;

/// How target text is split into units for scoring, joining and latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangProfile {
    /// Whitespace-delimited languages (German). Units are words.
    SpaceTokenized,
    /// Chinese. Units are characters; whitespace carries no meaning.
    CharacterZh,
}

impl LangProfile {
    pub fn unit_kind(self) -> UnitKind {
        match self {
            LangProfile::SpaceTokenized => UnitKind::Word,
            LangProfile::CharacterZh => UnitKind::Character,
        }
    }

    /// Default speaking duration per unit, in seconds.
    pub fn default_seconds_per_unit(self) -> f64 {
        match self {
            LangProfile::SpaceTokenized => 0.30,
            LangProfile::CharacterZh => 0.25,
        }
    }

    /// Joins incremental output fragments into running target text.
    pub fn join_fragments<S: AsRef<str>>(self, fragments: &[S]) -> String {
        let mut out = String::new();
        for f in fragments {
            self.append_fragment(&mut out, f.as_ref());
        }
        out
    }

    pub fn append_fragment(self, acc: &mut String, fragment: &str) {
        match self {
            LangProfile::CharacterZh => acc.push_str(fragment),
            LangProfile::SpaceTokenized => {
                if !acc.is_empty() && !fragment.is_empty() {
                    acc.push(' ');
                }
                acc.push_str(fragment);
            }
        }
    }

    /// Splits target text into latency units (words or non-space characters).
    pub fn units(self, text: &str) -> Vec<String> {
        match self {
            LangProfile::SpaceTokenized => text.split_whitespace().map(str::to_owned).collect(),
            LangProfile::CharacterZh => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    pub fn unit_count(self, text: &str) -> usize {
        match self {
            LangProfile::SpaceTokenized => text.split_whitespace().count(),
            LangProfile::CharacterZh => text.chars().filter(|c| !c.is_whitespace()).count(),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            LangProfile::SpaceTokenized => "de",
            LangProfile::CharacterZh => "zh",
        }
    }
}

impl fmt::Display for LangProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LangProfile::SpaceTokenized => "space_tokenized",
            LangProfile::CharacterZh => "character_zh",
        })
    }
}

impl FromStr for LangProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zh" | "character_zh" => Ok(LangProfile::CharacterZh),
            "de" | "space_tokenized" => Ok(LangProfile::SpaceTokenized),
            other => Err(Error::Config(format!("unknown language profile {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_by_profile() {
        let frags = ["换句话说,", "我们"];
        assert_eq!(LangProfile::CharacterZh.join_fragments(&frags), "换句话说,我们");
        assert_eq!(
            LangProfile::SpaceTokenized.join_fragments(&["Mit anderen", "Worten"]),
            "Mit anderen Worten"
        );
    }

    #[test]
    fn character_units_skip_whitespace() {
        assert_eq!(LangProfile::CharacterZh.units("我 们"), vec!["我", "们"]);
        assert_eq!(LangProfile::CharacterZh.unit_count("ab c"), 3);
    }

    #[test]
    fn parses_cli_codes() {
        assert_eq!("zh".parse::<LangProfile>().unwrap(), LangProfile::CharacterZh);
        assert_eq!("DE".parse::<LangProfile>().unwrap(), LangProfile::SpaceTokenized);
        assert!("fr".parse::<LangProfile>().is_err());
    }
}
