//! Attribute/value pairs and their canonical string encoding.
//!
//! An aspect is written `attribute: value`; a set of aspects is written as
//! aspects joined by `"; "`. Parsing splits on the first colon, so values may
//! contain colons but attribute names may not.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator between aspects in a serialized set.
pub const ASPECT_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AspectError {
    #[error("malformed aspect {text:?}: {reason}")]
    MalformedAspect { text: String, reason: &'static str },
}

/// One attribute/value pair, e.g. `color: red`.
///
/// Both sides are trimmed and non-empty, and the attribute never contains a
/// colon. Case is preserved; use [`Aspect::normalized`] for comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Aspect {
    attribute: String,
    value: String,
}

impl Aspect {
    pub fn new(attribute: impl AsRef<str>, value: impl AsRef<str>) -> Result<Self, AspectError> {
        let attribute = attribute.as_ref().trim();
        let value = value.as_ref().trim();
        let text = || format!("{attribute}: {value}");
        if attribute.is_empty() {
            return Err(AspectError::MalformedAspect {
                text: text(),
                reason: "empty attribute",
            });
        }
        if value.is_empty() {
            return Err(AspectError::MalformedAspect {
                text: text(),
                reason: "empty value",
            });
        }
        if attribute.contains(':') {
            return Err(AspectError::MalformedAspect {
                text: text(),
                reason: "attribute contains ':'",
            });
        }
        Ok(Self {
            attribute: attribute.to_string(),
            value: value.to_string(),
        })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    /// Same attribute, different value. The attribute is already valid, so
    /// this only fails on an empty value.
    pub fn with_value(&self, value: impl AsRef<str>) -> Result<Self, AspectError> {
        Self::new(&self.attribute, value)
    }

    /// Attribute folded with [`normalize_attribute`], value with
    /// [`normalize_value`].
    pub fn normalized(&self) -> Self {
        Self {
            attribute: normalize_attribute(&self.attribute),
            value: normalize_value(&self.value),
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.attribute, self.value)
    }
}

// Deserialize through `new` so files cannot smuggle in invalid aspects.
impl<'de> Deserialize<'de> for Aspect {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            attribute: String,
            value: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        Aspect::new(raw.attribute, raw.value).map_err(serde::de::Error::custom)
    }
}

/// Parse `"attribute: value"`. Both sides are trimmed and lowercased.
///
/// ```
/// use vioc_core::aspect::parse_aspect;
///
/// let a = parse_aspect("Brand:  Corsair ").unwrap();
/// assert_eq!((a.attribute(), a.value()), ("brand", "corsair"));
/// assert!(parse_aspect("color").is_err());
/// ```
pub fn parse_aspect(text: &str) -> Result<Aspect, AspectError> {
    let Some((attribute, value)) = text.split_once(':') else {
        return Err(AspectError::MalformedAspect {
            text: text.to_string(),
            reason: "missing ':' delimiter",
        });
    };
    Aspect::new(attribute.to_lowercase(), value.to_lowercase())
}

/// Parse a serialized aspect set. Empty fragments (e.g. from a trailing
/// separator or an empty string) are ignored; any malformed fragment fails.
pub fn parse_aspects(text: &str) -> Result<AspectSet, AspectError> {
    let mut set = AspectSet::new();
    for fragment in text.split(';') {
        if fragment.trim().is_empty() {
            continue;
        }
        set.insert(parse_aspect(fragment)?);
    }
    Ok(set)
}

/// Lenient variant of [`parse_aspects`] used on decoder output: malformed
/// fragments are returned instead of failing the whole string.
pub fn parse_aspects_lenient(text: &str) -> (AspectSet, Vec<String>) {
    let mut set = AspectSet::new();
    let mut malformed = Vec::new();
    for fragment in text.split(';') {
        let fragment = fragment.trim();
        if fragment.is_empty() {
            continue;
        }
        match parse_aspect(fragment) {
            Ok(aspect) => set.insert(aspect),
            Err(_) => malformed.push(fragment.to_string()),
        }
    }
    (set, malformed)
}

/// Render aspects as `"attr: value"` joined by `"; "`, in insertion order.
pub fn serialize_aspects(aspects: &AspectSet) -> String {
    aspects
        .iter()
        .map(Aspect::to_string)
        .collect::<Vec<_>>()
        .join(ASPECT_SEPARATOR)
}

/// Ordered aspects with at most one entry per normalized attribute name.
///
/// Inserting an aspect whose attribute is already present replaces the old
/// value in place, so the first-insertion position is kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Aspect>", into = "Vec<Aspect>")]
pub struct AspectSet {
    aspects: Vec<Aspect>,
}

impl AspectSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, aspect: Aspect) {
        let key = normalize_attribute(aspect.attribute());
        match self
            .aspects
            .iter_mut()
            .find(|a| normalize_attribute(a.attribute()) == key)
        {
            Some(slot) => *slot = aspect,
            None => self.aspects.push(aspect),
        }
    }

    /// Look up by attribute name (compared after normalization).
    pub fn get(&self, attribute: &str) -> Option<&Aspect> {
        let key = normalize_attribute(attribute);
        self.aspects
            .iter()
            .find(|a| normalize_attribute(a.attribute()) == key)
    }

    pub fn contains_attribute(&self, attribute: &str) -> bool {
        self.get(attribute).is_some()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Aspect> {
        self.aspects.iter()
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn as_slice(&self) -> &[Aspect] {
        &self.aspects
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.aspects.iter().map(Aspect::attribute)
    }

    /// Every aspect passed through [`Aspect::normalized`].
    pub fn normalized(&self) -> Self {
        self.iter().map(Aspect::normalized).collect()
    }
}

impl FromIterator<Aspect> for AspectSet {
    fn from_iter<I: IntoIterator<Item = Aspect>>(iter: I) -> Self {
        let mut set = Self::new();
        for aspect in iter {
            set.insert(aspect);
        }
        set
    }
}

impl From<Vec<Aspect>> for AspectSet {
    fn from(aspects: Vec<Aspect>) -> Self {
        aspects.into_iter().collect()
    }
}

impl From<AspectSet> for Vec<Aspect> {
    fn from(set: AspectSet) -> Self {
        set.aspects
    }
}

impl<'a> IntoIterator for &'a AspectSet {
    type Item = &'a Aspect;
    type IntoIter = std::slice::Iter<'a, Aspect>;

    fn into_iter(self) -> Self::IntoIter {
        self.aspects.iter()
    }
}

impl fmt::Display for AspectSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_aspects(self))
    }
}

/// Lowercase, trim and collapse internal whitespace runs to one space.
pub fn normalize_attribute(text: &str) -> String {
    collapse_whitespace(&text.to_lowercase())
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One singularization rule applied to the last word of a value.
#[derive(Debug, Clone, Copy)]
pub enum PluralRule {
    /// Strip `suffix` when the remaining stem ends with one of `stem_endings`.
    StripAfterStem {
        suffix: &'static str,
        stem_endings: &'static [&'static str],
    },
    /// Strip `suffix` when the word is longer than `min_len` characters and
    /// does not end with any of `keep_endings`.
    Strip {
        suffix: &'static str,
        min_len: usize,
        keep_endings: &'static [&'static str],
    },
}

/// Default rule table, tried in order; the first rule that fires wins.
///
/// `dresses -> dress`, `boxes -> box`, `boots -> boot`; words ending in
/// `ss`, `us`, `is`, `as` or `os` keep their final `s` (`glass`, `canvas`).
pub const PLURAL_RULES: &[PluralRule] = &[
    PluralRule::StripAfterStem {
        suffix: "es",
        stem_endings: &["s", "x", "z", "ch", "sh"],
    },
    PluralRule::Strip {
        suffix: "s",
        min_len: 3,
        keep_endings: &["ss", "us", "is", "as", "os"],
    },
];

impl PluralRule {
    fn apply(&self, word: &str) -> Option<String> {
        match *self {
            PluralRule::StripAfterStem {
                suffix,
                stem_endings,
            } => {
                let stem = word.strip_suffix(suffix)?;
                (!stem.is_empty() && stem_endings.iter().any(|e| stem.ends_with(e)))
                    .then(|| stem.to_string())
            }
            PluralRule::Strip {
                suffix,
                min_len,
                keep_endings,
            } => {
                if word.chars().count() <= min_len || keep_endings.iter().any(|e| word.ends_with(e))
                {
                    return None;
                }
                word.strip_suffix(suffix).map(str::to_string)
            }
        }
    }
}

/// Singularize `word` with `rules`, repeating until no rule fires so the
/// result is a fixed point.
pub fn singularize_with(word: &str, rules: &[PluralRule]) -> String {
    let mut current = word.to_string();
    while let Some(next) = rules.iter().find_map(|rule| rule.apply(&current)) {
        current = next;
    }
    current
}

/// Case-fold, collapse whitespace, and singularize the last word with
/// [`PLURAL_RULES`]. Idempotent.
///
/// ```
/// use vioc_core::aspect::normalize_value;
///
/// assert_eq!(normalize_value("Stainless  Steel"), "stainless steel");
/// assert_eq!(normalize_value("Dresses"), "dress");
/// assert_eq!(normalize_value("running shoes"), "running shoe");
/// ```
pub fn normalize_value(text: &str) -> String {
    normalize_value_with(text, PLURAL_RULES)
}

pub fn normalize_value_with(text: &str, rules: &[PluralRule]) -> String {
    let collapsed = collapse_whitespace(&text.to_lowercase());
    match collapsed.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", singularize_with(last, rules)),
        None => singularize_with(&collapsed, rules),
    }
}
