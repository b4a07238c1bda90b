//! Deterministic synthetic product corpora with stub-model sidecars.
//!
//! Every product image is a stub whose hidden description is the product's
//! own training text, so its image embedding coincides with the text
//! embedding used in training (up to the stub's configured noise).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspect::{Aspect, AspectSet};
use crate::data::{write_corpus, ProductRecord};
use crate::models::stub::StubImage;
use crate::models::DetectedText;
use crate::train::{build_training_text, TrainConfig};

const COLORS: &[&str] = &["red", "black", "white", "blue", "green"];
const MATERIALS: &[&str] = &["leather", "canvas", "suede", "nylon"];
const BRANDS: &[&str] = &["corsair", "acme", "zenith", "orion", "vertex"];
const PATTERNS: &[&str] = &["solid", "striped", "plaid", "camo"];
const CATEGORIES: &[(&str, &[&str])] = &[
    ("shoes", &["boot", "sneaker", "sandal", "loafer"]),
    ("bags", &["backpack", "tote", "wallet", "satchel"]),
];

/// The attributes of every synthetic corpus, in serialization order.
pub const ATTRIBUTES: [&str; 5] = ["type", "color", "material", "brand", "pattern"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub products: usize,
    pub seed: u64,
    /// Probability that each optional attribute is present.
    pub optional_rate: f64,
    /// Probability that a value is written in a plural surface form in the raw corpus.
    pub plural_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            products: 50,
            seed: 0,
            optional_rate: 0.6,
            plural_rate: 0.1,
        }
    }
}

/// A generated product: the normalized record, the raw record as it would
/// appear in a scraped corpus, and the stub sidecars for its image.
#[derive(Debug, Clone)]
pub struct SynthProduct {
    pub record: ProductRecord,
    pub raw: ProductRecord,
    pub image: StubImage,
}

fn caption(values: &BTreeMap<&str, &str>) -> String {
    let mut words = vec!["a"];
    for attr in ["color", "material", "type"] {
        if let Some(v) = values.get(attr) {
            words.push(v);
        }
    }
    let mut text = words.join(" ");
    if let Some(p) = values.get("pattern") {
        text.push_str(&format!(" with a {p} pattern"));
    }
    text
}

pub fn generate(config: &SynthConfig) -> Vec<SynthProduct> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.products)
        .map(|i| {
            let (category, types) = *CATEGORIES.choose(&mut rng).expect("non-empty");
            let mut values = BTreeMap::new();
            values.insert("type", *types.choose(&mut rng).expect("non-empty"));
            for (attr, pool) in [
                ("color", COLORS),
                ("material", MATERIALS),
                ("brand", BRANDS),
                ("pattern", PATTERNS),
            ] {
                if rng.random_bool(config.optional_rate) {
                    values.insert(attr, *pool.choose(&mut rng).expect("non-empty"));
                }
            }
            let ordered = || ATTRIBUTES.iter().filter_map(|a| values.get(a).map(|v| (*a, *v)));
            let gold: AspectSet = ordered()
                .map(|(a, v)| Aspect::new(a, v).expect("valid aspect"))
                .collect();
            let raw_aspects: AspectSet = ordered()
                .map(|(a, v)| {
                    let plural = a == "type" && rng.random_bool(config.plural_rate);
                    Aspect::new(a, if plural { format!("{v}s") } else { v.to_string() }).expect("valid aspect")
                })
                .collect();
            let id = format!("p{i:03}");
            let record = ProductRecord {
                id: id.clone(),
                category: category.into(),
                image_ref: format!("{id}.img"),
                title: None,
                gold_aspects: gold,
            };
            let caption = caption(&values);
            let mut ocr = vec![DetectedText {
                text: "Official".into(),
                confidence: 0.8,
            }];
            if let Some(brand) = values.get("brand") {
                let mut upper = brand.to_string();
                upper[..1].make_ascii_uppercase();
                ocr.push(DetectedText {
                    text: upper,
                    confidence: 0.93,
                });
            }
            ocr.push(DetectedText {
                text: "blurry".into(),
                confidence: 0.3,
            });
            ocr.shuffle(&mut rng);
            let answers = values
                .iter()
                .filter(|(a, _)| **a != "brand")
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .collect();
            let image = StubImage {
                description: build_training_text(&record, &caption).expect("non-empty"),
                caption: Some(caption),
                ocr,
                answers,
            };
            let raw = ProductRecord {
                gold_aspects: raw_aspects,
                ..record.clone()
            };
            SynthProduct { record, raw, image }
        })
        .collect()
}

/// Training settings sized for synthetic corpora of about fifty products:
/// small batches, a higher learning rate and longer patience than the
/// defaults.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 16,
        max_epochs: 300,
        early_stop_patience: 20,
        ..TrainConfig::default()
    }
}

/// Paths of a fixture written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: PathBuf,
    pub images: PathBuf,
    pub synonyms: PathBuf,
}

/// Id of the extra row whose image does not exist.
pub const MISSING_IMAGE_ID: &str = "missing-image";

/// Write `raw.jsonl`, a synonym map, and an `images/` directory of stub
/// sidecars under `dir`. The corpus has one extra row whose image is absent.
pub fn write_fixture(products: &[SynthProduct], dir: &Path) -> std::io::Result<Fixture> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    for p in products {
        p.image.write(&images, &p.record.image_ref)?;
    }
    let mut rows: Vec<ProductRecord> = products.iter().map(|p| p.raw.clone()).collect();
    rows.push(ProductRecord {
        id: MISSING_IMAGE_ID.into(),
        category: "shoes".into(),
        image_ref: "nowhere.img".into(),
        title: None,
        gold_aspects: [Aspect::new("type", "boot").expect("valid")].into_iter().collect(),
    });
    let corpus = dir.join("raw.jsonl");
    let mut out = Vec::new();
    write_corpus(&rows, &mut out)?;
    std::fs::write(&corpus, out)?;
    let synonyms = dir.join("synonyms.json");
    std::fs::write(&synonyms, "{\n  \"rucksack\": \"backpack\",\n  \"trainer\": \"sneaker\"\n}\n")?;
    Ok(Fixture {
        corpus,
        images,
        synonyms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, merge_equivalent_aspects, LocalImages, SynonymMap};

    #[test]
    fn deterministic_and_shaped() {
        let a = generate(&SynthConfig::default());
        let b = generate(&SynthConfig::default());
        assert_eq!(a.len(), 50);
        assert_eq!(
            a.iter().map(|p| &p.image.description).collect::<Vec<_>>(),
            b.iter().map(|p| &p.image.description).collect::<Vec<_>>()
        );
        let attrs: std::collections::BTreeSet<_> = a
            .iter()
            .flat_map(|p| p.record.gold_aspects.attributes().map(str::to_string).collect::<Vec<_>>())
            .collect();
        assert_eq!(attrs.len(), 5);
        assert!(a.iter().all(|p| p.record.gold_aspects.contains_attribute("type")));
    }

    #[test]
    fn fixture_normalizes_back_to_gold() {
        let products = generate(&SynthConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let fx = write_fixture(&products, dir.path()).unwrap();
        let loaded = load_corpus(&fx.corpus, &LocalImages::new(&fx.images)).unwrap();
        assert_eq!(loaded.dropped_missing_image, [MISSING_IMAGE_ID]);
        let merged = merge_equivalent_aspects(loaded.records, &SynonymMap::load(&fx.synonyms).unwrap());
        for (got, p) in merged.iter().zip(&products) {
            assert_eq!(got, &p.record);
        }
    }
}
