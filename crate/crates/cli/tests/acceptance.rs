//! Acceptance suite. Every test prints one `ACn PASS|FAIL` line to stdout
//! (bypassing the harness capture) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vioc_core::aspect::{serialize_aspects, Aspect, AspectSet};
use vioc_core::data::{
    attribute_vocabulary, load_corpus, sample_zero_shot_split, validate_split, AcceptAllImages,
    ProductRecord,
};
use vioc_core::embedding::EmbeddingVector;
use vioc_core::eval::{accuracy80, align, evaluate, judge};
use vioc_core::infer::{correct_aspects, infer_batch, InferenceConfig, PredictionRow, Source};
use vioc_core::models::stub::StubModels;
use vioc_core::models::{threshold_tokens, Adapters, DetectedText, DualEncoder, ImageRef};
use vioc_core::synth::{desk_train_config, generate, write_fixture, SynthConfig, SynthProduct};
use vioc_core::train::{
    prepare_examples, project, reconstruct, train_decoder, Projector, ProjectorShape,
    TrainOutcome, TrainingExample,
};

struct Check {
    what: String,
    ok: bool,
}

fn check(ok: bool, what: impl Into<String>) -> Check {
    Check { what: what.into(), ok }
}

fn verdict(id: &str, started: Instant, budget: Duration, mut checks: Vec<Check>) {
    let elapsed = started.elapsed();
    checks.push(check(
        elapsed < budget,
        format!("runtime {:.1}s < {}s", elapsed.as_secs_f64(), budget.as_secs()),
    ));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.ok).map(|c| c.what.as_str()).collect();
    let status = if failed.is_empty() { "PASS" } else { "FAIL" };
    let detail: Vec<&str> = checks.iter().map(|c| c.what.as_str()).collect();
    let line = format!("{id} {status} :: {}\n", detail.join("; "));
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(line.as_bytes()).unwrap();
    stdout.flush().unwrap();
    assert!(failed.is_empty(), "{id} failed: {}", failed.join("; "));
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hand_scored")
}

fn aspect(attr: &str, value: &str) -> Aspect {
    Aspect::new(attr, value).unwrap()
}

// ---------------------------------------------------------------- AC1

#[test]
fn ac1_metric_fixture_suite() {
    let started = Instant::now();
    let mut checks = Vec::new();

    let equivalences = [
        ("type", "boot", ["boot", "bootie", "booty"]),
        ("sleeve style", "long sleeve", ["long sleeve", "long-sleeve", "long sleeve length"]),
    ];
    let mut judged = 0;
    for (attr, gold, surface_forms) in equivalences {
        for form in surface_forms {
            judged += usize::from(judge(&aspect(attr, gold), &[aspect(attr, form)]).correct);
        }
    }
    checks.push(check(judged == 6, format!("equivalence examples {judged}/6 correct")));

    let dir = fixture_dir();
    let gold = load_corpus(&dir.join("gold.jsonl"), &AcceptAllImages).unwrap().records;
    let rows: Vec<PredictionRow> = std::fs::read_to_string(dir.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let expected: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let report = evaluate(&align(&rows, &gold).unwrap()).unwrap();
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    for (key, got) in [
        ("acc80", report.acc80),
        ("macro_f1", report.macro_f1),
        ("micro_f1", report.micro_f1),
        ("rouge1", report.rouge1),
    ] {
        let want = expected["overall"][key].as_f64().unwrap();
        checks.push(check(
            round4(got) == round4(want),
            format!("{key} {:.4} (expected {want:.4})", got),
        ));
    }
    verdict("AC1", started, Duration::from_secs(5), checks);
}

// ---------------------------------------------------------------- AC2

const WORDS: &[&str] = &[
    "red", "dark", "blue", "navy", "acme", "corsair", "gaming", "mouse", "boot", "bootie",
    "leather", "co", "official", "sale",
];
const ATTRS: &[&str] = &["color", "brand", "type", "material", "style"];

/// Embedding as f64, or `None` when the encoder rejects the text.
fn oracle_embed(encoder: &dyn DualEncoder, text: &str) -> Option<Vec<f64>> {
    encoder
        .encode_text(text)
        .ok()
        .map(|v| v.as_slice().iter().map(|&x| f64::from(x)).collect())
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Surviving OCR tokens as `(position, text)`.
fn oracle_filter(detected: &[DetectedText], tau_c: f64) -> Vec<(usize, String)> {
    let mut kept = Vec::new();
    for (position, d) in detected.iter().enumerate() {
        let text = d.text.trim().to_lowercase();
        if text.is_empty() || d.confidence < 0.0 || d.confidence > 1.0 {
            continue;
        }
        if d.confidence > tau_c {
            kept.push((position, text));
        }
    }
    kept
}

/// Exhaustive re-implementation of the correction algorithm.
fn oracle_correct(
    decoded: &[(String, String)],
    prompted: &[(String, String)],
    tokens: &[(usize, String)],
    tau_d: f64,
    encoder: &dyn DualEncoder,
) -> Vec<(String, String)> {
    let mut ocr_pool: Vec<String> = tokens.iter().map(|(_, t)| t.clone()).collect();
    for i in 1..tokens.len() {
        if tokens[i].0 == tokens[i - 1].0 + 1 {
            ocr_pool.push(format!("{} {}", tokens[i - 1].1, tokens[i].1));
        }
    }
    let mut out = Vec::new();
    for (attr, value) in decoded {
        let anchor = oracle_embed(encoder, value);
        let prompt = prompted.iter().find(|(a, _)| a == attr).map(|(_, v)| v.clone());
        let Some(anchor) = anchor else {
            out.push((attr.clone(), value.clone()));
            continue;
        };
        let score = |text: &str| oracle_embed(encoder, text).and_then(|v| oracle_cosine(&anchor, &v));
        if let Some(p) = &prompt {
            if score(p).is_some_and(|s| s > tau_d) {
                out.push((attr.clone(), p.clone()));
                continue;
            }
        }
        let pool: Vec<String> = prompt.into_iter().chain(ocr_pool.iter().cloned()).collect();
        let scores: Vec<Option<f64>> = pool.iter().map(|c| score(c)).collect();
        let best = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen = scores.iter().position(|s| *s == Some(best));
        match chosen {
            Some(i) => out.push((attr.clone(), pool[i].clone())),
            None => out.push((attr.clone(), value.clone())),
        }
    }
    out
}

fn random_value(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=2);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_threshold(rng: &mut ChaCha8Rng, fixed: &[f64]) -> f64 {
    if rng.random_bool(0.5) {
        *fixed.choose(rng).unwrap()
    } else {
        rng.random_range(0.0..=1.0)
    }
}

struct Case {
    decoded: Vec<(String, String)>,
    prompted: Vec<(String, String)>,
    detected: Vec<DetectedText>,
    tau_d: f64,
    tau_c: f64,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let mut attrs: Vec<&str> = ATTRS.to_vec();
    let decoded_n = rng.random_range(0..=4);
    let mut decoded = Vec::new();
    for _ in 0..decoded_n {
        let i = rng.random_range(0..attrs.len());
        decoded.push((attrs.remove(i).to_string(), random_value(rng)));
    }
    let mut prompted = Vec::new();
    for attr in ATTRS {
        if rng.random_bool(0.6) {
            let same = decoded.iter().find(|(a, _)| a == attr).filter(|_| rng.random_bool(0.3));
            let value = match same {
                Some((_, v)) => v.clone(),
                None => random_value(rng),
            };
            prompted.push((attr.to_string(), value));
        }
    }
    let detected = (0..rng.random_range(0..=6))
        .map(|_| {
            let word = *WORDS.choose(rng).unwrap();
            let text = match rng.random_range(0..4) {
                0 => word.to_uppercase(),
                1 => format!("  {word} "),
                2 if rng.random_bool(0.3) => "   ".to_string(),
                _ => word.to_string(),
            };
            let confidence = random_threshold(rng, &[0.0, 0.3, 0.5, 0.93, 1.0]);
            DetectedText { text, confidence }
        })
        .collect();
    let tau_d = random_threshold(rng, &[0.0, 0.5, 0.95, 1.0]);
    let tau_c = random_threshold(rng, &[0.0, 0.5, 1.0]);
    Case {
        decoded,
        prompted,
        detected,
        tau_d,
        tau_c,
    }
}

fn to_set(pairs: &[(String, String)]) -> AspectSet {
    pairs.iter().map(|(a, v)| aspect(a, v)).collect()
}

fn pairs(set: &AspectSet) -> Vec<(String, String)> {
    set.iter().map(|a| (a.attribute().to_string(), a.value().to_string())).collect()
}

#[test]
fn ac2_correction_matches_brute_force_oracle() {
    let started = Instant::now();
    let mut checks = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let encoders = [StubModels::new(dir.path()).with_dim(16), StubModels::new(dir.path())];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 2000;
    let (mut mismatches, mut threshold_mismatches, mut trace_mismatches) = (0, 0, 0);
    for case in 0..cases {
        let encoder = &encoders[case % encoders.len()];
        let Case {
            decoded,
            prompted,
            detected,
            tau_d,
            tau_c,
        } = random_case(&mut rng);
        let decoded_set = to_set(&decoded);
        let prompted_set = to_set(&prompted);
        let tokens = threshold_tokens(detected.clone(), tau_c);
        let expected_tokens = oracle_filter(&detected, tau_c);
        let got_tokens: Vec<(usize, String)> =
            tokens.iter().map(|t| (t.position, t.text.clone())).collect();
        threshold_mismatches += usize::from(got_tokens != expected_tokens);

        let config = InferenceConfig {
            tau_d,
            tau_c,
            ..InferenceConfig::with_vocabulary(ATTRS)
        };
        let (got, trace) = correct_aspects(&decoded_set, &prompted_set, &tokens, &config, encoder);
        trace_mismatches += usize::from(trace.entries.len() != decoded_set.len());
        let want = oracle_correct(
            &pairs(&decoded_set),
            &pairs(&prompted_set),
            &expected_tokens,
            tau_d,
            encoder,
        );
        mismatches += usize::from(pairs(&got) != want);
    }
    checks.push(check(mismatches == 0, format!("{cases} random cases, {mismatches} mismatches")));
    checks.push(check(
        threshold_mismatches == 0,
        format!("ocr thresholding mismatches {threshold_mismatches}"),
    ));
    checks.push(check(trace_mismatches == 0, format!("trace length mismatches {trace_mismatches}")));

    let encoder = &encoders[1];
    let decoded = to_set(&[("color".into(), "dark red".into())]);
    let prompted = to_set(&[("color".into(), "red".into())]);
    let ocr = threshold_tokens(vec![DetectedText { text: "blue".into(), confidence: 0.9 }], 0.5);
    let similarity = oracle_cosine(
        &oracle_embed(encoder, "dark red").unwrap(),
        &oracle_embed(encoder, "red").unwrap(),
    )
    .unwrap();
    let zero = InferenceConfig {
        tau_d: 0.0,
        ..InferenceConfig::with_vocabulary(["color"])
    };
    let (out, trace) = correct_aspects(&decoded, &prompted, &ocr, &zero, encoder);
    checks.push(check(
        similarity > 0.0
            && out.get("color").map(Aspect::value) == Some("red")
            && trace.entries[0].source == Source::Prompt
            && trace.entries[0].candidates.is_empty(),
        "tau_d=0 takes the prompt answer directly",
    ));

    let one = InferenceConfig {
        tau_d: 1.0,
        ..InferenceConfig::with_vocabulary(["color"])
    };
    let (out, trace) = correct_aspects(&prompted, &prompted, &ocr, &one, encoder);
    checks.push(check(
        trace.entries[0].candidates.len() == 2 && out.get("color").map(Aspect::value) == Some("red"),
        "tau_d=1 never takes the similarity shortcut",
    ));

    let detected = vec![
        DetectedText { text: "Corsair".into(), confidence: 1.0 },
        DetectedText { text: "blurry".into(), confidence: 0.3 },
        DetectedText { text: "ghost".into(), confidence: 0.0 },
    ];
    let at_one = threshold_tokens(detected.clone(), 1.0);
    let at_zero: Vec<String> =
        threshold_tokens(detected, 0.0).into_iter().map(|t| t.text).collect();
    checks.push(check(at_one.is_empty(), "tau_c=1 keeps no token"));
    checks.push(check(at_zero == ["corsair", "blurry"], "tau_c=0 keeps every positive-confidence token"));
    verdict("AC2", started, Duration::from_secs(30), checks);
}

// ---------------------------------------------------------------- AC3

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<ProductRecord> {
    let categories = rng.random_range(1..=3);
    let products = rng.random_range(5..=60);
    (0..products)
        .map(|i| {
            let category = rng.random_range(0..categories);
            let mut aspects = AspectSet::new();
            for attr in ATTRS.iter().take(rng.random_range(1..=ATTRS.len())) {
                let value = format!("{} {}", WORDS.choose(rng).unwrap(), rng.random_range(0..4));
                aspects.insert(aspect(attr, &value));
            }
            ProductRecord {
                id: format!("c{category}-p{i:03}"),
                category: format!("category{category}"),
                image_ref: format!("p{i}.img"),
                title: None,
                gold_aspects: aspects,
            }
        })
        .collect()
}

#[test]
fn ac3_split_sampler_invariants() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut sampled, mut rejected, mut violations, mut nondeterministic) = (0, 0, Vec::new(), 0);
    while sampled < 150 && rejected < 1000 {
        let records = random_corpus(&mut rng);
        let fraction = rng.random_range(0.05..0.6);
        let seed = rng.random::<u64>();
        let split = match sample_zero_shot_split(&records, fraction, seed) {
            Ok(split) => split,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        sampled += 1;
        if sample_zero_shot_split(&records, fraction, seed).ok().as_ref() != Some(&split) {
            nondeterministic += 1;
        }
        let keys = |r: &ProductRecord| r.aspect_keys().collect::<BTreeSet<String>>();
        let by_id = |id: &String| records.iter().find(|r| &r.id == id).unwrap();
        let vocabulary: BTreeSet<String> = records.iter().flat_map(keys).collect();
        let mut problems = Vec::new();
        if !split.seen_aspects.is_disjoint(&split.unseen_aspects) {
            problems.push("seen and unseen overlap");
        }
        if split.unseen_aspects.is_empty() {
            problems.push("no unseen aspects");
        }
        let union: BTreeSet<String> = split.seen_aspects.union(&split.unseen_aspects).cloned().collect();
        if union != vocabulary {
            problems.push("seen and unseen do not cover the vocabulary");
        }
        for id in split.val_ids.iter().chain(&split.test_ids) {
            if keys(by_id(id)).is_disjoint(&split.unseen_aspects) {
                problems.push("held-out product without an unseen aspect");
            }
        }
        for id in &split.train_ids {
            if !keys(by_id(id)).is_disjoint(&split.unseen_aspects) {
                problems.push("unseen aspect in train");
            }
        }
        let all: Vec<&String> = split.train_ids.iter().chain(&split.val_ids).chain(&split.test_ids).collect();
        let distinct: BTreeSet<&String> = all.iter().copied().collect();
        if all.len() != records.len() || distinct.len() != records.len() {
            problems.push("partitions are not a disjoint cover");
        }
        if !validate_split(&split, &records).unwrap().passed() {
            problems.push("validate_split disagrees");
        }
        if !problems.is_empty() {
            violations.push(format!("seed {seed}: {}", problems.join(", ")));
        }
    }
    let checks = vec![
        check(sampled >= 100, format!("{sampled} sampled splits ({rejected} corpora rejected)")),
        check(violations.is_empty(), format!("{} invariant violations {violations:?}", violations.len())),
        check(nondeterministic == 0, format!("{nondeterministic} non-deterministic resamples")),
    ];
    verdict("AC3", started, Duration::from_secs(60), checks);
}

// ---------------------------------------------------------------- AC4 / AC5

struct Desk {
    images: PathBuf,
    products: Vec<SynthProduct>,
    examples: Vec<TrainingExample>,
    outcome: TrainOutcome,
    seconds: f64,
}

fn desk_corpus() -> (PathBuf, Vec<SynthProduct>, Vec<TrainingExample>) {
    let products = generate(&SynthConfig::default());
    let dir = tempfile::tempdir().unwrap().keep();
    let fixture = write_fixture(&products, &dir).unwrap();
    let records: Vec<ProductRecord> = products.iter().map(|p| p.record.clone()).collect();
    let adapters = Adapters::from_single(StubModels::new(&fixture.images));
    let examples = prepare_examples(&records, &adapters).unwrap();
    (fixture.images, products, examples)
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let (images, products, examples) = desk_corpus();
        let started = Instant::now();
        let outcome = train_decoder(&examples, &[], &desk_train_config(), None).unwrap();
        Desk {
            images,
            products,
            examples,
            outcome,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn ac4_text_only_training_sanity() {
    let started = Instant::now();
    let (first, second) = std::thread::scope(|scope| {
        let rerun = scope.spawn(|| {
            let (_, _, examples) = desk_corpus();
            train_decoder(&examples, &[], &desk_train_config(), None).unwrap()
        });
        (desk(), rerun.join().unwrap())
    });
    let log = &first.outcome.log;
    let (initial, last) = (log[0].train_loss, log.last().unwrap().train_loss);
    let stub = StubModels::new(&first.images);
    let exact = first
        .products
        .iter()
        .zip(&first.examples)
        .filter(|(p, e)| {
            reconstruct(&e.encoder_text, &first.outcome.checkpoint, &stub).unwrap()
                == serialize_aspects(&p.record.gold_aspects)
        })
        .count();
    let total = first.examples.len();
    let trajectory = |o: &TrainOutcome| -> Vec<(f64, f64)> {
        o.log.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    };
    let checks = vec![
        check(total == 50, format!("{total} training products")),
        check(
            last < 0.5 * initial,
            format!("loss {initial:.4} -> {last:.4} ({:.1}%)", 100.0 * last / initial),
        ),
        check(
            exact * 10 >= total * 9,
            format!("exact reconstruction {exact}/{total}"),
        ),
        check(
            trajectory(&first.outcome) == trajectory(&second)
                && first.outcome.checkpoint.to_bytes() == second.checkpoint.to_bytes(),
            format!("two seeded runs identical over {} epochs", log.len()),
        ),
        check(true, format!("single run {:.1}s", first.seconds)),
    ];
    verdict("AC4", started, Duration::from_secs(300), checks);
}

fn held_in_predictions(noise: f64, config: &InferenceConfig) -> (Vec<PredictionRow>, Vec<ProductRecord>) {
    let desk = desk();
    let adapters = Adapters::from_single(StubModels::new(&desk.images).with_noise(noise));
    let records: Vec<ProductRecord> = desk.products.iter().map(|p| p.record.clone()).collect();
    let images: Vec<ImageRef> = records.iter().map(|r| ImageRef::new(r.image_ref.clone())).collect();
    let results = infer_batch(&images, &desk.outcome.checkpoint, &adapters, config, 0).unwrap();
    let rows = records
        .iter()
        .zip(&results)
        .map(|(r, result)| PredictionRow::from_result(r.id.clone(), result))
        .collect();
    (rows, records)
}

#[test]
fn ac5_cross_modal_transfer() {
    let started = Instant::now();
    let desk = desk();
    let records: Vec<ProductRecord> = desk.products.iter().map(|p| p.record.clone()).collect();
    let corrected = InferenceConfig::with_vocabulary(attribute_vocabulary(&records));
    let uncorrected = corrected.clone().uncorrected();

    let (rows, records) = held_in_predictions(0.0, &corrected);
    let (mut exact, mut total) = (0, 0);
    for (row, record) in rows.iter().zip(&records) {
        let predicted: BTreeSet<String> = row.aspects.iter().map(|a| a.normalized().to_string()).collect();
        for key in record.aspect_keys() {
            total += 1;
            exact += usize::from(predicted.contains(&key));
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();

    let (noisy, _) = held_in_predictions(0.1, &corrected);
    let (noisy_plain, _) = held_in_predictions(0.1, &uncorrected);
    let with = accuracy80(&align(&noisy, &records).unwrap());
    let without = accuracy80(&align(&noisy_plain, &records).unwrap());
    let checks = vec![
        check(failed == 0, format!("{failed} failed images")),
        check(
            exact * 10 >= total * 9,
            format!("noise 0 exact aspects {exact}/{total} ({:.1}%)", 100.0 * exact as f64 / total as f64),
        ),
        check(
            with >= without,
            format!("noise 0.1 acc80 corrected {:.2}% vs uncorrected {:.2}%", 100.0 * with, 100.0 * without),
        ),
    ];
    verdict("AC5", started, Duration::from_secs(300), checks);
}

// ---------------------------------------------------------------- AC6

#[test]
fn ac6_projector_is_affine() {
    let started = Instant::now();
    let shape = ProjectorShape {
        embedding_dim: 64,
        prefix_len: 10,
        decoder_dim: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let projector = Projector::random(shape, &mut rng);
    let (weight, bias) = (projector.weight(), projector.bias());
    let random_input = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..shape.embedding_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    };
    let apply = |x: &[f32]| project(&EmbeddingVector::new(x.to_vec()).unwrap(), &projector).unwrap();

    let (mut oracle_err, mut superposition_err) = (0f64, 0f64);
    for _ in 0..100 {
        let x = random_input(&mut rng);
        let got = apply(&x);
        for k in 0..shape.prefix_len {
            for d in 0..shape.decoder_dim {
                let row = k * shape.decoder_dim + d;
                let mut want = f64::from(bias[row]);
                for (j, &xj) in x.iter().enumerate() {
                    want += f64::from(weight[[row, j]]) * f64::from(xj);
                }
                oracle_err = oracle_err.max((got[[k, d]] - want).abs());
            }
        }

        let y = random_input(&mut rng);
        let alpha = rng.random_range(-1.0f32..2.0);
        let mix: Vec<f32> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let combined = apply(&mix);
        let separate = apply(&x) * f64::from(alpha) + apply(&y) * (1.0 - f64::from(alpha));
        superposition_err = superposition_err.max((combined - separate).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)));
    }
    let checks = vec![
        check(oracle_err < 1e-6, format!("max |project - matmul oracle| {oracle_err:.2e} over 100 inputs")),
        check(superposition_err < 1e-6, format!("max affine superposition error {superposition_err:.2e}")),
    ];
    verdict("AC6", started, Duration::from_secs(5), checks);
}

// ---------------------------------------------------------------- AC7

fn run_vioc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vioc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("VIOC_CACHE_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("vioc {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<String, String> {
    let dir = dir.to_str().unwrap();
    run_vioc(&["synth", "--out", dir])?;
    let config = format!("{dir}/config.json");
    for step in ["prepare", "split", "train", "infer"] {
        run_vioc(&["--config", &config, step])?;
    }
    run_vioc(&["--config", &config, "--by-category", "--by-attribute", "evaluate"])
}

fn without_wall_clock(log: &str) -> Vec<Value> {
    log.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_seconds");
            v
        })
        .collect()
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "train_log.jsonl")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn ac7_full_pipeline_smoke() {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = std::thread::scope(|scope| {
        let rerun = scope.spawn(|| pipeline(b.path()));
        (pipeline(a.path()), rerun.join().unwrap())
    });
    let mut checks = vec![check(
        first.is_ok() && second.is_ok(),
        match (&first, &second) {
            (Ok(_), Ok(_)) => "synth, prepare, split, train, infer, evaluate exit 0".to_string(),
            (Err(e), _) | (_, Err(e)) => e.clone(),
        },
    )];
    if let (Ok(table), Ok(_)) = (&first, &second) {
        let header: Vec<&str> = table.lines().next().unwrap_or("").split_whitespace().collect();
        let overall = table.lines().find(|l| l.starts_with("overall")).unwrap_or("");
        checks.push(check(
            header == ["80%Acc.", "Macro-F1", "Micro-F1", "ROUGE1", "Products"]
                && overall.split_whitespace().count() == 6
                && table.contains("\ncategory ")
                && table.contains("\nattribute "),
            "report has the 80%Acc./Macro-F1/Micro-F1/ROUGE1 layout with category and attribute breakdowns",
        ));
        let (out_a, out_b) = (outputs(a.path()), outputs(b.path()));
        let names: Vec<&str> = out_a.iter().map(|(n, _)| n.as_str()).collect();
        let log = |d: &Path| std::fs::read_to_string(d.join("out/train_log.jsonl")).unwrap();
        checks.push(check(
            out_a == out_b && without_wall_clock(&log(a.path())) == without_wall_clock(&log(b.path())),
            format!("rerun byte-identical: {} (train log modulo wall time)", names.join(", ")),
        ));
    }
    verdict("AC7", started, Duration::from_secs(120), checks);
}
