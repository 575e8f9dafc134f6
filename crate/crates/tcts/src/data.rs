//! Deterministic synthetic scene-captioning data.
//!
//! Each record is a tiny scene (an animal, optionally a prop it relates to,
//! plus extra props) rendered into five distinct reference sentences through
//! a template/synonym grammar. Synonym choice per reference makes different
//! continuations follow shared prefixes, so the corpus exhibits the prefix
//! misalignment that soft labels are meant to absorb. The grammar is
//! invertible: every emitted sentence parses back to its scene, which the
//! generator checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One synthetic scene with its ground-truth attributes and references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub objects: Vec<String>,
    pub relation: String,
    pub attributes: Vec<String>,
    pub refs: Vec<String>,
    pub split: Split,
}

/// Generation knobs. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_num_records")]
    pub num_records: usize,
    #[serde(default)]
    pub seed: u64,
    /// Size of the attribute vocabulary: the most frequent content tokens
    /// of the training references.
    #[serde(default = "default_attr_vocab_size")]
    pub attr_vocab_size: usize,
}

fn default_num_records() -> usize {
    2000
}

fn default_attr_vocab_size() -> usize {
    50
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_records: default_num_records(),
            seed: 0,
            attr_vocab_size: default_attr_vocab_size(),
        }
    }
}

const REFS_PER_RECORD: usize = 5;

/// Animals fill the subject slot; each entry is (canonical, synonyms).
const ANIMALS: &[(&str, &[&str])] = &[
    ("dog", &["dog", "puppy", "hound"]),
    ("cat", &["cat", "kitten", "tabby"]),
    ("bird", &["bird", "sparrow", "robin"]),
    ("horse", &["horse", "pony", "stallion"]),
    ("rabbit", &["rabbit", "bunny", "hare"]),
    ("cow", &["cow", "calf", "heifer"]),
    ("sheep", &["sheep", "lamb", "ewe"]),
    ("duck", &["duck", "duckling", "drake"]),
    ("pig", &["pig", "piglet", "hog"]),
    ("goat", &["goat", "billy", "nanny"]),
    ("fox", &["fox", "vixen", "cub"]),
    ("mouse", &["mouse", "rodent", "vole"]),
    ("hen", &["hen", "chicken", "pullet"]),
    ("goose", &["goose", "gander", "gosling"]),
];

/// Props fill object and extra slots.
const PROPS: &[(&str, &[&str])] = &[
    ("mat", &["mat", "rug"]),
    ("bench", &["bench", "seat"]),
    ("fence", &["fence", "rail"]),
    ("gate", &["gate", "door"]),
    ("rock", &["rock", "stone", "boulder"]),
    ("basket", &["basket", "hamper"]),
    ("barrel", &["barrel", "keg"]),
    ("wagon", &["wagon", "cart"]),
    ("trough", &["trough", "basin"]),
    ("crate", &["crate", "box"]),
    ("log", &["log", "stump"]),
    ("pail", &["pail", "bucket"]),
];

const MODIFIERS: &[(&str, &[&str])] = &[
    ("small", &["small", "little", "tiny"]),
    ("big", &["big", "large", "huge"]),
    ("brown", &["brown", "tan"]),
    ("white", &["white", "pale"]),
    ("black", &["black", "dark"]),
    ("young", &["young", "newborn"]),
    ("fluffy", &["fluffy", "furry"]),
    ("spotted", &["spotted", "speckled"]),
    ("gray", &["gray", "silver"]),
    ("old", &["old", "aged"]),
    ("plump", &["plump", "chubby"]),
    ("sleek", &["sleek", "glossy"]),
];

/// Relations linking the subject animal to the first prop.
const TRANSITIVE: &[(&str, &[&str])] = &[
    ("sits on", &["sits on", "perches on"]),
    ("rests on", &["rests on", "lies on"]),
    ("stands near", &["stands near", "stands beside"]),
    ("looks at", &["looks at", "stares at"]),
    ("runs past", &["runs past", "dashes past"]),
    ("walks behind", &["walks behind", "trails behind"]),
    ("leans against", &["leans against", "presses against"]),
    ("sniffs at", &["sniffs at", "noses at"]),
];

/// Relations for single-object scenes.
const INTRANSITIVE: &[(&str, &[&str])] = &[
    ("sleeps", &["sleeps", "dozes"]),
    ("waits", &["waits", "lingers"]),
    ("jumps", &["jumps", "leaps"]),
    ("grazes", &["grazes", "feeds"]),
    ("wanders", &["wanders", "roams"]),
    ("stretches", &["stretches", "limbers"]),
    ("paces", &["paces", "trots"]),
];

/// Function words excluded from the attribute vocabulary.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "there", "is", "that", "and", "on", "at", "near", "beside", "past",
    "behind", "against", "with", "to", "by", "of", "in",
];

#[derive(Debug, Clone)]
struct Scene {
    animal: usize,
    /// One or two distinct modifiers, in fixed order.
    animal_mods: Vec<usize>,
    prop: Option<usize>,
    prop_mods: Vec<usize>,
    extras: Vec<usize>,
    relation: usize,
    transitive: bool,
}

impl Scene {
    fn objects(&self) -> Vec<String> {
        let phrase = |mods: &[usize], noun: &str| {
            let mut parts: Vec<&str> = mods.iter().map(|&m| MODIFIERS[m].0).collect();
            parts.push(noun);
            parts.join(" ")
        };
        let mut out = vec![phrase(&self.animal_mods, ANIMALS[self.animal].0)];
        if let Some(p) = self.prop {
            out.push(phrase(&self.prop_mods, PROPS[p].0));
        }
        for &e in &self.extras {
            out.push(PROPS[e].0.to_string());
        }
        out
    }

    fn relation_name(&self) -> &'static str {
        if self.transitive {
            TRANSITIVE[self.relation].0
        } else {
            INTRANSITIVE[self.relation].0
        }
    }
}

/// Surface-form choices for one reference. Index 0 of every synonym list is
/// the canonical form; `*_mod_take` controls how many of the scene's
/// modifiers this reference keeps (a prefix of the modifier list, so
/// references stay consistent with the scene while varying in detail).
#[derive(Debug, Clone, PartialEq, Eq)]
struct Choice {
    template: usize,
    animal_syn: usize,
    animal_mod_syns: Vec<usize>,
    animal_mod_take: usize,
    prop_syn: usize,
    prop_mod_syns: Vec<usize>,
    prop_mod_take: usize,
    rel_syn: usize,
    extra_syns: Vec<usize>,
}

impl Choice {
    fn canonical(scene: &Scene) -> Choice {
        Choice {
            template: 0,
            animal_syn: 0,
            animal_mod_syns: vec![0; scene.animal_mods.len()],
            animal_mod_take: scene.animal_mods.len(),
            prop_syn: 0,
            prop_mod_syns: vec![0; scene.prop_mods.len()],
            prop_mod_take: scene.prop_mods.len(),
            rel_syn: 0,
            extra_syns: vec![0; scene.extras.len()],
        }
    }

    fn random(scene: &Scene, rng: &mut ChaCha8Rng) -> Choice {
        // Canonical surface forms dominate the corpus; alternatives share
        // the remaining probability mass.
        let pick_syn = |len: usize, rng: &mut ChaCha8Rng| -> usize {
            if len == 1 || rng.gen_bool(0.5) {
                0
            } else {
                1 + rng.gen_range(0..len - 1)
            }
        };
        // The "there is" template gets too long with two trailing extras.
        let n_templates = match (scene.prop.is_some(), scene.extras.len()) {
            (true, 0 | 1) => 5,
            (true, _) => 4,
            (false, _) => 4,
        };
        let mod_take = |count: usize, rng: &mut ChaCha8Rng| -> usize {
            // Keep all modifiers most of the time, drop detail sometimes.
            match rng.gen_range(0..4u8) {
                0 => count.saturating_sub(1),
                _ => count,
            }
        };
        Choice {
            template: rng.gen_range(0..n_templates),
            animal_syn: pick_syn(ANIMALS[scene.animal].1.len(), rng),
            animal_mod_syns: scene
                .animal_mods
                .iter()
                .map(|&m| pick_syn(MODIFIERS[m].1.len(), rng))
                .collect(),
            animal_mod_take: mod_take(scene.animal_mods.len(), rng),
            prop_syn: scene.prop.map(|p| pick_syn(PROPS[p].1.len(), rng)).unwrap_or(0),
            prop_mod_syns: scene
                .prop_mods
                .iter()
                .map(|&m| pick_syn(MODIFIERS[m].1.len(), rng))
                .collect(),
            prop_mod_take: mod_take(scene.prop_mods.len(), rng),
            rel_syn: {
                let surfaces = if scene.transitive {
                    TRANSITIVE[scene.relation].1
                } else {
                    INTRANSITIVE[scene.relation].1
                };
                pick_syn(surfaces.len(), rng)
            },
            extra_syns: scene
                .extras
                .iter()
                .map(|&e| pick_syn(PROPS[e].1.len(), rng))
                .collect(),
        }
    }
}

fn render(scene: &Scene, choice: &Choice) -> String {
    let animal = ANIMALS[scene.animal].1[choice.animal_syn];
    let a_mods: Vec<&str> = scene
        .animal_mods
        .iter()
        .zip(&choice.animal_mod_syns)
        .take(choice.animal_mod_take)
        .map(|(&m, &s)| MODIFIERS[m].1[s])
        .collect();
    let a_phrase = phrase_with(&a_mods, animal);
    let rel = if scene.transitive {
        TRANSITIVE[scene.relation].1[choice.rel_syn]
    } else {
        INTRANSITIVE[scene.relation].1[choice.rel_syn]
    };

    let mut s = match (scene.prop, choice.template) {
        (Some(p), t) => {
            let prop = PROPS[p].1[choice.prop_syn];
            let p_mods: Vec<&str> = scene
                .prop_mods
                .iter()
                .zip(&choice.prop_mod_syns)
                .take(choice.prop_mod_take)
                .map(|(&m, &s)| MODIFIERS[m].1[s])
                .collect();
            let p_phrase = phrase_with(&p_mods, prop);
            match t {
                0 => format!("a {a_phrase} {rel} a {p_phrase}"),
                1 => format!("the {animal} {rel} a {p_phrase}"),
                2 => format!("a {a_phrase} {rel} the {prop}"),
                3 => format!("there is a {a_phrase} that {rel} a {prop}"),
                _ => format!("a {animal} {rel} a {p_phrase}"),
            }
        }
        (None, t) => match t {
            0 => format!("a {a_phrase} {rel}"),
            1 => format!("the {a_phrase} {rel}"),
            2 => format!("a {animal} {rel}"),
            _ => format!("there is a {a_phrase} that {rel}"),
        },
    };
    for (i, (&e, &syn)) in scene.extras.iter().zip(&choice.extra_syns).enumerate() {
        let prop = PROPS[e].1[syn];
        if i == 0 {
            s.push_str(&format!(" near a {prop}"));
        } else {
            s.push_str(&format!(" and a {prop}"));
        }
    }
    s
}

fn phrase_with(mods: &[&str], noun: &str) -> String {
    let mut parts = mods.to_vec();
    parts.push(noun);
    parts.join(" ")
}

/// Checks that a rendered sentence recovers its scene: object nouns in
/// order, the relation, and no foreign modifiers.
fn parses_back(sentence: &str, scene: &Scene) -> bool {
    let tokens = match tokenize(sentence) {
        Ok(t) => t,
        Err(_) => return false,
    };
    let noun_of = |tok: &str| -> Option<(bool, usize)> {
        for (i, (_, syns)) in ANIMALS.iter().enumerate() {
            if syns.contains(&tok) {
                return Some((true, i));
            }
        }
        for (i, (_, syns)) in PROPS.iter().enumerate() {
            if syns.contains(&tok) {
                return Some((false, i));
            }
        }
        None
    };
    let nouns: Vec<(bool, usize)> = tokens.iter().filter_map(|t| noun_of(t)).collect();

    let mut expected = vec![(true, scene.animal)];
    if let Some(p) = scene.prop {
        expected.push((false, p));
    }
    expected.extend(scene.extras.iter().map(|&e| (false, e)));
    if nouns != expected {
        return false;
    }

    let rel_surfaces = if scene.transitive {
        TRANSITIVE[scene.relation].1
    } else {
        INTRANSITIVE[scene.relation].1
    };
    if !rel_surfaces
        .iter()
        .any(|surface| sentence.contains(surface))
    {
        return false;
    }

    let allowed_mods: BTreeSet<&str> = scene
        .animal_mods
        .iter()
        .chain(scene.prop_mods.iter())
        .flat_map(|&m| MODIFIERS[m].1.iter().copied())
        .collect();
    tokens.iter().all(|t| {
        MODIFIERS
            .iter()
            .all(|(_, syns)| !syns.contains(&t.as_str()))
            || allowed_mods.contains(t.as_str())
    })
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over the combined value.
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG stream from a base seed and a label.
pub fn derived_rng(seed: u64, label: &str, stream: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(mix_seed(seed ^ h, stream))
}

/// Generates the full dataset: scenes, references, splits and attributes.
pub fn gen_dataset(cfg: &GenConfig) -> Vec<DatasetRecord> {
    assert!(cfg.num_records >= 1, "num_records must be >= 1");
    let mut records = Vec::with_capacity(cfg.num_records);
    for id in 0..cfg.num_records as u64 {
        let mut rng = derived_rng(cfg.seed, "record", id);
        let scene = sample_scene(&mut rng);
        let refs = sample_refs(&scene, &mut rng);
        for r in &refs {
            debug_assert!(parses_back(r, &scene), "unparseable reference: {r}");
        }
        let split = match id % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        };
        records.push(DatasetRecord {
            id,
            objects: scene.objects(),
            relation: scene.relation_name().to_string(),
            attributes: Vec::new(),
            refs,
            split,
        });
    }

    let train_refs: Vec<Vec<String>> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.refs.iter().map(|s| tokenize(s).expect("generated refs tokenize")))
        .collect();
    let attr_vocab = build_attr_vocab(&train_refs, cfg.attr_vocab_size);
    for rec in &mut records {
        let ref_tokens: Vec<Vec<String>> = rec
            .refs
            .iter()
            .map(|s| tokenize(s).expect("generated refs tokenize"))
            .collect();
        rec.attributes = extract_attributes(&ref_tokens, &attr_vocab);
        assert!(
            !rec.attributes.is_empty(),
            "record {} has an empty attribute set",
            rec.id
        );
    }
    records
}

fn sample_scene(rng: &mut ChaCha8Rng) -> Scene {
    // Object-count distribution: 1 obj 25%, 2 obj 50%, 3 obj 15%, 4 obj 10%.
    let roll: f64 = rng.gen();
    let n_objects = if roll < 0.25 {
        1
    } else if roll < 0.75 {
        2
    } else if roll < 0.90 {
        3
    } else {
        4
    };
    let animal = rng.gen_range(0..ANIMALS.len());
    let mut mod_pool: Vec<usize> = (0..MODIFIERS.len()).collect();
    mod_pool.shuffle(rng);
    // One or two modifiers per described object, drawn without replacement.
    let animal_mods = mod_pool[..1 + rng.gen_range(0..2usize)].to_vec();
    let prop_mods = {
        let start = animal_mods.len();
        mod_pool[start..start + 1 + rng.gen_range(0..2usize)].to_vec()
    };
    let mut prop_pool: Vec<usize> = (0..PROPS.len()).collect();
    prop_pool.shuffle(rng);
    // Relations correlate with the depicted object (80% its habitual
    // relation, 20% an exception), so they are mostly inferable from the
    // scene while staying stochastic.
    let pick_relation = |habitual: usize, count: usize, rng: &mut ChaCha8Rng| -> usize {
        if rng.gen_bool(0.8) {
            habitual
        } else {
            (habitual + 1 + rng.gen_range(0..count - 1)) % count
        }
    };
    let (prop, extras, transitive, relation) = if n_objects == 1 {
        let rel = pick_relation(animal % INTRANSITIVE.len(), INTRANSITIVE.len(), rng);
        (None, Vec::new(), false, rel)
    } else {
        let prop = prop_pool[0];
        let extras = prop_pool[1..n_objects - 1].to_vec();
        let rel = pick_relation(prop % TRANSITIVE.len(), TRANSITIVE.len(), rng);
        (Some(prop), extras, true, rel)
    };
    Scene {
        animal,
        animal_mods,
        prop,
        prop_mods: if prop.is_some() { prop_mods } else { Vec::new() },
        extras,
        relation,
        transitive,
    }
}

fn sample_refs(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<String> {
    // The first reference uses canonical forms throughout, which pins the
    // canonical words as high-frequency corpus tokens.
    let mut refs = vec![render(scene, &Choice::canonical(scene))];
    let mut seen: BTreeSet<String> = refs.iter().cloned().collect();
    let mut tries = 0;
    while refs.len() < REFS_PER_RECORD {
        let choice = Choice::random(scene, rng);
        let s = render(scene, &choice);
        if seen.insert(s.clone()) {
            refs.push(s);
        }
        tries += 1;
        assert!(tries < 1000, "reference sampling failed to find distinct surface forms");
    }
    refs
}

/// The `size` most frequent non-stopword tokens, ties broken
/// lexicographically.
pub fn build_attr_vocab(ref_tokens: &[Vec<String>], size: usize) -> BTreeSet<String> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for toks in ref_tokens {
        for t in toks {
            if !STOPWORDS.contains(&t.as_str()) {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
    }
    let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1));
    by_freq
        .into_iter()
        .take(size)
        .map(|(t, _)| t.to_owned())
        .collect()
}

/// Tokens appearing in at least one reference and in the attribute
/// vocabulary, sorted.
pub fn extract_attributes(ref_tokens: &[Vec<String>], attr_vocab: &BTreeSet<String>) -> Vec<String> {
    let mut out: BTreeSet<String> = BTreeSet::new();
    for toks in ref_tokens {
        for t in toks {
            if attr_vocab.contains(t) {
                out.insert(t.clone());
            }
        }
    }
    out.into_iter().collect()
}

/// Fraction of records with at least one shared proper prefix (length >= 1)
/// followed by two or more distinct next tokens across the references.
pub fn measure_misalignment(records: &[DatasetRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let misaligned = records.iter().filter(|r| record_is_misaligned(r)).count();
    misaligned as f64 / records.len() as f64
}

fn record_is_misaligned(record: &DatasetRecord) -> bool {
    let mut next_tokens: BTreeMap<Vec<String>, BTreeSet<String>> = BTreeMap::new();
    for r in &record.refs {
        let toks = match tokenize(r) {
            Ok(t) => t,
            Err(_) => continue,
        };
        for prefix_len in 1..toks.len() {
            next_tokens
                .entry(toks[..prefix_len].to_vec())
                .or_default()
                .insert(toks[prefix_len].clone());
        }
    }
    next_tokens.values().any(|nexts| nexts.len() >= 2)
}

pub fn write_jsonl(records: &[DatasetRecord], path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(|source| DataError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Json { line: i + 1, source })?;
        records.push(rec);
    }
    Ok(records)
}

/// Records of one split, in file order.
pub fn split_records(records: &[DatasetRecord], split: Split) -> Vec<&DatasetRecord> {
    records.iter().filter(|r| r.split == split).collect()
}
