//! Writes the bundled synthetic keyword dataset.
//!
//! The label is carried redundantly: the description contains the token
//! `alpha` exactly for class 1, the caption calls the item striped or plain
//! (85% agreement) and the material column is steel or wood (80% agreement).
//!
//! Usage: cargo run -p textalign --example gen_synthetic -- <out_dir> [n] [seed]

use std::fs;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLER: &[&str] = &[
    "the", "item", "was", "found", "near", "a", "quiet", "market", "and", "looks", "well", "kept", "with", "some",
    "light", "wear", "on", "edges", "it", "ships", "from", "our", "small", "shop", "today", "buyer", "will", "enjoy",
    "this", "piece", "for", "many", "years", "great", "gift", "idea", "simple", "design", "sturdy", "build", "feels",
    "solid", "in", "hand", "ideal", "home", "office", "use", "every", "day", "comes", "boxed", "no", "returns",
];
const COLORS: &[&str] = &["red", "green", "blue", "black", "white", "grey"];
const SIZES: &[&str] = &["small", "medium", "large"];
const ORIGINS: &[&str] = &["Portugal", "Kenya", "Vietnam", "Chile", "Norway", "Canada"];
const OBJECTS: &[&str] = &["box", "lamp", "chair", "vase", "bowl", "stool"];
const SURFACES: &[&str] = &["table", "shelf", "floor", "bench"];

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic".into()));
    let n: usize = args.next().map_or(1000, |s| s.parse().expect("n"));
    let seed: u64 = args.next().map_or(20240611, |s| s.parse().expect("seed"));
    fs::create_dir_all(&out).expect("create output dir");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut csv = csv::Writer::from_path(out.join("records.csv")).expect("open csv");
    csv.write_record(["id", "color", "size", "weight", "material", "origin", "description", "label"]).unwrap();
    let mut captions = String::new();
    for i in 0..n {
        let id = format!("s{i:04}");
        let label = usize::from(rng.random_bool(0.5));

        let mut words: Vec<&str> = (0..rng.random_range(14..26)).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
        if label == 1 {
            for _ in 0..rng.random_range(1..=2) {
                let at = rng.random_range(0..=words.len());
                words.insert(at, "alpha");
            }
        }
        let mut description = words.join(" ");
        description.push('.');

        let agrees = |rng: &mut ChaCha8Rng, p: f64| if rng.random_bool(p) { label } else { 1 - label };
        let material = ["wood", "steel"][agrees(&mut rng, 0.8)];
        let pattern = ["plain", "striped"][agrees(&mut rng, 0.85)];
        let mut cell = |v: String| if rng.random_bool(0.05) { String::new() } else { v };
        let color = cell(COLORS.choose(&mut ChaCha8Rng::seed_from_u64(seed ^ i as u64)).unwrap().to_string());
        let size = cell(SIZES[i % SIZES.len()].to_string());
        let weight = cell(format!("{:.1}", 0.5 + (i % 37) as f64 * 0.25));
        let origin = cell(ORIGINS[(i * 7) % ORIGINS.len()].to_string());
        csv.write_record([&id, &color, &size, &weight, material, &origin, &description, &label.to_string()]).unwrap();

        let object = OBJECTS.choose(&mut rng).unwrap();
        let surface = SURFACES.choose(&mut rng).unwrap();
        let caption = format!("A photo of a {pattern} {object} on a {surface}. The lighting is soft and even.");
        captions.push_str(&serde_json::json!({"id": id, "caption": caption}).to_string());
        captions.push('\n');
    }
    csv.flush().unwrap();
    fs::write(out.join("captions.jsonl"), captions).unwrap();
    let schema = serde_json::json!({
        "id_column": "id",
        "label_column": "label",
        "label_cardinality": 2,
        "text_column": "description",
        "columns": [
            {"name": "color", "description": "colour of the item", "kind": "categorical"},
            {"name": "size", "description": "size of the item", "kind": "categorical"},
            {"name": "weight", "description": "weight of the item in kilograms", "kind": "numeric"},
            {"name": "material", "description": "material of the item", "kind": "categorical"},
            {"name": "origin", "description": "country of origin", "kind": "categorical"}
        ]
    });
    fs::write(out.join("schema.json"), serde_json::to_string_pretty(&schema).unwrap() + "\n").unwrap();
    eprintln!("wrote {n} records to {}", out.display());
}
