//! Regenerates `data/body_model.json` from the fixed seed.

use scenemotion_core::body::{BodyModel, BODY_MODEL_SEED};

fn main() {
    let model = BodyModel::generate(BODY_MODEL_SEED);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/body_model.json");
    let text = serde_json::to_string_pretty(&model).expect("serialize body model");
    std::fs::write(path, text + "\n").expect("write body model");
    println!("wrote {path}");
}
