//! Regenerates the bundled demo corpus under `fixtures/demo`.

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo");
    let demo = clc::fixtures::write_demo_corpus(&dir).expect("fixture generation");
    println!("wrote {}", demo.manifest.display());
}
