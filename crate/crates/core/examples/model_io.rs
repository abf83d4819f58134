//! Saves a model file, reloads it and checks the forward pass is unchanged.
//!
//! `cargo run --example model_io`

use bisup::io::ModelFile;
use bisup::model::{Model, ModelConfig};

fn main() -> bisup::Result<()> {
    let model = Model::random(&ModelConfig::default(), 21)?;
    let path = std::env::temp_dir().join("bisup-example.bsmd");
    ModelFile::plain(model.clone()).save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    let loaded = ModelFile::load(&path)?.model;

    let tokens = [0, 4, 8, 15, 16, 23, 42];
    let same = loaded.forward(&tokens)? == model.forward(&tokens)?;
    println!("{} bytes written to {}", bytes, path.display());
    println!("forward identical after reload: {same}");
    std::fs::remove_file(&path)?;
    Ok(())
}
