//! Write a model to the binary weight format, read it back, and show what a
//! damaged file reports.

use specverify::harness::io;
use specverify::model::{Model, ModelConfig};

fn main() -> specverify::Result<()> {
    let model = Model::seeded(ModelConfig::default(), 1)?;
    let path = std::env::temp_dir().join("specverify-example.svwt");
    io::save_weights(&path, &model)?;
    let back = io::load_weights(&path)?;
    println!(
        "{} bytes, identical after reload: {}",
        std::fs::metadata(&path)?.len(),
        back == model
    );

    let mut bytes = std::fs::read(&path)?;
    bytes.truncate(bytes.len() - 100);
    match io::decode_weights(&bytes) {
        Ok(_) => println!("truncated file decoded?"),
        Err(e) => println!("truncated file: {e}"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
