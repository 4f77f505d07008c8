//! Attention masks rendered as PGM images, and a checkpoint round trip
//! with corruption detection.

use sfslots::checkpoint::{load_checkpoint, save_checkpoint};
use sfslots::connector::{SfConnector, SfSlotsConfig};
use sfslots::render::{render_masks, INDEX_FILE};
use sfslots::rng::stream;
use sfslots::synthetic::{Dataset, SceneRanges};
use sfslots::{ParamStore, Result};

fn main() -> Result<()> {
    let scene = Dataset::new(0, SceneRanges::default())?.scene(0)?;
    let conn = SfConnector::new(SfSlotsConfig::default())?;
    let mut store = ParamStore::new();
    conn.init(&mut store, &mut stream(0, "init", 0));
    let out = conn.run(&store, &scene.video)?;

    let dir = std::env::temp_dir().join("sfslots-example-masks");
    let entries = render_masks(&out.masks, &dir)?;
    println!("{} images in {}", entries.len(), dir.display());
    for line in std::fs::read_to_string(dir.join(INDEX_FILE))?.lines().take(4) {
        println!("  {line}");
    }

    let path = dir.join("connector.sfsl");
    save_checkpoint(&store, &path)?;
    let back = load_checkpoint(&path)?;
    println!("round trip exact: {}", back == store);
    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, bytes)?;
    match load_checkpoint(&path) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted file rejected: {e}"),
    }
    Ok(())
}
