//! The two-branch connector: token counts, token provenance and masks.

use sfslots::connector::{Branch, Branches, SfConnector, SfSlotsConfig, VideoFeatures};
use sfslots::params::normal;
use sfslots::rng::stream;
use sfslots::{ParamStore, Result};

fn main() -> Result<()> {
    let cfg = SfSlotsConfig::default();
    let conn = SfConnector::new(cfg.clone())?;
    let mut store = ParamStore::new();
    conn.init(&mut store, &mut stream(0, "init", 0));
    println!("{} parameters", store.num_scalars());

    for frames in [8, 32, 180] {
        let video = VideoFeatures::new(normal(&mut stream(0, "video", frames as u64), &[frames, 16, 16, 32], 1.0))?;
        let out = conn.run(&store, &video)?;
        let slow = out.provenance.iter().filter(|p| p.branch == Branch::Slow).count();
        println!(
            "T={frames:>3}: tokens {:?} ({slow} slow + {} fast), {} masks",
            out.tokens.dims(),
            out.provenance.len() - slow,
            out.masks.len()
        );
    }

    let video = VideoFeatures::new(normal(&mut stream(1, "video", 0), &[32, 16, 16, 32], 1.0))?;
    let out = conn.run_branches(&store, &video, Branches::Fast)?;
    let first = &out.masks[0];
    println!(
        "fast position {}: mask over {} frames x {} slots",
        first.source,
        first.mask.n_inputs(),
        first.mask.n_slots()
    );
    println!("a fast-only run starts with {:?}", &out.provenance[..2]);
    println!("slow-only {} tokens, fast-only {} tokens", cfg.tokens_for(Branches::Slow), cfg.tokens_for(Branches::Fast));
    Ok(())
}
