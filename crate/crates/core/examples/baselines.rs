//! Pooling and learnable-query baselines next to the slot connector.

use sfslots::baselines::{pooled_tokens, slowfast_wrap, wrapped_tokens, PoolingConnector, QueryTransformerConfig};
use sfslots::connector::{Branches, SfConnector, SfSlotsConfig, VideoFeatures};
use sfslots::params::normal;
use sfslots::rng::stream;
use sfslots::{ParamStore, Result};

fn main() -> Result<()> {
    let cfg = SfSlotsConfig::default();
    let video = VideoFeatures::new(normal(&mut stream(0, "video", 0), &[100, 16, 16, 32], 1.0))?;

    let pool = PoolingConnector::new(cfg.d_in, cfg.d_out);
    let mut store = ParamStore::new();
    pool.init(&mut store, &mut stream(0, "init", 0));
    println!("pooling: {} pre-projection tokens, output {:?}", pooled_tokens(&video).dims()[0], pool.connect(&store, &video)?.dims());

    let slots = SfConnector::new(cfg.clone())?;
    let queries = slowfast_wrap(&cfg, &QueryTransformerConfig::default())?;
    let mut s = ParamStore::new();
    slots.init(&mut s, &mut stream(0, "init", 1));
    let mut q = ParamStore::new();
    queries.init(&mut q, &mut stream(0, "init", 2));

    let video = VideoFeatures::new(normal(&mut stream(1, "video", 0), &[32, 16, 16, 32], 1.0))?;
    let slot_out = slots.run(&s, &video)?;
    let (tokens, _) = wrapped_tokens(&queries, &q, &video, Branches::Both)?;
    println!("slots emit {} tokens, queries emit {}", slot_out.tokens.dims()[0], tokens.dims()[0]);

    let query_out = queries.run(&q, &video)?;
    let (sm, qm) = (&slot_out.masks[0].mask, &query_out.masks[0].mask);
    let spread = |v: Vec<f32>| v.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    println!("slot mask: rows sum to {:?}, columns to {:?}", spread(sm.row_sums()), spread(sm.column_sums()));
    println!("query mask: rows sum to {:?}, columns to {:?}", spread(qm.row_sums()), spread(qm.column_sums()));
    println!("query mask has {} per-head masks", query_out.masks[0].head_masks.len());
    Ok(())
}
