//! Slot attention on one noiseless synthetic frame: mask normalization,
//! hard assignments against the object labels, and slot permutation.

use sfslots::metrics::{ari, hard_assign};
use sfslots::params::normal;
use sfslots::rng::stream;
use sfslots::slot_attention::{permute_slots_check, AttentionMask, MaskLayout, SlotAttention, SlotAttentionConfig};
use sfslots::synthetic::{Dataset, SceneRanges};
use sfslots::{ParamStore, Result};

fn main() -> Result<()> {
    let ranges = SceneRanges {
        noise: 0.0,
        ..Default::default()
    };
    let scene = Dataset::new(1, ranges)?.scene(0)?;
    let frame = scene.video.frame(0);

    let cfg = SlotAttentionConfig {
        init_std: 1.0,
        ..Default::default()
    };
    let sa = SlotAttention::new("sa", cfg)?;
    let mut store = ParamStore::new();
    sa.init(&mut store, &mut stream(0, "init", 0));
    let (slots, mask) = sa.run(&store, &frame)?;
    let mask = AttentionMask::new(mask, MaskLayout::Spatial { height: 16, width: 16 })?;

    println!("slots {:?}, mask {:?}", slots.dims(), mask.weights.dims());
    let worst = mask.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f32::max);
    println!("largest row-sum error: {worst:.2e}");
    println!("slot masses: {:?}", mask.column_sums());

    let assign = hard_assign(&mask);
    let truth = scene.truth.frame_objects(0);
    println!("untrained ARI against {} objects: {:.3}", scene.truth.n_objects, ari(&assign, truth)?);
    for y in 0..16 {
        let row: String = (0..16).map(|x| char::from(b'0' + assign[y * 16 + x] as u8)).collect();
        let labels: String = (0..16).map(|x| char::from(b'0' + truth[y * 16 + x] as u8)).collect();
        println!("{row}   {labels}");
    }

    let inputs = normal(&mut stream(0, "inputs", 0), &[40, 32], 1.0);
    let perm = [7, 6, 5, 4, 3, 2, 1, 0];
    println!("permutation equivariance: {}", permute_slots_check(&sa, &store, &inputs, &perm, 1e-5)?);
    Ok(())
}
