//! Reconstruction pretraining of the slow branch on a small grid, with the
//! held-out reconstruction error before and after.

use sfslots::config::{ConnectorKind, RunConfig};
use sfslots::connector::{Aggregator, Branch};
use sfslots::training::{eval_recon, eval_scenes, stage1_pretrain, Model};
use sfslots::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.connector.height = 8;
    cfg.connector.width = 8;
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.data.frames = 16;
    cfg.data.extent = (2, 4);
    cfg.probe.event_position = 1;
    cfg.stage.steps = 300;
    cfg.stage.log_every = 50;
    cfg.eval.scenes = 8;

    let model = Model::new(&cfg, ConnectorKind::SfSlots)?;
    let (held, _) = eval_scenes(&cfg)?;
    let before = eval_recon(&model, &model.init(cfg.seed), Branch::Slow, &held)?;
    let run = stage1_pretrain(&cfg, Branch::Slow, None)?;
    for r in &run.log {
        println!("{r}");
    }
    let after = eval_recon(&model, &run.state.store, Branch::Slow, &held)?;
    println!("held-out MSE {before:.4} -> {after:.4} ({:.1}%)", 100.0 * after / before);

    let Aggregator::Slots(sa) = &model.connector.slow else {
        unreachable!("slot connector")
    };
    let (slots, _) = sa.run(&run.state.store, &held[0].video.frame(0))?;
    let (recon, attention) = model.decoder(Branch::Slow).run(&run.state.store, &slots)?;
    println!("decoded {:?} from {:?} slots, {} attention maps", recon.dims(), slots.dims(), attention.len());
    Ok(())
}
