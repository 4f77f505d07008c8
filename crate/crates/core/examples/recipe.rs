//! The full three-stage recipe for the slot and query connectors plus the
//! pooling baseline, on a small grid, ending in a comparison table.

use sfslots::config::{ConnectorKind, RunConfig};
use sfslots::connector::{Branch, Branches};
use sfslots::metrics::compare_table;
use sfslots::training::{evaluate, run_pipeline, run_pooling, Budget};
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
    cfg.stage.log_every = 100;
    cfg.eval.scenes = 20;
    let budget = Budget {
        stage1: 200,
        stage2: 100,
        stage3: 100,
    };

    let mut reports = Vec::new();
    for kind in [ConnectorKind::SfSlots, ConnectorKind::QueryTransformer] {
        let run = run_pipeline(&cfg, kind, budget)?;
        for (name, log) in &run.logs {
            if let Some(last) = log.last() {
                println!("{} {name}: {last}", kind.name());
            }
        }
        for b in [Branch::Slow, Branch::Fast] {
            let r = evaluate(&cfg, kind, &run.stage2[&b].store, b.into())?;
            println!("{} {}-only accuracy {:.3}", kind.name(), b.name(), r.accuracy.unwrap_or(f64::NAN));
        }
        reports.push(evaluate(&cfg, kind, &run.joint.store, Branches::Both)?);
    }
    let pooling = run_pooling(&cfg, budget.stage2)?;
    reports.push(evaluate(&cfg, ConnectorKind::Pooling, &pooling.state.store, Branches::Both)?);

    print!("{}", compare_table(&reports));
    println!("majority-class accuracy {:.3}", reports[0].majority.unwrap_or(f64::NAN));
    Ok(())
}
