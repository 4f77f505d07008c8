//! A synthetic scene: object layout, segment labels, probe answers, and a
//! round trip through the tensor container.

use sfslots::config::RunConfig;
use sfslots::synthetic::{export_scene, gen_probe_task, import_scene, Dataset, TaskId};
use sfslots::Result;

fn main() -> Result<()> {
    let cfg = RunConfig::default();
    let data = Dataset::new(cfg.seed, cfg.data.clone())?;
    let scene = data.scene(3)?;
    let truth = &scene.truth;
    println!("scene {}: {} objects, video {:?}", scene.index, truth.n_objects, scene.video.dims());
    for t in [0, truth.frames - 1] {
        println!("frame {t}:");
        for y in 0..truth.height {
            let row: String = (0..truth.width)
                .map(|x| match truth.object_at(t, y, x) {
                    0 => '.',
                    k => char::from(b'0' + k as u8),
                })
                .collect();
            println!("  {row}");
        }
    }
    let k = cfg.probe.event_position;
    println!("segments at position {k}: {:?}", truth.position_segments(k));
    for task in TaskId::ALL {
        println!("{}: {}", task.name(), gen_probe_task(truth, &cfg.probe, task));
    }

    let dir = std::env::temp_dir().join("sfslots-example-scene");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scene.sfsl");
    export_scene(&scene, &path)?;
    let (video, back) = import_scene(&path)?;
    println!("round trip exact: {}", video.grid == scene.video.grid && &back == truth);
    println!("held-out stream differs: {}", data.held_out().scene(3)?.video.grid != scene.video.grid);
    Ok(())
}
