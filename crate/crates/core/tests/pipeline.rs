use std::collections::BTreeSet;

use vsyn::synopsis::{run_synopsis, Execution, SynopsisConfig};
use vsyn::synthgen::{generate, AgentSpec, SceneScript};
use vsyn::video_io::open_sequence;
use vsyn::Config;

fn walker(y: f64, frames: std::ops::Range<u64>) -> AgentSpec {
    AgentSpec {
        size: [16, 12],
        start: [4.0, y],
        velocity: [2.0, 0.0],
        start_frame: frames.start,
        end_frame: frames.end,
        level: 220.0,
        texture: 30.0,
    }
}

fn scene_with(agents: Vec<AgentSpec>, frames: u64) -> SceneScript {
    let mut s = SceneScript::new(160, 96, frames, 18.0);
    s.seed = 3;
    s.background.texture = 20.0;
    s.agents = agents;
    s
}

#[test]
fn stored_sequence_matches_in_memory_run() {
    let scene = generate(&scene_with(vec![walker(10.0, 110..170), walker(60.0, 130..180)], 200)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write_to(dir.path()).unwrap();

    let config = SynopsisConfig { cluster_size: 2, ..SynopsisConfig::default() };
    let source = open_sequence(dir.path(), None).unwrap();
    let meta = source.meta().clone();
    assert_eq!(meta.frame_count, 200);
    let from_disk = run_synopsis(source, &meta, &config, Execution::Sequential, |_| Ok(())).unwrap();
    let in_memory = run_synopsis(scene.frames(), &scene.meta(), &config, Execution::Sequential, |_| Ok(())).unwrap();
    assert_eq!(from_disk.manifest.without_timing().frames, in_memory.manifest.without_timing().frames);
    assert_eq!(from_disk.tubes.len(), 2);
}

// A long-lived object finishes after shorter ones that started later, so its
// tube reaches the scheduler late and still needs its early background.
#[test]
fn nested_lifetimes_keep_the_backgrounds_they_need() {
    let agents = vec![walker(4.0, 105..175), walker(30.0, 115..130), walker(56.0, 140..150), walker(78.0, 160..172)];
    let scene = generate(&scene_with(agents, 220)).unwrap();
    for cs in [1, 2, 4] {
        let config = SynopsisConfig { cluster_size: cs, bg_snapshot_interval: 5, ..SynopsisConfig::default() };
        let mut rendered = 0;
        let run = run_synopsis(scene.frames(), &scene.meta(), &config, Execution::Concurrent, |_| {
            rendered += 1;
            Ok(())
        })
        .unwrap_or_else(|e| panic!("cluster size {cs}: {e}"));
        assert_eq!(run.manifest.summary.tsv, rendered);
        let placed: BTreeSet<(u32, u64)> = run.manifest.placed_object_frames().collect();
        let expected: usize = run.tubes.iter().map(|t| t.frames.len()).sum();
        assert_eq!(placed.len(), expected, "cluster size {cs}");
    }
}

#[test]
fn config_file_drives_the_synopsis_settings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, r#"{"synopsis": {"cluster_size": 3}, "regions": {"min_area_frac": 0.001}}"#).unwrap();
    let config = Config::load(&path).unwrap();
    let sc = config.synopsis_config();
    assert_eq!(sc.cluster_size, 3);
    assert_eq!(sc.regions.min_area_frac, 0.001);

    std::fs::write(&path, r#"{"synopsis": {"cluster_size": 0}}"#).unwrap();
    assert!(Config::load(&path).is_err());
    std::fs::write(&path, r#"{"synopsys": {}}"#).unwrap();
    assert!(Config::load(&path).is_err());
}
