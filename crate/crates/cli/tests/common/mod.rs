#![allow(dead_code)]

use std::path::Path;

use mfnet_cli::RunConfig;

/// A configuration that trains in about a second.
pub fn small_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "arch.image_height=32",
        "arch.image_width=32",
        "arch.stem_channels=4",
        "arch.stage_channels=4,8,8,16",
        "data.count_per_class=5",
        "data.num_frames=8",
        "sample.k_train=3",
        "sample.k_eval=3",
        "optim.batch=4",
        "optim.epochs=3",
        "optim.lr_step=2",
        "optim.checkpoint_every=1",
        "seed=21",
    ] {
        c.set_assignment(kv).unwrap();
    }
    c.out_dir = out.join("run");
    c.data_path = out.join("data");
    c
}
