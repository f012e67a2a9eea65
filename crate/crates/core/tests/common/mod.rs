use serde_json::json;
use stmae::pipeline::RunConfig;

/// A 32x32 run small enough to train in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig::from_value(json!({
        "seed": seed,
        "data": {
            "source": "synthetic",
            "suite": {
                "width": 32, "height": 32,
                "train_videos": 2, "train_frames": 9,
                "test_videos": 2, "test_frames": 16,
                "sprites_per_scene": 1, "sprite_size": 6.0, "speeds": [1.0],
                "anomaly_length": 4,
                "anomaly_kinds": [{ "type": "speed_up", "factor": 4.0 }, { "type": "teleport" }]
            }
        },
        "architecture": {
            "resolution": [32, 32],
            "encoder_channels": [4, 4, 8, 8, 8],
            "discriminator_channels": [4, 4, 4]
        },
        "memory": { "n_items": 6, "k_top": 3 },
        "schedule": { "batch_size": 4, "pretrain_epochs": 1, "main_epochs": 2 },
        "scoring": { "error_maps": 2 }
    }), &[])
    .unwrap()
}
