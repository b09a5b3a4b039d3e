//! The checkpoint format is a JSON manifest (config + tensor directory)
//! next to a raw little-endian blob. Writes are byte-deterministic: the
//! same parameters serialize to the same bytes, so checkpoints can be
//! compared with a plain hash. This example saves a model, reloads it,
//! verifies bit-exactness, and shows the manifest layout.
//!
//! Run with: cargo run --example checkpoint_roundtrip

use hyperadapt::model::{load_checkpoint, save_checkpoint, MainNetwork, ModelConfig};

fn sha_like(bytes: &[u8]) -> u64 {
    hyperadapt::numerics::fnv1a(bytes)
}

fn main() {
    let config = ModelConfig::tiny(40);
    let net = MainNetwork::<f32>::init(config.clone(), 5).unwrap();
    println!(
        "model: {} named tensors, {} parameters",
        net.params.len(),
        net.params.total_params()
    );

    let dir = std::env::temp_dir().join("hyperadapt-ckpt-demo");
    std::fs::create_dir_all(&dir).unwrap();
    let manifest = dir.join("main.manifest");
    let blob = dir.join("main.bin");

    save_checkpoint(&manifest, &blob, &config, &net.params).unwrap();
    let first_manifest = std::fs::read(&manifest).unwrap();
    let first_blob = std::fs::read(&blob).unwrap();
    println!(
        "wrote {} ({} bytes) and {} ({} bytes)",
        manifest.display(),
        first_manifest.len(),
        blob.display(),
        first_blob.len()
    );

    // Reload: config and every tensor come back bit-identical.
    let (loaded_config, loaded_params) =
        load_checkpoint::<f32, ModelConfig>(&manifest, &blob).unwrap();
    assert_eq!(loaded_config, config);
    let reloaded = MainNetwork { config: loaded_config, params: loaded_params };
    assert_eq!(reloaded.checksum(), net.checksum());
    println!("reload checksum matches: {:016x}", reloaded.checksum());

    // Re-save from the reloaded store: byte-identical files.
    save_checkpoint(&manifest, &blob, &config, &reloaded.params).unwrap();
    assert_eq!(std::fs::read(&manifest).unwrap(), first_manifest);
    assert_eq!(std::fs::read(&blob).unwrap(), first_blob);
    println!(
        "re-save is byte-identical (manifest fnv {:016x}, blob fnv {:016x})",
        sha_like(&first_manifest),
        sha_like(&first_blob)
    );

    // Peek at the manifest: version, embedded config, tensor directory.
    let v: serde_json::Value = serde_json::from_slice(&first_manifest).unwrap();
    println!("\nmanifest format_version {}, first tensor entries:", v["format_version"]);
    for entry in v["tensors"].as_array().unwrap().iter().take(4) {
        println!(
            "  {:28} shape {:10} dtype {} offset {:5} length {}",
            entry["name"].to_string(),
            entry["shape"].to_string(),
            entry["dtype"],
            entry["offset"],
            entry["length"]
        );
    }
}
