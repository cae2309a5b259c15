//! Write one small sample of every on-disk format the crate speaks:
//! a P6 PPM, a PNG, a coefficient blob with its text header, a checkpoint,
//! a dataset manifest line, and a TOML run config.
//!
//! Usage: cargo run --example formats_demo -- <out_dir>

use std::path::PathBuf;

use adept_core::checkpoint::{encode_checkpoint, CheckpointEntry};
use adept_core::config::RunConfig;
use adept_core::dct::build_dct_map;
use adept_core::imageio::{encode_png, encode_ppm};
use adept_core::synthdata::{to_manifest_line, Dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "format_samples".into()));
    std::fs::create_dir_all(&out)?;

    let dataset = Dataset::new(DatasetConfig { canvas: 16, patch: 8, seed: 5 });
    let scene = dataset.scene(0)?;

    std::fs::write(out.join("sample.ppm"), encode_ppm(&scene.image))?;
    std::fs::write(out.join("sample.png"), encode_png(&scene.image)?)?;

    let map = build_dct_map(&scene.image, 8)?;
    adept_core::dct::write_dct_blob(&map, &out.join("sample"))?;

    let entries = vec![
        CheckpointEntry { name: "demo.w".into(), shape: vec![2, 2], data: vec![1.0, -0.5, 0.25, 2.0] },
        CheckpointEntry { name: "demo.b".into(), shape: vec![2], data: vec![0.0, 1.5] },
    ];
    std::fs::write(out.join("sample.ckpt"), encode_checkpoint(&entries)?)?;

    let line = to_manifest_line(&dataset.entry(0)?);
    std::fs::write(out.join("sample.manifest.jsonl"), format!("{line}\n"))?;

    std::fs::write(out.join("sample.toml"), RunConfig::default().to_toml_string())?;

    println!("wrote format samples to {}", out.display());
    Ok(())
}
