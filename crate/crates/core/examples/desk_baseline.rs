//! Trains (or resumes) the desk reference run, prints metrics after every
//! epoch and writes the final ones to `acceptance/desk_baseline.json`.
//!
//! cargo run --release -p jigwm --example desk_baseline

use std::path::PathBuf;

use jigwm::desk;
use jigwm::train::RunConfig;
use serde_json::json;

fn main() -> jigwm::Result<()> {
    let cfg = RunConfig::desk();
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = root.join("target/tmp").join(format!("desk-{}", desk::fingerprint(&cfg)));
    println!("run directory {}", dir.display());
    let heldout = desk::heldout_set();
    let key = desk::eval_key();
    let start = std::time::Instant::now();
    let model = desk::train(&cfg, &dir, |tr| {
        let m = desk::measure(&tr.model, &heldout, &key, tr.epoch)?;
        println!("{:>7.0}s {}", start.elapsed().as_secs_f64(), serde_json::to_string(&m)?);
        Ok(())
    })?;
    let m = desk::measure(&model, &heldout, &key, cfg.train.epochs)?;
    let out = root.join("acceptance/desk_baseline.json");
    std::fs::create_dir_all(out.parent().expect("has parent")).map_err(|e| jigwm::Error::io(&out, e))?;
    let record = json!({
        "fingerprint": desk::fingerprint(&cfg),
        "train_seconds_this_invocation": start.elapsed().as_secs(),
        "metrics": m,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| jigwm::Error::io(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}
