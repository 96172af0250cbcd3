//! Trains a small model on procedural faces and reports protection and
//! recovery quality on held-out faces.
//!
//! cargo run --release --example toy_train -- randwr 2000 [key=value ...]

use std::time::Instant;

use proface::flow::WrongRecoveryMode;
use proface::metrics::{psnr, random_key_except};
use proface::obfuscators::{ObfuscatorKind, ObfuscatorSpec, SamplerMode};
use proface::pipeline::{protect, recover, Template};
use proface::keygen::SecretKey;
use proface::trainer::{procedural_faces, TrainConfig, Trainer};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig {
        mode: WrongRecoveryMode::parse(args.first().map(String::as_str).unwrap_or("randwr"))?,
        steps: args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(2000),
        side: 32,
        obfuscators: vec![ObfuscatorKind::Pixelate],
        obfuscator_params: SamplerMode::Eval,
        ..TrainConfig::default()
    };
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').ok_or("expected key=value")?;
        cfg.set(k, v)?;
    }
    print!("{}", cfg.to_text());

    let mut trainer = Trainer::new(cfg.clone(), procedural_faces(200, cfg.side, 1))?;
    let start = Instant::now();
    for step in 0..cfg.steps {
        let r = trainer.step()?;
        if step < 10 || (step + 1) % 100 == 0 {
            println!(
                "step {:5} L_P {:.5} L_R {:.5} L_WR {:.5} total {:.5} ({:.1}s)",
                r.step,
                r.protection,
                r.recovery,
                r.wrong_recovery,
                r.total,
                start.elapsed().as_secs_f64()
            );
        }
    }

    let model = trainer.model();
    let spec = ObfuscatorSpec::Pixelate { block: 9 };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let key = SecretKey::new("toy password")?;
    let (mut prot, mut rec, mut wrong_x, mut wrong_y) = (0.0, 0.0, 0.0, 0.0);
    let held_out = procedural_faces(20, cfg.side, 99);
    for x in &held_out {
        let out = protect(model, x, Template::Obfuscate(&spec), &key)?;
        let good = recover(model, &out.protected, &key)?;
        let bad = recover(model, &out.protected, &random_key_except(&key, &mut rng))?;
        prot += psnr(&out.protected, &out.template)?;
        rec += psnr(&good.recovered, x)?;
        wrong_x += psnr(&bad.recovered, x)?;
        wrong_y += psnr(&bad.recovered, &out.template)?;
    }
    let n = held_out.len() as f64;
    println!(
        "held-out PSNR: protected/template {:.2} recovered/original {:.2} wrong/original {:.2} wrong/template {:.2}",
        prot / n,
        rec / n,
        wrong_x / n,
        wrong_y / n
    );
    Ok(())
}
