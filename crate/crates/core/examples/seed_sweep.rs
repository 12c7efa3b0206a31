//! Runs every strategy arm over a range of seeds and prints the EMR_3 table.
//!
//!     cargo run --release -p fedvocab --example seed_sweep -- configs/desk.json 5
//!
//! Set FLLOG=1 for per-round federated losses, DETAIL=1 for the grid points
//! clients chose, ASUNK=1 to run only the as-unk arm.

use std::time::Instant;

use fedvocab::personalize::Strategy;
use fedvocab::pipeline::{run_experiment, Arm, ExperimentConfig};

fn main() {
    let text = std::fs::read_to_string(std::env::args().nth(1).expect("config path")).unwrap();
    let base: ExperimentConfig = serde_json::from_str(&text).unwrap();
    let seeds: u64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let arms = [
        Arm { strategy: Strategy::OovAsUnk, identity_adapter: false },
        Arm { strategy: Strategy::OovExpansion, identity_adapter: false },
        Arm { strategy: Strategy::OovExpansion, identity_adapter: true },
        Arm { strategy: Strategy::OovOracle, identity_adapter: false },
    ];
    let arms: Vec<Arm> = if std::env::var("ASUNK").is_ok() { arms[..1].to_vec() } else { arms.to_vec() };
    for seed in 0..seeds {
        let t = Instant::now();
        let cfg = base.clone().with_seed(seed);
        let out = run_experiment::<f64>(&cfg, &arms).unwrap();
        let fl = &out.closed.fl;
        if std::env::var("FLLOG").is_ok() {
            println!("pretrain {:?}", out.closed.pretrain_losses);
            for l in &fl.logs {
                println!("  round {} loss {:.4} val {:?}", l.round_index, l.mean_client_loss, l.val_emr3);
            }
        }
        print!(
            "seed {seed} [{:.1}s] test={} fl {:.4}->{:.4} |",
            t.elapsed().as_secs_f64(),
            out.reports[0].1.results.len(),
            fl.initial_val_emr,
            fl.best_val_emr
        );
        for (label, r) in &out.reports {
            print!(" {label}: {:.4}->{:.4} oov {:.3}->{:.3} |", r.before.emr(3), r.after.emr(3), r.before.oov_rate, r.after.oov_rate);
        }
        println!();
        if std::env::var("DETAIL").is_ok() {
            for (label, r) in &out.reports {
                let mut chosen = std::collections::BTreeMap::new();
                for c in &r.results {
                    let key = format!("{:?}/{:?}/e{}", c.chosen.as_ref().map(|p| p.lr), c.chosen.as_ref().and_then(|p| p.sigma), c.best_epoch);
                    *chosen.entry(key).or_insert(0) += 1;
                }
                println!("  {label}: {chosen:?}");
            }
        }
    }
}
