//! Run the three-model comparison on the toy world for a few seeds.

use std::time::Instant;

use attnaug::experiment::{self, ExperimentConfig, BASELINE, MIXED, UNCONDITIONED};

fn main() {
    if std::env::args().nth(1).as_deref() == Some("dump") {
        println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default()).unwrap());
        return;
    }
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let base: ExperimentConfig = match std::env::args().nth(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap(),
        None => ExperimentConfig::default(),
    };
    let mut stats: Vec<[Vec<f64>; 3]> = vec![Default::default(), Default::default(), Default::default()];
    for seed in 0..seeds {
        let t = Instant::now();
        let out = experiment::run(&base.with_seed(seed)).unwrap();
        println!(
            "seed {seed}: {:.1}s conditioned {}→{} unconditioned {}→{} pretrain {} steps {:?}",
            t.elapsed().as_secs_f64(),
            out.conditioned_generated,
            out.conditioned_filter.after_hardness,
            out.unconditioned_generated,
            out.unconditioned_filter.after_hardness,
            out.pretrain_size,
            out.steps
        );
        println!(
            "  probe hi {:.3} lo {:.3} (n={})",
            out.probe.mean_score_highest_entity_q, out.probe.mean_score_lowest_entity_q, out.probe.evaluated
        );
        for (i, tag) in [BASELINE, UNCONDITIONED, MIXED].into_iter().enumerate() {
            let r = out.comparison.reports.iter().find(|r| r.model == tag).unwrap();
            let curve = &out.runs.iter().find(|m| m.tag == tag).unwrap().curves;
            let losses: Vec<String> = curve
                .iter()
                .map(|c| format!("{}:{:.3}->{:.3}", c.phase, c.epoch_losses[0], c.epoch_losses.last().unwrap()))
                .collect();
            println!(
                "  {tag:14} H {:.4} first {:.4} rest {:.4} share {:.4} top1 {:.1} top5 {:.1} pos {:.2}/{:.2} {}",
                r.attention.mean_entropy,
                r.attention.mean_first,
                r.attention.mean_rest,
                r.attention.mean_rest_share,
                r.accuracy("full", 1).unwrap(),
                r.accuracy("full", 5).unwrap(),
                r.attention.positional.frac_highest_in_first_half,
                r.attention.positional.frac_lowest_in_second_half,
                losses.join(" ")
            );
            stats[i][0].push(r.attention.mean_entropy);
            stats[i][1].push(r.attention.mean_rest_share);
            stats[i][2].push(r.accuracy("full", 5).unwrap());
        }
    }
    for (i, tag) in [BASELINE, UNCONDITIONED, MIXED].into_iter().enumerate() {
        println!(
            "median {tag:14} H {:.4} share {:.4} top5 {:.1}",
            experiment::median(&stats[i][0]),
            experiment::median(&stats[i][1]),
            experiment::median(&stats[i][2])
        );
    }
}
