//! Quick look at batch statistics for both policy pairs.

use herdcast_core::ingest::Expertise;
use herdcast_core::sim::{gathering_time, run_batch, PolicyKind, WorldConfig};

fn main() {
    for expertise in [Expertise::Expert, Expertise::Novice] {
        let cfg = WorldConfig::for_expertise(expertise);
        let policy = PolicyKind::for_expertise(expertise);
        let trials = run_batch(&cfg, [policy, policy], 2024, 100, "probe").unwrap();
        let successes: Vec<_> = trials.iter().filter(|t| t.success).collect();
        let times: Vec<f64> = successes.iter().map(|t| gathering_time(t)).collect();
        let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
        let sd = (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / times.len().max(1) as f64)
            .sqrt();

        // label-change statistics over success trials
        let mut changes = 0usize;
        let mut frames = 0usize;
        let mut windows = [0usize; 4]; // NT-NS, NT-S, T-NS, T-S at stride 2, hor 16
        let stride = 2usize;
        let t_hor = 16usize;
        for t in &successes {
            for h in 0..2 {
                let labels: Vec<u8> = t.frames.iter().map(|f| f.labels.unwrap()[h]).collect();
                frames += labels.len();
                changes += labels.windows(2).filter(|w| w[0] != w[1]).count();
                let span = 24 * stride;
                if labels.len() > span + t_hor * stride {
                    for t_f in span..labels.len() - t_hor * stride {
                        let win: Vec<u8> =
                            (0..25).map(|j| labels[t_f - span + j * stride]).collect();
                        let transitioning = win.iter().any(|&l| l != win[0]);
                        let switching = labels[t_f + t_hor * stride] != labels[t_f];
                        let idx = match (transitioning, switching) {
                            (false, false) => 0,
                            (false, true) => 1,
                            (true, false) => 2,
                            (true, true) => 3,
                        };
                        windows[idx] += 1;
                    }
                }
            }
        }
        let total_windows: usize = windows.iter().sum();
        println!(
            "{expertise}: {}/{} success, t_g mean {mean:.1}s sd {sd:.1}s, label changes/frame {:.4}",
            successes.len(),
            trials.len(),
            changes as f64 / frames.max(1) as f64
        );
        println!(
            "  windows total {total_windows}: NT-NS {:.1}% NT-S {:.1}% T-NS {:.1}% T-S {:.1}%",
            100.0 * windows[0] as f64 / total_windows.max(1) as f64,
            100.0 * windows[1] as f64 / total_windows.max(1) as f64,
            100.0 * windows[2] as f64 / total_windows.max(1) as f64,
            100.0 * windows[3] as f64 / total_windows.max(1) as f64,
        );
    }
}
