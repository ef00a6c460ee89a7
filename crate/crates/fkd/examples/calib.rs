// calibration probe for the synthetic homophily sweep
use fkd::framelet::*;
use fkd::graph::*;
use fkd::student::*;
use fkd::teacher::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let feature_scale: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(100);
    let t_all = Instant::now();

    for &h in &[0.0, 0.1, 0.3, 0.5, 0.8] {
        let (mut t_sp, mut t_si, mut s_o, mut s_s) = (0.0, 0.0, 0.0, 0.0);
        let (mut a_o, mut a_s, mut a_oh, mut a_sh) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..seeds {
            let p = SyntheticParams { n, c: 7, d0: 50, avg_degree: 4.0, target_h: h, feature_scale };
            let g = generate_synthetic(&p, 1000 + seed).unwrap();
            let ops = normalized_operators(&g);
            let fb = haar_filter_bank(1, 1, 2.0);
            let fs = exact_framelet_matrices(&ops, &fb).unwrap();
            let ba = band_adjacencies(&fs, &ops, 2);
            let masks = split_masks(&g, SplitMode::Ratio { train: 0.2, val: 0.2, test: 0.6 }, 1000 + seed).unwrap();

            let tc = |kind| TeacherConfig { kind, depth: 2, hidden: 16, lr: 0.05, weight_decay: 0.01, epochs, dropout: 0.0, eps: 0.0, seed: 1000 + seed };
            let spat = train_teacher(&g.x, &g.y, g.c, &masks, &fs, &ba, &ops, &tc(TeacherKind::Spatial)).unwrap();
            let simp = train_teacher(&g.x, &g.y, g.c, &masks, &fs, &ba, &ops, &tc(TeacherKind::Simplified)).unwrap();
            let sc = |variant| StudentConfig { variant, d_enc: 16, lambda: 0.5, power: 2, lr: 0.05, weight_decay: 0.01, epochs, dropout: 0.0, seed: 1000 + seed };
            let fo = train_student(&g.x, &g.y, g.c, &masks, &spat.probs, &ba, &sc(StudentVariant::FmlpO)).unwrap();
            let fsud = train_student(&g.x, &g.y, g.c, &masks, &simp.probs, &ba, &sc(StudentVariant::FmlpS)).unwrap();

            t_sp += spat.test_acc; t_si += simp.test_acc;
            s_o += fo.test_acc; s_s += fsud.test_acc;
            a_o += fo.scores.mean_lowpass(0); a_oh += fo.scores.mean_highpass(0);
            a_s += fsud.scores.mean_lowpass(0); a_sh += fsud.scores.mean_highpass(0);
        }
        let k = seeds as f64;
        println!("h={h:.1}: SpatUFG {:.3} FMLP-O {:.3} | SUFG {:.3} FMLP-S {:.3} | aO_low {:.3} aO_hi {:.3} aS_low {:.3} aS_hi {:.3}",
            t_sp / k, s_o / k, t_si / k, s_s / k, a_o / k, a_oh / k, a_s / k, a_sh / k);
    }
    println!("total {:.1}s", t_all.elapsed().as_secs_f64());
}
