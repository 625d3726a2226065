use proptest::prelude::*;

use super::*;
use crate::config::RunConfig;

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
    assert_eq!(accuracy(&[0, 1, 0, 3], &[0, 1, 2, 2]).unwrap(), 0.5);
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&[0], &[0, 1]).is_err());
}

proptest! {
    #[test]
    fn accuracy_is_permutation_invariant(pairs in prop::collection::vec((0usize..8, 0usize..8), 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut crate::rng::stream(seed, "perm", 0));
        let (ps, ls): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(accuracy(&p, &l).unwrap(), accuracy(&ps, &ls).unwrap());
    }
}

fn tail_masses(p: f64, n: usize, lo: usize, hi: usize) -> (f64, f64) {
    // Direct pmf via exact products, independent of the log-space recursion.
    let pmf = |k: usize| -> f64 {
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    };
    ((0..lo).map(pmf).sum(), (hi + 1..=n).map(pmf).sum())
}

#[test]
fn binomial_interval_tails() {
    for (p, n) in [(0.125, 200), (0.125, 64), (0.5, 30), (0.3, 1000)] {
        let (lo, hi) = binomial_interval95(p, n);
        let (below, above) = tail_masses(p, n, lo, hi);
        assert!(below <= 0.025 && above <= 0.025, "{p} {n}: {below} {above}");
        // Widening by one on either side would exceed the tail budget.
        let (b2, _) = tail_masses(p, n, lo + 1, hi);
        let (_, a2) = tail_masses(p, n, lo, hi - 1);
        assert!(b2 > 0.025 && a2 > 0.025);
    }
    let (lo, hi) = binomial_interval95(0.125, 200);
    assert!(lo < 25 && hi > 25);
    assert!((binomial_se(0.5, 100) - 0.05).abs() < 1e-15);
}

#[test]
fn table1_rows_and_policies() {
    let grid = table1_grid();
    let ids: Vec<&str> = grid.iter().map(|r| r.row_id.as_str()).collect();
    assert_eq!(ids, ["Full", "1", "3", "5", "6", "7", "12", "13", "14"]);
    let cfg = RunConfig::default();
    let base = &cfg.policy;
    let full = grid[0].policy(base);
    assert!(full.encoder && full.attention && full.aligned());
    let e_only = grid[6].policy(base);
    assert!(e_only.encoder && !e_only.attention && e_only.aligned());
    let a_only = grid[8].policy(base);
    assert!(!a_only.encoder && a_only.attention && !a_only.aligned() && !a_only.head);
    assert_eq!(grid[1].effective_mask_ratio(&cfg), None);
    assert_eq!(grid[5].effective_mask_ratio(&cfg), Some(0.85));
    let json = serde_json::to_string(&grid).unwrap();
    assert!(json.contains(r#""groups":"E+A""#));
    let back: Vec<AblationRow> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, grid);
}

#[test]
fn ablation_csv_layout() {
    let rows = table1_grid();
    let results = vec![
        AblationResult { row: rows[0].clone(), mask_ratio: Some(0.75), params: 10, accuracy: Ok(0.5), samples: 4 },
        AblationResult { row: rows[1].clone(), mask_ratio: None, params: 0, accuracy: Err("boom".into()), samples: 0 },
    ];
    assert_eq!(
        ablation_csv(&results),
        "row_id,msm,clip,mask_ratio,groups,params,accuracy\nFull,true,true,0.75,E+A,10,0.5\n1,false,false,-,E+A,0,error\n"
    );
}
