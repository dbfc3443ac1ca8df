use ndarray::Array2;
use proptest::prelude::*;
use ttzo::rng::normals;
use ttzo::tensor_train::*;

fn table_spec(row: usize, rank: usize) -> TtSpec {
    let (m, n, modes) = REFERENCE_SHAPES[row];
    let spec = TtSpec::from_modes(&modes, rank).unwrap();
    assert_eq!((spec.in_dim, spec.out_dim), (m, n));
    spec
}

fn random_factors(spec: &TtSpec, seed: u64) -> TtFactors {
    TtFactors::from_flat(spec, &normals(seed, spec.param_count())).unwrap()
}

/// Explicit sum over every rank-index tuple.
fn brute_force(f: &TtFactors, spec: &TtSpec) -> Array2<f64> {
    let modes: Vec<usize> = spec.modes().collect();
    let ranks = spec.ranks();
    let o = spec.order();
    let mut w = Array2::zeros((spec.in_dim, spec.out_dim));
    for i in 0..spec.in_dim {
        for j in 0..spec.out_dim {
            let mut idx = vec![0; 2 * o];
            let (mut ri, mut rj) = (i, j);
            for t in (0..o).rev() {
                idx[t] = ri % modes[t];
                ri /= modes[t];
                idx[o + t] = rj % modes[o + t];
                rj /= modes[o + t];
            }
            let inner = &ranks[1..ranks.len() - 1];
            let tuples: usize = inner.iter().product();
            let mut total = 0.0;
            for mut code in 0..tuples {
                let mut alpha = vec![0; ranks.len()];
                for (slot, r) in alpha[1..ranks.len() - 1].iter_mut().zip(inner).rev() {
                    *slot = code % r;
                    code /= r;
                }
                let mut prod = 1.0;
                for (t, core) in f.cores.iter().enumerate() {
                    prod *= core[[alpha[t], idx[t], alpha[t + 1]]];
                }
                total += prod;
            }
            w[[i, j]] = total;
        }
    }
    w
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sequential_matches_rank_sum_oracle() {
    for (modes, rank, seed) in
        [(vec![2, 2, 2, 2], 3, 1), (vec![3, 2, 4, 2], 2, 2), (vec![2, 3, 2, 2, 3, 2], 3, 3), (vec![5, 4], 1, 4)]
    {
        let spec = TtSpec::from_modes(&modes, rank).unwrap();
        let f = random_factors(&spec, seed);
        let got = materialize_sequential(&f, &spec).unwrap();
        let want = brute_force(&f, &spec);
        assert!(max_abs_diff(&got, &want) <= 1e-12, "{modes:?} r={rank}");
    }
}

#[test]
fn parallel_matches_sequential_on_table_shapes() {
    for row in 0..REFERENCE_SHAPES.len() {
        let spec = table_spec(row, 5);
        let f = random_factors(&spec, 100 + row as u64);
        let seq = materialize_sequential(&f, &spec).unwrap();
        for parts in [2, 3] {
            let par = materialize_parallel(&f, &spec, parts).unwrap();
            assert!(max_abs_diff(&seq, &par) <= 1e-10, "row {row} parts {parts}");
        }
    }
}

#[test]
fn table_param_counts_stay_below_dense() {
    let mut exceptions = Vec::new();
    for row in 0..REFERENCE_SHAPES.len() {
        for rank in 1..=16 {
            let spec = table_spec(row, rank);
            if spec.param_count() >= spec.dense_count() {
                exceptions.push((row, rank, spec.param_count(), spec.dense_count()));
            }
        }
    }
    // 768x8 and 8x768 at rank 16 are the only rows where TT is not smaller.
    assert_eq!(exceptions, vec![(4, 16, 6304, 6144), (6, 16, 6304, 6144)]);
}

#[test]
fn table_examples() {
    assert_eq!(table_spec(0, 5).param_count(), 760);
    assert_eq!(table_spec(0, 5).dense_count(), 49152);
    assert_eq!(table_spec(3, 5).param_count(), 1100);
    let sweep: Vec<usize> = [5, 8, 16].iter().map(|&r| table_spec(1, r).param_count()).collect();
    assert_eq!(sweep, vec![1100, 2720, 10560]);
}

#[test]
fn literal_4096x8_row_is_rejected() {
    let spec = TtSpec::new(4096, 8, vec![16, 16, 16], vec![2, 2, 4], 5);
    assert!(matches!(spec, Err(TtError::DimensionMismatch { .. })));
}

#[test]
fn balanced_init_hits_target_variance() {
    let spec = table_spec(0, 5);
    let target = 2.0 / (768.0 + 64.0);
    // Independent draws of one entry; entries within a single draw share
    // cores and are strongly correlated.
    let entry: Vec<f64> = (0..1000)
        .map(|s| materialize_sequential(&init_factors(&spec, s, InitPolicy::BalancedGaussian), &spec).unwrap()[[5, 7]])
        .collect();
    let var = entry.iter().map(|v| v * v).sum::<f64>() / entry.len() as f64;
    assert!((var / target - 1.0).abs() < 0.5, "entry variance {var} vs {target}");
}

fn arb_case() -> impl Strategy<Value = (Vec<usize>, usize, u64)> {
    (1usize..=3).prop_flat_map(|o| (prop::collection::vec(1usize..=4, 2 * o), 1usize..=4, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parallel_equals_sequential((modes, rank, seed) in arb_case()) {
        let spec = TtSpec::from_modes(&modes, rank).unwrap();
        let f = random_factors(&spec, seed);
        let seq = materialize_sequential(&f, &spec).unwrap();
        for parts in 2..=spec.num_cores().min(3) {
            let par = materialize_parallel(&f, &spec, parts).unwrap();
            prop_assert!(max_abs_diff(&seq, &par) <= 1e-10);
        }
    }

    #[test]
    fn contraction_is_linear_in_each_core((modes, rank, seed) in arb_case(), c in -3.0f64..3.0, pick in any::<prop::sample::Index>()) {
        let spec = TtSpec::from_modes(&modes, rank).unwrap();
        let f = random_factors(&spec, seed);
        let mut scaled = f.clone();
        let t = pick.index(spec.num_cores());
        scaled.cores[t].mapv_inplace(|v| v * c);
        let w = materialize_sequential(&f, &spec).unwrap();
        let ws = materialize_sequential(&scaled, &spec).unwrap();
        prop_assert!(max_abs_diff(&(w * c), &ws) <= 1e-10);
    }

    #[test]
    fn param_count_is_the_core_sum((modes, rank, _s) in arb_case()) {
        let spec = TtSpec::from_modes(&modes, rank).unwrap();
        let total: usize = spec.core_shapes().iter().map(|(a, k, b)| a * k * b).sum();
        prop_assert_eq!(spec.param_count(), total);
        prop_assert_eq!(TtFactors::zeros(&spec).param_count(), total);
    }
}
